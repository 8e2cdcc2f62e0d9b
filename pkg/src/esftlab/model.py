"""Toy causal transformer whose feed-forward blocks are mixture-of-experts layers.

Every layer is ``x -> u = x + attn(rmsnorm(x)) -> h = MoE(u)`` where the MoE
sublayer is applied literally to the residual stream ``u``::

    h = sum_shared FFN_s(u) + sum_i g_i * FFN_i(u) + u
    g_i = s_i if s_i is among the top_k affinities else 0
    s = softmax(u @ centroids.T)

Gate values are the raw softmax affinities (no renormalisation after the
top-k cut).  ``top_k`` counts routed experts only; shared experts are always
active on top of it.
"""

from __future__ import annotations

import contextvars
import json
import struct
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from esftlab import autodiff as ad
from esftlab.autodiff import Tensor


class ConfigError(ValueError):
    pass


# parameter-group kinds
EMBED = "embed"
POS = "pos"
ATTN = "attn"
GATE = "gate"
ROUTED = "routed"
SHARED = "shared"
FINAL_NORM = "final_norm"
HEAD = "head"
LORA_PREFIX = "lora:"

NON_EXPERT_KINDS = (EMBED, POS, ATTN, GATE, FINAL_NORM, HEAD)


class ParamGroup(NamedTuple):
    """Stable identifier of a block of parameters: ``(layer, kind, expert)``.

    ``layer`` is -1 for model-level groups, ``expert`` is -1 for groups that
    do not belong to one expert.
    """

    layer: int
    kind: str
    expert: int = -1

    def __str__(self) -> str:
        return f"{self.layer}/{self.kind}/{self.expert}"

    @classmethod
    def parse(cls, text: str) -> "ParamGroup":
        layer, kind, expert = text.split("/")
        return cls(int(layer), kind, int(expert))


@dataclass
class MoEModelConfig:
    vocab_size: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 1
    n_routed_experts: int = 16
    n_shared_experts: int = 1
    top_k: int = 2
    expert_hidden_dim: int = 32
    segmentation_factor: int = 1
    max_seq_len: int = 64
    seed: int = 0
    # pre-norm on attention, RMS style; recorded for reproducibility
    norm: str = "rms_prenorm"
    # None -> plain top-k gating; otherwise one partition of the routed experts per layer
    expert_groups: list[list[list[int]]] | None = None

    def __post_init__(self) -> None:
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "n_routed_experts",
                     "top_k", "expert_hidden_dim", "segmentation_factor", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.n_shared_experts < 0:
            raise ConfigError("n_shared_experts must be nonnegative")
        if self.n_heads != 1:
            raise ConfigError("only single-head attention is supported")
        if self.top_k > self.n_routed_experts:
            raise ConfigError(f"top_k={self.top_k} exceeds n_routed_experts={self.n_routed_experts}")
        if self.expert_groups is not None:
            if len(self.expert_groups) != self.n_layers:
                raise ConfigError("expert_groups needs one partition per layer")
            self.expert_groups = [[list(map(int, g)) for g in part] for part in self.expert_groups]
            for part in self.expert_groups:
                validate_groups(part, self.n_routed_experts, self.active_fraction)

    @property
    def active_fraction(self) -> Fraction:
        return Fraction(self.top_k, self.n_routed_experts)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MoEModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def expected_parameter_count(cfg: MoEModelConfig) -> int:
    """Closed-form parameter count of a freshly built model (no adapters)."""
    d, h, V = cfg.d_model, cfg.expert_hidden_dim, cfg.vocab_size
    per_layer = (
        4 * d * d + d  # attention projections + norm gain
        + cfg.n_routed_experts * d  # centroids
        + (cfg.n_routed_experts + cfg.n_shared_experts) * 2 * d * h
    )
    return V * d + cfg.max_seq_len * d + cfg.n_layers * per_layer + d + d * V


class MoEModel:
    """Parameter store keyed by :class:`ParamGroup`."""

    def __init__(self, config: MoEModelConfig, groups: dict[ParamGroup, dict[str, Tensor]] | None = None,
                 lora_scaling: float | None = None):
        self.config = config
        self.groups: dict[ParamGroup, dict[str, Tensor]] = groups if groups is not None else _init_params(config)
        self.lora_scaling = lora_scaling

    # -- inspection -------------------------------------------------------
    def parameters(self) -> Iterator[tuple[ParamGroup, str, Tensor]]:
        for g, tensors in self.groups.items():
            for name, t in tensors.items():
                yield g, name, t

    def group_size(self, group: ParamGroup) -> int:
        return sum(t.size for t in self.groups[group].values())

    def parameter_count(self, include_adapters: bool = True) -> int:
        return sum(
            t.size for g, _, t in self.parameters()
            if include_adapters or not g.kind.startswith(LORA_PREFIX)
        )

    def clone(self) -> "MoEModel":
        groups = {
            g: {n: Tensor(t.data.copy(), name=t.name) for n, t in ts.items()}
            for g, ts in self.groups.items()
        }
        cfg = MoEModelConfig.from_dict(json.loads(json.dumps(self.config.to_dict())))
        return MoEModel(cfg, groups, self.lora_scaling)

    def snapshot(self) -> dict[tuple[ParamGroup, str], bytes]:
        return {(g, n): t.data.tobytes() for g, n, t in self.parameters()}

    def set_requires_grad(self, trainable: set[ParamGroup] | None) -> None:
        """Flag exactly the tensors of ``trainable`` groups (all groups if None)."""
        for g, _, t in self.parameters():
            t.requires_grad = trainable is None or g in trainable
            t.grad = None

    def param(self, layer: int, kind: str, name: str, expert: int = -1) -> Tensor:
        return self.groups[ParamGroup(layer, kind, expert)][name]

    def linear(self, x: Tensor, group: ParamGroup, name: str) -> Tensor:
        """``x @ W`` plus the low-rank correction when an adapter is attached."""
        y = ad.matmul(x, self.groups[group][name])
        lora = self.groups.get(ParamGroup(group.layer, LORA_PREFIX + group.kind, group.expert))
        if lora is not None and f"{name}.A" in lora:
            delta = ad.matmul(ad.matmul(x, lora[f"{name}.A"]), lora[f"{name}.B"])
            y = ad.add(y, ad.scale(delta, self.lora_scaling))
        return y


def _init_params(cfg: MoEModelConfig) -> dict[ParamGroup, dict[str, Tensor]]:
    rng = np.random.default_rng(cfg.seed)
    d, h, V, N = cfg.d_model, cfg.expert_hidden_dim, cfg.vocab_size, cfg.n_routed_experts

    def w(*shape, std):
        return Tensor(rng.normal(0.0, std, size=shape))

    groups: dict[ParamGroup, dict[str, Tensor]] = {}
    groups[ParamGroup(-1, EMBED)] = {"weight": w(V, d, std=1.0)}
    groups[ParamGroup(-1, POS)] = {"weight": w(cfg.max_seq_len, d, std=0.1)}
    for layer in range(cfg.n_layers):
        groups[ParamGroup(layer, ATTN)] = {
            "wq": w(d, d, std=d ** -0.5),
            "wk": w(d, d, std=d ** -0.5),
            "wv": w(d, d, std=d ** -0.5),
            "wo": w(d, d, std=0.5 * d ** -0.5),
            "norm": Tensor(np.ones(d)),
        }
        groups[ParamGroup(layer, GATE)] = {"centroids": w(N, d, std=d ** -0.5)}
        for i in range(cfg.n_shared_experts):
            groups[ParamGroup(layer, SHARED, i)] = {
                "w_in": w(d, h, std=d ** -0.5),
                "w_out": w(h, d, std=0.5 * h ** -0.5),
            }
        for i in range(N):
            groups[ParamGroup(layer, ROUTED, i)] = {
                "w_in": w(d, h, std=d ** -0.5),
                "w_out": w(h, d, std=0.5 * h ** -0.5),
            }
    groups[ParamGroup(-1, FINAL_NORM)] = {"weight": Tensor(np.ones(d))}
    groups[ParamGroup(-1, HEAD)] = {"weight": w(d, V, std=d ** -0.5)}
    return groups


# ---------------------------------------------------------------- gating


@dataclass
class GateOutput:
    affinities: Tensor  # [tokens, N]
    gates: Tensor  # [tokens, N], exactly k nonzeros per row
    selected: np.ndarray  # [tokens, k] int, ascending per row

    @property
    def k(self) -> int:
        return self.selected.shape[1]


class FrozenRouting:
    """Replays recorded expert selections, call by call, after :meth:`rewind`."""

    def __init__(self) -> None:
        self.records: list[np.ndarray] = []
        self.cursor = 0

    def rewind(self) -> None:
        self.cursor = 0

    def lookup(self, compute) -> np.ndarray:
        if self.cursor < len(self.records):
            sel = self.records[self.cursor]
        else:
            sel = compute()
            self.records.append(sel)
        self.cursor += 1
        return sel


_frozen: contextvars.ContextVar[FrozenRouting | None] = contextvars.ContextVar(
    "esftlab_frozen_routing", default=None
)


@contextmanager
def frozen_routing() -> Iterator[FrozenRouting]:
    fr = FrozenRouting()
    token = _frozen.set(fr)
    try:
        yield fr
    finally:
        _frozen.reset(token)


def gate_affinity(hidden: Tensor, centroids: Tensor) -> Tensor:
    """Token-to-expert affinities: softmax over experts of ``hidden @ centroids.T``."""
    return ad.softmax_rows(ad.matmul(hidden, ad.transpose(centroids)))


def topk_indices(s: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries per row, ties to the lower index, sorted ascending."""
    order = np.argsort(-s, axis=1, kind="stable")
    return np.sort(order[:, :k], axis=1)


def _gate_from_selection(s: Tensor, selected: np.ndarray) -> GateOutput:
    mask = np.zeros(s.shape)
    np.put_along_axis(mask, selected, 1.0, axis=1)
    return GateOutput(s, ad.mul_const(s, mask), selected)


def topk_gate(s: Tensor, k: int) -> GateOutput:
    n = s.shape[1]
    if not 1 <= k <= n:
        raise ConfigError(f"top-k gate needs 1 <= K <= N, got K={k}, N={n}")
    fr = _frozen.get()
    if fr is None:
        selected = topk_indices(s.data, k)
    else:
        selected = fr.lookup(lambda: topk_indices(s.data, k))
    return _gate_from_selection(s, selected)


def validate_groups(groups: Sequence[Sequence[int]], n: int, active_fraction: Fraction) -> int:
    """Check that ``groups`` is an equal-size partition of ``range(n)``; return the active count."""
    sizes = {len(g) for g in groups}
    members = sorted(i for g in groups for i in g)
    if members != list(range(n)) or len(sizes) != 1:
        raise ConfigError("expert groups must be an equal-size partition of all routed experts")
    size = sizes.pop()
    active = Fraction(active_fraction) * n
    if active.denominator != 1 or active < 1 or active > n or int(active) % size:
        raise ConfigError(f"active_fraction*N={active} is not a positive multiple of group size {size}")
    return int(active)


def grouped_topk_indices(s: np.ndarray, groups: Sequence[Sequence[int]], n_active: int) -> np.ndarray:
    size = len(groups[0])
    ordered = [sorted(g) for g in groups]
    ordered.sort(key=lambda g: g[0])
    members = np.array(ordered)  # [n_groups, size], rows ordered by lowest member
    group_scores = s[:, members].mean(axis=2)  # [tokens, n_groups]
    top = np.argsort(-group_scores, axis=1, kind="stable")[:, : n_active // size]
    return np.sort(members[top].reshape(s.shape[0], -1), axis=1)


def grouped_topk_gate(s: Tensor, groups: Sequence[Sequence[int]], active_fraction: Fraction) -> GateOutput:
    """Top-k over groups scored by mean member affinity; every member of a chosen group is active."""
    n_active = validate_groups(groups, s.shape[1], active_fraction)
    fr = _frozen.get()
    compute = lambda: grouped_topk_indices(s.data, groups, n_active)  # noqa: E731
    selected = compute() if fr is None else fr.lookup(compute)
    return _gate_from_selection(s, selected)


# ---------------------------------------------------------------- forward


def expert_ffn(model: MoEModel, x: Tensor, layer: int, kind: str, expert: int) -> Tensor:
    g = ParamGroup(layer, kind, expert)
    return model.linear(ad.silu(model.linear(x, g, "w_in")), g, "w_out")


def moe_layer_forward(model: MoEModel, hidden: Tensor, layer: int, routing_sink=None) -> Tensor:
    """Shared experts + gated routed experts + residual, for every token row of ``hidden``.

    Each routed expert only runs on the rows that selected it; the weighted
    outputs are added back into those rows.
    """
    cfg = model.config
    if not 0 <= layer < cfg.n_layers:
        raise IndexError(f"layer {layer} out of range")
    s = gate_affinity(hidden, model.param(layer, GATE, "centroids"))
    if cfg.expert_groups is None:
        gate = topk_gate(s, cfg.top_k)
    else:
        gate = grouped_topk_gate(s, cfg.expert_groups[layer], cfg.active_fraction)
    if routing_sink is not None:
        routing_sink.record(layer, gate)

    out = hidden
    for i in range(cfg.n_shared_experts):
        out = ad.add(out, expert_ffn(model, hidden, layer, SHARED, i))
    for i in np.unique(gate.selected):
        rows = np.flatnonzero((gate.selected == i).any(axis=1))
        y = expert_ffn(model, ad.take_rows(hidden, rows), layer, ROUTED, int(i))
        w = ad.take(ad.column(gate.gates, int(i)), rows)
        out = ad.add_rows(out, ad.row_scale(y, w), rows)
    return out


def attention(model: MoEModel, x: Tensor, layer: int, n_seq: int) -> Tensor:
    g = ParamGroup(layer, ATTN)
    xn = ad.rms_norm(x, model.groups[g]["norm"])
    q = model.linear(xn, g, "wq")
    k = model.linear(xn, g, "wk")
    v = model.linear(xn, g, "wv")
    return model.linear(ad.causal_attention(q, k, v, n_seq), g, "wo")


def _as_batch(tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise ValueError("tokens must be a non-empty sequence or a [batch, seq] array")
    return arr


def model_forward(model: MoEModel, tokens, routing_sink=None) -> Tensor:
    """Next-token logits for one sequence ([T]) or a batch of equal-length sequences ([B, T]).

    Rows of the result are ordered sequence by sequence, position by position.
    """
    cfg = model.config
    batch = _as_batch(tokens)
    n_seq, seq_len = batch.shape
    if seq_len > cfg.max_seq_len:
        raise ValueError(f"sequence length {seq_len} exceeds max_seq_len {cfg.max_seq_len}")
    if batch.min() < 0 or batch.max() >= cfg.vocab_size:
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    if routing_sink is not None:
        routing_sink.add_samples([seq_len] * n_seq)

    x = ad.add(
        ad.embedding(model.param(-1, EMBED, "weight"), batch.reshape(-1)),
        ad.embedding(model.param(-1, POS, "weight"), np.tile(np.arange(seq_len), n_seq)),
    )
    for layer in range(cfg.n_layers):
        u = ad.add(x, attention(model, x, layer, n_seq))
        x = moe_layer_forward(model, u, layer, routing_sink)
    x = ad.rms_norm(x, model.param(-1, FINAL_NORM, "weight"))
    return model.linear(x, ParamGroup(-1, HEAD), "weight")


def sequence_loss(model: MoEModel, batch) -> Tensor:
    """Mean cross-entropy of predicting ``batch[:, 1:]`` from ``batch[:, :-1]``."""
    batch = _as_batch(batch)
    logits = model_forward(model, batch[:, :-1])
    return ad.cross_entropy(logits, batch[:, 1:].reshape(-1))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"ESFTCKP1"


def save_checkpoint(model: MoEModel, path: str | Path) -> None:
    """Write ``MAGIC | u64 header length | JSON header | little-endian f64 blocks``.

    The header holds ``config``, ``lora_scaling`` and a ``tensors`` manifest of
    ``{group, name, shape, offset, nbytes}`` with offsets relative to the
    start of the data section.
    """
    entries, blobs, offset = [], [], 0
    for g, name, t in model.parameters():
        raw = t.data.astype("<f8").tobytes()
        entries.append({"group": str(g), "name": name, "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"schema_version": 1, "config": model.config.to_dict(),
                         "lora_scaling": model.lora_scaling, "tensors": entries}).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> MoEModel:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise ValueError(f"{path}: not an esftlab checkpoint")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    data = memoryview(blob)[16 + hlen:]
    groups: dict[ParamGroup, dict[str, Tensor]] = {}
    for e in header["tensors"]:
        arr = np.frombuffer(data[e["offset"]:e["offset"] + e["nbytes"]], dtype="<f8")
        t = Tensor(arr.astype(np.float64).reshape(e["shape"]))
        groups.setdefault(ParamGroup.parse(e["group"]), {})[e["name"]] = t
    return MoEModel(MoEModelConfig.from_dict(header["config"]), groups, header.get("lora_scaling"))
