"""Masked fine-tuning loops (full, LoRA, expert-specialized) and forgetting probes."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from esftlab import autodiff as ad
from esftlab.autodiff import Tensor
from esftlab.model import (
    ATTN,
    LORA_PREFIX,
    ROUTED,
    SHARED,
    ConfigError,
    MoEModel,
    ParamGroup,
    model_forward,
    sequence_loss,
)
from esftlab.selection import TrainMask
from esftlab.tasks import Corpus

METHODS = ("fft", "lora", "esft_token", "esft_gate")

# settings for a full-size 16B-parameter model; the toy defaults scale these down
LARGE_SCALE = {"batch_size": 32, "seq_len": 4096, "max_steps": 500, "eval_every": 100,
               "lr": {"fft": 3e-5, "lora": 1e-4, "esft": 1e-5},
               "p": {"esft_gate": 0.1, "esft_token": 0.2}, "lora_rank": 8, "lora_scaling": 2.0,
               "mix_ratio": (1, 1)}


@dataclass
class TrainConfig:
    method: str = "esft_token"
    learning_rate: float = 3e-3
    batch_size: int = 8
    seq_len: int = 32
    max_steps: int = 200
    eval_every: int = 50
    p: float = 0.2
    lora_rank: int = 8
    lora_scaling: float = 2.0
    mix_alignment: bool = False
    seed: int = 0
    # constant learning rate; the reference setup names no schedule
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}")
        for name in ("learning_rate", "batch_size", "seq_len", "max_steps", "eval_every",
                     "lora_rank", "lora_scaling"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.method.startswith("esft") and not 0 < self.p <= 1:
            raise ConfigError("p must lie in (0, 1]")
        self.betas = tuple(self.betas)

    @classmethod
    def for_method(cls, method: str, **overrides) -> "TrainConfig":
        p = LARGE_SCALE["p"].get(method, 0.2)
        return cls(method=method, p=overrides.pop("p", p), **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- data


def token_stream(corpus: Corpus) -> np.ndarray:
    return np.concatenate(corpus.documents)


def windows(corpus: Corpus, seq_len: int, limit: int | None = None) -> np.ndarray:
    """Non-overlapping ``[n, seq_len + 1]`` windows over the concatenated documents."""
    stream = token_stream(corpus)
    n = (len(stream) - 1) // seq_len
    if limit is not None:
        n = min(n, limit)
    if n < 1:
        raise ValueError(f"corpus {corpus.task_label!r} is shorter than one window of {seq_len + 1}")
    return np.stack([stream[i * seq_len:i * seq_len + seq_len + 1] for i in range(n)])


def sample_selection_subset(corpus: Corpus, n_samples: int, seq_len: int, seed: int = 0,
                            validate_only: bool = False) -> Corpus | None:
    """Shuffle documents, concatenate, and cut exactly ``n_samples`` sequences of ``seq_len``."""
    need = n_samples * seq_len
    have = corpus.token_count
    if n_samples < 1 or seq_len < 1:
        raise ValueError("n_samples and seq_len must be positive")
    if have < need:
        raise ValueError(f"need {need} tokens for {n_samples}x{seq_len}, corpus has {have} ({need - have} short)")
    if validate_only:
        return None
    order = np.random.default_rng(seed).permutation(len(corpus.documents))
    stream = np.concatenate([corpus.documents[i] for i in order])
    docs = [stream[i * seq_len:(i + 1) * seq_len] for i in range(n_samples)]
    return Corpus(docs, corpus.task_label, corpus.vocab_size)


@dataclass
class BatchSchedule:
    """Step ``s`` draws its whole batch from one source, cycling ``ratio`` windows."""

    sources: dict[str, Corpus]
    ratio: tuple[int, int]
    labels: tuple[str, str] = ("task", "alignment")

    def source(self, step: int) -> str:
        a, b = self.ratio
        return self.labels[0] if step % (a + b) < a else self.labels[1]

    def plan(self, n_steps: int) -> list[str]:
        return [self.source(s) for s in range(n_steps)]

    def batch(self, step: int, batch_size: int, seq_len: int, rng: np.random.Generator) -> tuple[str, np.ndarray]:
        label = self.source(step)
        stream = self._streams.setdefault(label, token_stream(self.sources[label]))
        if len(stream) < seq_len + 1:
            raise ValueError(f"source {label!r} is shorter than one window")
        starts = rng.integers(0, len(stream) - seq_len, size=batch_size)
        return label, np.stack([stream[s:s + seq_len + 1] for s in starts])

    def __post_init__(self) -> None:
        self._streams: dict[str, np.ndarray] = {}


def mix_datasets(task: Corpus | None, alignment: Corpus | None, ratio: tuple[int, int] = (1, 1)) -> BatchSchedule:
    a, b = (int(x) for x in ratio)
    if a < 0 or b < 0 or a + b == 0:
        raise ConfigError(f"invalid mixing ratio {ratio}")
    if a and (task is None or len(task) == 0):
        raise ValueError("task corpus is required by the mixing ratio but empty")
    if b and (alignment is None or len(alignment) == 0):
        raise ValueError("alignment corpus is required by the mixing ratio but empty")
    sources = {}
    if a:
        sources["task"] = task
    if b:
        sources["alignment"] = alignment
    return BatchSchedule(sources, (a, b))


# ---------------------------------------------------------------- LoRA

LORA_TARGETS = {ATTN: ("wq", "wk", "wv", "wo"), ROUTED: ("w_in", "w_out"), SHARED: ("w_in", "w_out")}


def attach_lora(model: MoEModel, rank: int, scaling: float, seed: int = 0) -> MoEModel:
    """Add ``scaling * A @ B`` adapters (A small random, B zero) to attention and expert matrices.

    Embeddings, the output head, norms and gate centroids are not adapted.
    Mutates and returns ``model``.
    """
    if model.lora_scaling is not None:
        raise ConfigError("model already carries adapters")
    targets = [(g, n, model.groups[g][n]) for g in list(model.groups)
               for n in LORA_TARGETS.get(g.kind, ())]
    for g, n, w in targets:
        if not 1 <= rank <= min(w.shape):
            raise ConfigError(f"LoRA rank {rank} invalid for {g}/{n} of shape {w.shape}")
    rng = np.random.default_rng(seed)
    for g, n, w in targets:
        d_in, d_out = w.shape
        lg = ParamGroup(g.layer, LORA_PREFIX + g.kind, g.expert)
        model.groups.setdefault(lg, {})
        model.groups[lg][f"{n}.A"] = Tensor(rng.normal(0.0, d_in ** -0.5, size=(d_in, rank)))
        model.groups[lg][f"{n}.B"] = Tensor(np.zeros((rank, d_out)))
    model.lora_scaling = float(scaling)
    return model


def lora_parameter_count(model: MoEModel) -> int:
    return sum(t.size for g, _, t in model.parameters() if g.kind.startswith(LORA_PREFIX))


def merge_lora(model: MoEModel) -> MoEModel:
    """Fold adapters into their base weights and drop them."""
    if model.lora_scaling is None:
        return model
    for g in [g for g in model.groups if g.kind.startswith(LORA_PREFIX)]:
        base = model.groups[ParamGroup(g.layer, g.kind[len(LORA_PREFIX):], g.expert)]
        ad_ = model.groups.pop(g)
        for name in {k.rsplit(".", 1)[0] for k in ad_}:
            delta = ad_[f"{name}.A"].data @ ad_[f"{name}.B"].data
            base[name] = Tensor(base[name].data + model.lora_scaling * delta)
    model.lora_scaling = None
    return model


# ---------------------------------------------------------------- optimiser


class Adam:
    """Bias-corrected adaptive-moment updates, with state only for trainable tensors."""

    def __init__(self, model: MoEModel, groups: set[ParamGroup], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.params = [(g, n, t) for g, n, t in model.parameters() if g in groups]
        self.state = {(g, n): (np.zeros(t.shape), np.zeros(t.shape)) for g, n, t in self.params}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for g, n, p in self.params:
            if p.grad is None:
                continue
            m, v = self.state[(g, n)]
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad ** 2
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


# ---------------------------------------------------------------- evaluation


def mean_loss(model: MoEModel, batch: np.ndarray, chunk: int = 32) -> float:
    with ad.no_tape():
        total, n = 0.0, 0
        for i in range(0, len(batch), chunk):
            part = batch[i:i + chunk]
            total += sequence_loss(model, part).item() * part.shape[0]
            n += part.shape[0]
    return total / n


def next_token_logprobs(model: MoEModel, batch: np.ndarray) -> np.ndarray:
    with ad.no_tape():
        logits = model_forward(model, batch[:, :-1])
        return ad.log_softmax_rows(logits).data


def mean_kl(logp: np.ndarray, logq: np.ndarray) -> float:
    """Mean over rows of KL(p || q) given log-probabilities."""
    return float(np.mean(np.sum(np.exp(logp) * (logp - logq), axis=1)))


@dataclass
class Forgetting:
    kl: float
    loss_before: float
    loss_after: float

    @property
    def delta_loss(self) -> float:
        return self.loss_after - self.loss_before


def evaluate_forgetting(before: MoEModel, after: MoEModel, probe: np.ndarray | Corpus,
                        seq_len: int = 32) -> Forgetting:
    """Mean KL(p_before || p_after) of next-token distributions over the probe tokens."""
    arch = lambda m: {k: v for k, v in m.config.to_dict().items() if k != "seed"}  # noqa: E731
    if arch(before) != arch(after):
        raise ValueError("models have different architectures")
    batch = windows(probe, seq_len) if isinstance(probe, Corpus) else probe
    kl = mean_kl(next_token_logprobs(before, batch), next_token_logprobs(after, batch))
    return Forgetting(max(kl, 0.0), mean_loss(before, batch), mean_loss(after, batch))


# ---------------------------------------------------------------- training


@dataclass
class TrainReport:
    method: str
    trainable_param_count: int
    records: list[dict] = field(default_factory=list)
    optimizer_state_groups: list[str] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.records[-1]

    def to_jsonl(self) -> str:
        head = {"schema_version": 1, "kind": "train_report", "method": self.method,
                "trainable_param_count": self.trainable_param_count}
        return "\n".join(json.dumps(r) for r in [head, *self.records]) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path: str | Path) -> "TrainReport":
        lines = [json.loads(x) for x in Path(path).read_text().splitlines() if x.strip()]
        return cls(lines[0]["method"], lines[0]["trainable_param_count"], lines[1:])


class NonFiniteLoss(FloatingPointError):
    pass


def train(model: MoEModel, mask: TrainMask, schedule: BatchSchedule, config: TrainConfig,
          evals: dict[str, np.ndarray] | None = None) -> TrainReport:
    """Cross-entropy training; only tensors in ``mask.groups`` are ever updated.

    ``evals`` maps probe names (``task``, ``alignment``, ``general``) to
    ``[n, seq_len + 1]`` windows.  Every ``eval_every`` steps (and at step 0
    and the last step) the report records each probe's loss and, for the
    ``general`` probe, the KL divergence from the model as it was at step 0.
    """
    unknown = [g for g in mask.groups if g not in model.groups]
    if unknown:
        raise ValueError(f"mask names groups missing from the model: {unknown[:3]}")
    evals = evals or {}
    rng = np.random.default_rng(config.seed)
    ref = next_token_logprobs(model, evals["general"]) if "general" in evals else None
    report = TrainReport(config.method, mask.trainable_param_count)
    opt = Adam(model, mask.groups, config.learning_rate, config.betas, config.eps)
    model.set_requires_grad(mask.groups)

    def evaluate(step: int, train_loss: float | None, sec: float | None) -> None:
        rec = {"step": step, "train_loss": train_loss, "seconds_per_step": sec}
        for name, batch in evals.items():
            rec[f"{name}_loss"] = mean_loss(model, batch)
        if ref is not None:
            rec["kl_vs_vanilla"] = max(0.0, mean_kl(ref, next_token_logprobs(model, evals["general"])))
        report.records.append(rec)

    evaluate(0, None, None)
    busy = 0.0  # seconds spent on updates, evaluation excluded
    try:
        for step in range(1, config.max_steps + 1):
            t0 = time.perf_counter()
            _, batch = schedule.batch(step - 1, config.batch_size, config.seq_len, rng)
            with ad.tape() as t:
                loss = sequence_loss(model, batch)
                if not math.isfinite(loss.item()):
                    raise NonFiniteLoss(f"non-finite loss at step {step}")
                ad.backward(loss, t)
            opt.step()
            busy += time.perf_counter() - t0
            if step % config.eval_every == 0 or step == config.max_steps:
                evaluate(step, loss.item(), busy / step)
    except FloatingPointError as exc:
        raise NonFiniteLoss(f"training diverged at step {step}: {exc}") from exc
    finally:
        model.set_requires_grad(set())
    report.optimizer_state_groups = sorted({str(g) for g, _ in opt.state})
    return report
