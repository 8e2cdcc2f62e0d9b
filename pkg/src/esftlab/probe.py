"""Routing logs and the specialization diagnostics computed from them."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from esftlab import autodiff as ad
from esftlab.model import ConfigError, GateOutput, MoEModel, model_forward

RANKING_POLICIES = ("gate_mass", "token_count")


class EmptyLogError(ValueError):
    pass


@dataclass
class LayerRecord:
    selected: np.ndarray  # [tokens, k] int
    gates: np.ndarray  # [tokens, k] gate value of each selected expert
    affinities: np.ndarray | None = None  # [tokens, N]


@dataclass
class RoutingLog:
    """Per-layer, per-token expert choices and their gate values.

    Tokens are stored in processing order; ``sample_lengths`` splits them into
    the sequences they came from (needed for per-sample averaging).
    """

    n_layers: int
    n_experts: int
    top_k: int
    task_label: str = ""
    keep_affinities: bool = False
    sample_lengths: list[int] = field(default_factory=list)
    layers: list[list[LayerRecord]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.layers:
            self.layers = [[] for _ in range(self.n_layers)]
        self._merged: dict[int, LayerRecord] = {}

    # -- sink interface used by model_forward --------------------------------
    def add_samples(self, lengths: Sequence[int]) -> None:
        self.sample_lengths.extend(int(n) for n in lengths)

    def record(self, layer: int, gate: GateOutput) -> None:
        if gate.k != self.top_k:
            raise ValueError(f"log expects {self.top_k} experts per token, gate has {gate.k}")
        sel = gate.selected
        vals = np.take_along_axis(gate.gates.data, sel, axis=1)
        aff = gate.affinities.data.copy() if self.keep_affinities else None
        self.layers[layer].append(LayerRecord(sel.copy(), vals, aff))
        self._merged.pop(layer, None)

    # -- access --------------------------------------------------------------
    @property
    def token_count(self) -> int:
        return int(sum(self.sample_lengths))

    @property
    def layer_count(self) -> int:
        return self.n_layers

    def layer(self, layer: int) -> LayerRecord:
        """All records of one layer concatenated over tokens."""
        if not 0 <= layer < self.n_layers:
            raise IndexError(f"layer {layer} out of range")
        if layer not in self._merged:
            recs = self.layers[layer]
            if not recs:
                k = self.top_k
                merged = LayerRecord(np.zeros((0, k), dtype=np.int64), np.zeros((0, k)))
            else:
                aff = None
                if all(r.affinities is not None for r in recs):
                    aff = np.concatenate([r.affinities for r in recs])
                merged = LayerRecord(
                    np.concatenate([r.selected for r in recs]),
                    np.concatenate([r.gates for r in recs]),
                    aff,
                )
            self._merged[layer] = merged
        return self._merged[layer]

    def dense_gates(self, layer: int) -> np.ndarray:
        """Gate matrix [tokens, N] with zeros for unselected experts."""
        rec = self.layer(layer)
        out = np.zeros((rec.selected.shape[0], self.n_experts))
        np.put_along_axis(out, rec.selected, rec.gates, axis=1)
        return out

    def selection_matrix(self, layer: int) -> np.ndarray:
        rec = self.layer(layer)
        out = np.zeros((rec.selected.shape[0], self.n_experts))
        np.put_along_axis(out, rec.selected, 1.0, axis=1)
        return out

    def sample_ids(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.sample_lengths)), self.sample_lengths)

    def subset(self, samples: Sequence[int]) -> "RoutingLog":
        """Log restricted to the given sample indices (in the given order)."""
        offsets = np.concatenate([[0], np.cumsum(self.sample_lengths)])
        rows = np.concatenate(
            [np.arange(offsets[j], offsets[j + 1]) for j in samples]
        ) if len(samples) else np.zeros(0, dtype=np.int64)
        out = RoutingLog(self.n_layers, self.n_experts, self.top_k, self.task_label,
                         self.keep_affinities, [self.sample_lengths[j] for j in samples])
        for l in range(self.n_layers):
            rec = self.layer(l)
            aff = rec.affinities[rows] if rec.affinities is not None else None
            out.layers[l].append(LayerRecord(rec.selected[rows], rec.gates[rows], aff))
        return out

    # -- line-delimited export -------------------------------------------------
    def save(self, path: str | Path) -> None:
        """Header line, then one ``{"l", "t", "ids", "gates"[, "s"]}`` line per layer and token."""
        with open(path, "w") as fh:
            header = {"schema_version": 1, "kind": "routing_log", "task_label": self.task_label,
                      "n_layers": self.n_layers, "n_experts": self.n_experts, "top_k": self.top_k,
                      "keep_affinities": self.keep_affinities, "sample_lengths": self.sample_lengths}
            fh.write(json.dumps(header) + "\n")
            for l in range(self.n_layers):
                rec = self.layer(l)
                for t in range(rec.selected.shape[0]):
                    row = {"l": l, "t": t, "ids": rec.selected[t].tolist(),
                           "gates": [float(x) for x in rec.gates[t]]}
                    if rec.affinities is not None:
                        row["s"] = [float(x) for x in rec.affinities[t]]
                    fh.write(json.dumps(row) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "RoutingLog":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("kind") != "routing_log":
                raise ValueError(f"{path}: not a routing log")
            log = cls(header["n_layers"], header["n_experts"], header["top_k"],
                      header["task_label"], header["keep_affinities"], list(header["sample_lengths"]))
            sel = [[] for _ in range(log.n_layers)]
            gates = [[] for _ in range(log.n_layers)]
            aff = [[] for _ in range(log.n_layers)]
            for lineno, line in enumerate(fh, start=2):
                try:
                    row = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{lineno}: {exc}") from exc
                sel[row["l"]].append(row["ids"])
                gates[row["l"]].append(row["gates"])
                if "s" in row:
                    aff[row["l"]].append(row["s"])
        k = log.top_k
        for l in range(log.n_layers):
            a = np.array(aff[l]) if aff[l] else None
            log.layers[l].append(LayerRecord(np.array(sel[l], dtype=np.int64).reshape(-1, k),
                                             np.array(gates[l], dtype=np.float64).reshape(-1, k), a))
        return log


def collect_routing(model: MoEModel, sequences, task_label: str = "", batch_size: int = 16,
                    keep_affinities: bool = False) -> RoutingLog:
    """Run the model over every sequence with a routing sink attached.

    ``sequences`` is a list of token sequences (any lengths) or a Corpus.
    Equal-length neighbours are batched together; order is preserved.
    """
    docs = getattr(sequences, "documents", sequences)
    vocab = getattr(sequences, "vocab_size", None)
    if vocab is not None and vocab > model.config.vocab_size:
        raise ValueError(f"corpus vocab {vocab} exceeds model vocab {model.config.vocab_size}")
    if len(docs) == 0:
        raise ValueError("cannot collect routing on an empty corpus")
    cfg = model.config
    L = cfg.max_seq_len
    chunks = [np.asarray(d[i:i + L], dtype=np.int64) for d in docs for i in range(0, len(d), L)]
    log = RoutingLog(cfg.n_layers, cfg.n_routed_experts, cfg.top_k,
                     task_label or getattr(sequences, "task_label", ""), keep_affinities)
    with ad.no_tape():
        i = 0
        while i < len(chunks):
            j = i + 1
            while j < len(chunks) and j - i < batch_size and len(chunks[j]) == len(chunks[i]):
                j += 1
            model_forward(model, np.stack(chunks[i:j]), routing_sink=log)
            i = j
    return log


# ---------------------------------------------------------------- probes


def expert_totals(log: RoutingLog, layer: int, policy: str = "gate_mass") -> np.ndarray:
    if policy == "gate_mass":
        return log.dense_gates(layer).sum(axis=0)
    if policy == "token_count":
        return log.selection_matrix(layer).sum(axis=0)
    raise ConfigError(f"unknown ranking policy {policy!r}; expected one of {RANKING_POLICIES}")


def rank_experts(totals: np.ndarray) -> np.ndarray:
    """Expert ids by descending total, ties to the lower id."""
    return np.argsort(-totals, kind="stable")


def normalized_gate_distribution(log: RoutingLog, layer: int) -> list[tuple[int, float]]:
    """Each expert's share of the layer's total gate mass, largest first."""
    if log.token_count == 0:
        raise EmptyLogError("routing log is empty")
    totals = expert_totals(log, layer)
    mass = totals.sum()
    if mass <= 0:
        raise EmptyLogError(f"layer {layer} has zero gate mass")
    shares = totals / mass
    return [(int(i), float(shares[i])) for i in rank_experts(shares)]


def cumulative_share(dist: Sequence[tuple[int, float]]) -> np.ndarray:
    return np.cumsum([s for _, s in dist])


def top_fraction_share(log: RoutingLog, layer: int, fraction: float = 0.25) -> float:
    """Gate-mass share carried by the top ``fraction`` of experts."""
    dist = normalized_gate_distribution(log, layer)
    n = max(1, int(round(fraction * len(dist))))
    return float(sum(s for _, s in dist[:n]))


def top_experts(log: RoutingLog, layer: int, top_k: int, policy: str = "gate_mass") -> set[int]:
    return set(int(i) for i in rank_experts(expert_totals(log, layer, policy))[:top_k])


@dataclass
class Overlap:
    per_layer: list[int]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_layer))


def shared_topk_overlap(log_a: RoutingLog, log_b: RoutingLog, top_k: int,
                        policy: str = "gate_mass") -> Overlap:
    """Per layer, size of the intersection of the two logs' top-k experts."""
    if (log_a.n_layers, log_a.n_experts) != (log_b.n_layers, log_b.n_experts):
        raise ValueError(
            f"logs differ in shape: {(log_a.n_layers, log_a.n_experts)} vs {(log_b.n_layers, log_b.n_experts)}"
        )
    if not 1 <= top_k <= log_a.n_experts:
        raise ConfigError(f"top_k must lie in [1, {log_a.n_experts}]")
    return Overlap([
        len(top_experts(log_a, l, top_k, policy) & top_experts(log_b, l, top_k, policy))
        for l in range(log_a.n_layers)
    ])


def cooccurrence_counts(log: RoutingLog, layer: int) -> np.ndarray:
    """``C[i, j]`` = number of tokens whose selection contains both i and j.

    The diagonal counts tokens selecting ``i``, so experts that always fire
    together get identical rows.
    """
    sel = log.selection_matrix(layer)
    return sel.T @ sel


def cosine_similarity_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1)
    active = norms > 0
    out = np.zeros((m.shape[0], m.shape[0]))
    unit = m[active] / norms[active, None]
    out[np.ix_(active, active)] = np.clip(unit @ unit.T, 0.0, 1.0)
    out[active, active] = 1.0
    return (out + out.T) / 2


def cooccurrence_similarity(log: RoutingLog, layer: int) -> np.ndarray:
    """Cosine similarity of co-occurrence rows; never-selected experts get 0 everywhere."""
    return cosine_similarity_rows(cooccurrence_counts(log, layer))


def group_score(sim: np.ndarray, group: Sequence[int]) -> float:
    """Mean pairwise similarity within ``group``."""
    pairs = list(itertools.combinations(group, 2))
    return float(np.mean([sim[i, j] for i, j in pairs]))


def greedy_group(sim: np.ndarray, group_size: int) -> list[list[int]]:
    """Repeatedly take the unselected ``group_size``-subset with the highest mean similarity.

    Candidates are enumerated in lexicographic order and only a strictly better
    score replaces the incumbent, so ties go to the smallest index tuple.
    """
    n = sim.shape[0]
    if group_size < 2 or n % group_size:
        raise ConfigError(f"cannot split {n} experts into groups of {group_size}")
    remaining = list(range(n))
    groups = []
    while remaining:
        best, best_score = None, -np.inf
        for cand in itertools.combinations(remaining, group_size):
            sc = group_score(sim, cand)
            if sc > best_score:
                best, best_score = cand, sc
        groups.append(list(best))
        remaining = [i for i in remaining if i not in best]
    return groups


def partition_score(sim: np.ndarray, groups: Sequence[Sequence[int]]) -> float:
    """Total of intra-group mean similarities."""
    return float(sum(group_score(sim, g) for g in groups))


def overlap_vs_samplesize(model: MoEModel, corpus, sizes: Sequence[int], top_k: int,
                          seed: int = 0, same_sample: bool = False,
                          policy: str = "gate_mass") -> dict[int, float]:
    """Mean shared top-k overlap between two disjoint token samples of each size.

    Documents are shuffled and concatenated into one token stream; the first
    ``size`` tokens form sample A and the next ``size`` tokens sample B.
    ``same_sample`` compares A with itself.
    """
    if not sizes or min(sizes) < 1:
        raise ValueError("sample sizes must be positive token counts")
    docs = getattr(corpus, "documents", corpus)
    total = sum(len(d) for d in docs)
    need = 2 * max(sizes)
    if total < need:
        raise ValueError(f"corpus has {total} tokens; two disjoint samples of {max(sizes)} need {need}")
    L = model.config.max_seq_len
    out = {}
    for size in sizes:
        rng = np.random.default_rng([seed, size])
        order = rng.permutation(len(docs))
        stream = np.concatenate([np.asarray(docs[i], dtype=np.int64) for i in order])
        a = _chunk(stream[:size], L)
        b = a if same_sample else _chunk(stream[size:2 * size], L)
        log_a = collect_routing(model, a)
        log_b = log_a if same_sample else collect_routing(model, b)
        out[int(size)] = shared_topk_overlap(log_a, log_b, top_k, policy).mean
    return out


def _chunk(stream: np.ndarray, length: int) -> list[np.ndarray]:
    return [stream[i:i + length] for i in range(0, len(stream), length)]
