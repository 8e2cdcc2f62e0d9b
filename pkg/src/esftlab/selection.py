"""Expert relevance scores, threshold selection and trainable-parameter masks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from esftlab.model import (
    LORA_PREFIX,
    NON_EXPERT_KINDS,
    ROUTED,
    SHARED,
    ConfigError,
    MoEModel,
    ParamGroup,
)
from esftlab.probe import RoutingLog

SCORE_KINDS = ("average_gate", "token_selection_ratio")
ROUTED_POLICIES = ("all", "selected", "none")


@dataclass
class ExpertRelevance:
    scores: np.ndarray  # [layers, N]
    score_kind: str
    sample_lengths: list[int] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return self.scores.shape[0]


def _per_sample_mean(log: RoutingLog, values_fn) -> np.ndarray:
    if log.token_count == 0 or not log.sample_lengths:
        raise ValueError("routing log is empty")
    sample_ids = log.sample_ids()
    n_samples = len(log.sample_lengths)
    lengths = np.asarray(log.sample_lengths, dtype=np.float64)
    out = np.zeros((log.n_layers, log.n_experts))
    for l in range(log.n_layers):
        vals = values_fn(l)  # [tokens, N]
        sums = np.zeros((n_samples, log.n_experts))
        np.add.at(sums, sample_ids, vals)
        out[l] = (sums / lengths[:, None]).mean(axis=0)
    return out


def average_gate_score(log: RoutingLog) -> ExpertRelevance:
    """Per expert: mean over samples of the mean gate value over that sample's tokens."""
    scores = _per_sample_mean(log, log.dense_gates)
    return ExpertRelevance(scores, "average_gate", list(log.sample_lengths))


def token_selection_ratio(log: RoutingLog, k: int) -> ExpertRelevance:
    """Per expert: share of token slots (k per token) that picked it, averaged per sample first."""
    if k != log.top_k:
        raise ValueError(f"K={k} does not match the log's {log.top_k} experts per token")
    scores = _per_sample_mean(log, lambda l: log.selection_matrix(l) / k)
    return ExpertRelevance(scores, "token_selection_ratio", list(log.sample_lengths))


def relevance(log: RoutingLog, score_kind: str) -> ExpertRelevance:
    if score_kind == "average_gate":
        return average_gate_score(log)
    if score_kind == "token_selection_ratio":
        return token_selection_ratio(log, log.top_k)
    raise ConfigError(f"unknown score kind {score_kind!r}")


@dataclass
class ExpertSelection:
    experts: list[list[int]]  # per layer, ascending
    p: float
    score_kind: str
    achieved_mass: list[float]

    @property
    def counts(self) -> list[int]:
        return [len(e) for e in self.experts]

    def groups(self) -> set[ParamGroup]:
        return {ParamGroup(l, ROUTED, i) for l, es in enumerate(self.experts) for i in es}

    def to_dict(self) -> dict:
        return {"schema_version": 1, "p": self.p, "score_kind": self.score_kind,
                "experts": {str(l): e for l, e in enumerate(self.experts)},
                "achieved_mass": self.achieved_mass}

    @classmethod
    def from_dict(cls, d: dict) -> "ExpertSelection":
        layers = sorted(d["experts"], key=int)
        return cls([list(d["experts"][l]) for l in layers], d["p"], d["score_kind"], d["achieved_mass"])


def select_layer(scores: np.ndarray, p: float) -> tuple[list[int], float]:
    """Shortest descending-score prefix whose running sum reaches ``p``.

    If the whole row sums to less than ``p`` every positive-score expert is
    taken and the achieved mass is the row total.
    """
    order = np.argsort(-scores, kind="stable")
    cum = np.cumsum(scores[order])
    if cum[-1] < p:
        chosen = [int(i) for i in order if scores[i] > 0]
        return sorted(chosen), float(cum[-1])
    n = int(np.argmax(cum >= p)) + 1
    return sorted(int(i) for i in order[:n]), float(cum[n - 1])


def select_experts(rel: ExpertRelevance, p: float) -> ExpertSelection:
    if not 0 < p <= 1:
        raise ConfigError(f"threshold p must lie in (0, 1], got {p}")
    experts, mass = [], []
    for row in rel.scores:
        e, m = select_layer(row, p)
        experts.append(e)
        mass.append(m)
    return ExpertSelection(experts, float(p), rel.score_kind, mass)


def expand_to_groups(sel: ExpertSelection, partitions: Sequence[Sequence[Sequence[int]]]) -> ExpertSelection:
    """Widen a selection so every touched expert group is selected whole (one partition per layer)."""
    widened = []
    for es, groups in zip(sel.experts, partitions):
        chosen = set(es)
        widened.append(sorted({i for g in groups if chosen & set(g) for i in g}))
    return ExpertSelection(widened, sel.p, sel.score_kind, list(sel.achieved_mass))


def random_selection(sel: ExpertSelection, n_experts: int, seed: int,
                     rel: ExpertRelevance | None = None) -> ExpertSelection:
    """Same per-layer counts as ``sel`` but experts drawn uniformly at random.

    The achieved mass is read off ``rel`` when given, else left at 0.
    """
    rng = np.random.default_rng(seed)
    experts = [sorted(int(i) for i in rng.choice(n_experts, size=len(es), replace=False))
               for es in sel.experts]
    mass = [float(rel.scores[l, es].sum()) if rel is not None else 0.0 for l, es in enumerate(experts)]
    return ExpertSelection(experts, sel.p, f"random:{sel.score_kind}", mass)


@dataclass
class TrainMask:
    routed_policy: str
    shared_experts_trainable: bool
    non_expert_trainable: bool
    adapters_trainable: bool
    groups: set[ParamGroup]
    trainable_param_count: int

    def to_dict(self, selection: ExpertSelection | None = None) -> dict:
        d = {"schema_version": 1, "routed_policy": self.routed_policy,
             "shared_experts_trainable": self.shared_experts_trainable,
             "non_expert_trainable": self.non_expert_trainable,
             "adapters_trainable": self.adapters_trainable,
             "groups": sorted(str(g) for g in self.groups),
             "trainable_param_count": self.trainable_param_count}
        if selection is not None:
            d.update({"p": selection.p, "score_kind": selection.score_kind,
                      "experts": {str(l): e for l, e in enumerate(selection.experts)}})
        return d


# (routed policy, shared experts, non-expert parameters), in the row order of the
# shared/non-shared ablation; "vanilla" trains nothing.
FREEZE_STRATEGIES = {
    "all+shared+non_expert": ("all", True, True),
    "selected+shared": ("selected", True, False),
    "selected": ("selected", False, False),
    "shared": ("none", True, False),
    "shared+non_expert": ("none", True, True),
    "selected+shared+non_expert": ("selected", True, True),
    "vanilla": ("none", False, False),
}


def build_train_mask(model: MoEModel, sel: ExpertSelection | None = None, routed_policy: str = "selected",
                     shared: bool = False, non_expert: bool = False, adapters: bool = False) -> TrainMask:
    """Resolve policy flags into the set of trainable parameter groups.

    The defaults are the expert-specialized setting: selected routed experts
    only, everything else frozen.
    """
    if routed_policy not in ROUTED_POLICIES:
        raise ConfigError(f"routed_policy must be one of {ROUTED_POLICIES}")
    if routed_policy == "selected":
        if sel is None:
            raise ConfigError("routed_policy='selected' needs an ExpertSelection")
        if len(sel.experts) != model.config.n_layers:
            raise ConfigError("selection layer count does not match the model")
        chosen = sel.groups()
    groups = set()
    for g in model.groups:
        if g.kind == ROUTED:
            take = routed_policy == "all" or (routed_policy == "selected" and g in chosen)
        elif g.kind == SHARED:
            take = shared
        elif g.kind in NON_EXPERT_KINDS:
            take = non_expert
        elif g.kind.startswith(LORA_PREFIX):
            take = adapters
        else:
            raise ConfigError(f"unclassified parameter group {g}")
        if take:
            groups.add(g)
    count = sum(model.group_size(g) for g in groups)
    return TrainMask(routed_policy, shared, non_expert, adapters, groups, count)


def strategy_mask(model: MoEModel, name: str, sel: ExpertSelection | None = None) -> TrainMask:
    policy, shared, non_expert = FREEZE_STRATEGIES[name]
    return build_train_mask(model, sel, policy, shared, non_expert)


@dataclass
class ExpertsTrainedReport:
    counts: list[int]  # per layer
    n_experts: int
    routed_fraction: list[float]

    @property
    def mean_count(self) -> float:
        return float(np.mean(self.counts))


def experts_trained_report(sel: ExpertSelection, n_experts: int | None = None) -> ExpertsTrainedReport:
    """Selected-expert count per layer and, if ``n_experts`` is known, the fraction of routed experts."""
    counts = sel.counts
    frac = [c / n_experts for c in counts] if n_experts else []
    return ExpertsTrainedReport(counts, n_experts or 0, frac)


def save_selection(sel: ExpertSelection, path: str | Path, mask: TrainMask | None = None) -> None:
    d = sel.to_dict()
    if mask is not None:
        d["trainable_param_count"] = mask.trainable_param_count
    Path(path).write_text(json.dumps(d, indent=2))


def load_selection(path: str | Path) -> ExpertSelection:
    return ExpertSelection.from_dict(json.loads(Path(path).read_text()))
