"""End-to-end experiment pipeline and the data files behind each figure.

Output layout for a run directory ``OUT``::

    OUT/manifest.json                    resolved manifest
    OUT/seed_<s>/corpora/<task>.jsonl     generated corpora
    OUT/seed_<s>/vanilla.ckpt             multitask pretrained model
    OUT/seed_<s>/probe/routing_<task>.jsonl
    OUT/seed_<s>/probe/gate_distribution_<task>.csv
    OUT/seed_<s>/probe/overlap_heatmap.json
    OUT/seed_<s>/probe/overlap_vs_samplesize.json
    OUT/seed_<s>/probe/grouping.json
    OUT/seed_<s>/select/selection_<task>_<method>.json
    OUT/seed_<s>/select/experts_per_layer.csv
    OUT/seed_<s>/select/tradeoff_curve.csv
    OUT/seed_<s>/train/<task>/<method>/report.jsonl
    OUT/seed_<s>/train/<task>/<method>/mask.json
    OUT/seed_<s>/train/<task>/summary.json
    OUT/seed_<s>/grouped/summary.json     (only when group_sizes is set)

CSV files start with a ``# schema_version: 1, kind: <kind>`` comment line.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from esftlab.model import (
    ConfigError,
    MoEModel,
    MoEModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from esftlab.probe import (
    RoutingLog,
    collect_routing,
    cooccurrence_similarity,
    greedy_group,
    normalized_gate_distribution,
    overlap_vs_samplesize,
    partition_score,
    shared_topk_overlap,
    top_fraction_share,
)
from esftlab.selection import (
    ExpertSelection,
    build_train_mask,
    expand_to_groups,
    experts_trained_report,
    load_selection,
    relevance,
    save_selection,
    select_experts,
)
from esftlab.tasks import Corpus, TaskSpec, gen_tasks
from esftlab.trainer import (
    METHODS,
    TrainConfig,
    TrainReport,
    attach_lora,
    evaluate_forgetting,
    merge_lora,
    mix_datasets,
    sample_selection_subset,
    train,
    windows,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("pretrain", "probe", "select", "train", "export")
SCORE_OF_METHOD = {"esft_token": "token_selection_ratio", "esft_gate": "average_gate"}
P_SWEEP = (0.05, 0.1, 0.2, 0.3, 0.5, 0.75, 1.0)
FIGURE_KINDS = ("gate_distribution", "overlap_heatmap", "experts_per_layer", "tradeoff_curve")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


class MissingInputError(FileNotFoundError):
    pass


def _strict(cls, d: dict, what: str):
    unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**d)


@dataclass
class PretrainSettings:
    steps: int = 300
    batch_size: int = 16
    seq_len: int = 32
    learning_rate: float = 3e-3


@dataclass
class ProbeSettings:
    selection_samples: int = 32
    selection_seq_len: int = 32
    overlap_top_k: int = 6
    overlap_sizes: list[int] = field(default_factory=lambda: [64, 256, 1024])
    group_size: int = 2
    ranking_policy: str = "gate_mass"


@dataclass
class TrainSettings:
    max_steps: int = 200
    batch_size: int = 8
    seq_len: int = 32
    eval_every: int = 50
    mix_alignment: bool = True
    learning_rate: dict[str, float] = field(
        default_factory=lambda: {"fft": 3e-3, "lora": 1e-2, "esft_token": 3e-3, "esft_gate": 3e-3}
    )
    p: dict[str, float] = field(default_factory=lambda: {"esft_token": 0.2, "esft_gate": 0.1})
    lora_rank: int = 8
    lora_scaling: float = 2.0
    eval_windows: int = 32


@dataclass
class ExperimentManifest:
    name: str = "experiment"
    output_dir: str = "runs/experiment"
    model: dict | str = field(default_factory=dict)
    checkpoint: str | None = None
    pretrain_tasks: list[TaskSpec] = field(default_factory=list)
    finetune_tasks: list[TaskSpec] = field(default_factory=list)
    methods: list[str] = field(default_factory=lambda: list(METHODS))
    seeds: list[int] = field(default_factory=lambda: [0])
    stages: dict[str, bool] = field(default_factory=lambda: {s: True for s in STAGES})
    pretrain: PretrainSettings = field(default_factory=PretrainSettings)
    probe: ProbeSettings = field(default_factory=ProbeSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    p_sweep: list[float] = field(default_factory=lambda: list(P_SWEEP))
    group_sizes: list[int] = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION
    base_dir: str = "."

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "ExperimentManifest":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        if unknown:
            raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
        for key, sub in (("pretrain", PretrainSettings), ("probe", ProbeSettings), ("train", TrainSettings)):
            if key in d:
                d[key] = _strict(sub, d[key], f"manifest.{key}")
        for key in ("pretrain_tasks", "finetune_tasks"):
            d[key] = [TaskSpec.from_dict(t) for t in d.get(key, [])]
        stages = d.get("stages", {})
        bad = set(stages) - set(STAGES)
        if bad:
            raise ConfigError(f"unknown stages: {sorted(bad)}")
        d["stages"] = {s: bool(stages.get(s, True)) for s in STAGES}
        for m in d.get("methods", []):
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}")
        d["base_dir"] = str(base_dir)
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentManifest":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    def model_config(self, seed: int) -> MoEModelConfig:
        d = self.model
        if isinstance(d, str):
            path = self.resolve(d)
            if not path.exists():
                raise FileNotFoundError(f"model config {path} does not exist")
            d = json.loads(path.read_text())
        return MoEModelConfig.from_dict({**d, "seed": seed})

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)


# ---------------------------------------------------------------- helpers


def _write_csv(path: Path, kind: str, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema_version: {SCHEMA_VERSION}, kind: {kind}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def _write_json(path: Path, kind: str, payload: dict) -> Path:
    path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, "kind": kind, **payload}, indent=2))
    return path


def seeded_specs(specs: Sequence[TaskSpec], seed: int) -> list[TaskSpec]:
    """Same recipes with seeds offset by the run seed."""
    return [dataclasses.replace(s, seed=s.seed + 1000 * seed) for s in specs]


def union_corpus(corpora: Sequence[Corpus], label: str = "alignment") -> Corpus:
    return Corpus([d for c in corpora for d in c.documents], label, max(c.vocab_size for c in corpora))


def pretrain_model(cfg: MoEModelConfig, corpora: Sequence[Corpus], settings: PretrainSettings,
                   seed: int) -> MoEModel:
    """Train a fresh model on the uniform mixture of ``corpora`` with every parameter trainable."""
    model = MoEModel(cfg)
    mix = union_corpus(corpora)
    mask = build_train_mask(model, None, "all", True, True)
    tc = TrainConfig(method="fft", learning_rate=settings.learning_rate, batch_size=settings.batch_size,
                     seq_len=settings.seq_len, max_steps=settings.steps, eval_every=settings.steps, seed=seed)
    train(model, mask, mix_datasets(mix, None, (1, 0)), tc)
    return model


# ---------------------------------------------------------------- figure data


def export_gate_distribution(log_: RoutingLog, path: Path) -> Path:
    rows = []
    for layer in range(log_.n_layers):
        cum = 0.0
        for rank, (e, share) in enumerate(normalized_gate_distribution(log_, layer)):
            cum += share
            rows.append([layer, rank, e, repr(share), repr(cum)])
    return _write_csv(path, "gate_distribution", ["layer", "rank", "expert_id", "share", "cumulative_share"], rows)


def overlap_heatmap(halves: dict[str, tuple[RoutingLog, RoutingLog]], top_k: int,
                    policy: str = "gate_mass") -> dict:
    """``self_overlap[i][j]``: full log of task i vs task j; ``split_half[i][j]``: half A of i vs half B of j."""
    names = list(halves)
    full = {n: _merge(a, b) for n, (a, b) in halves.items()}
    self_ov = [[shared_topk_overlap(full[a], full[b], top_k, policy).mean for b in names] for a in names]
    split = [[shared_topk_overlap(halves[a][0], halves[b][1], top_k, policy).mean for b in names] for a in names]
    return {"tasks": names, "top_k": top_k, "ranking_policy": policy,
            "self_overlap": self_ov, "split_half": split}


@dataclass
class Specialization:
    """Per task: weakest top-quarter gate share over layers, and split-half overlaps."""

    tasks: list[str]
    top_quarter_share: list[float]
    same_task_overlap: list[float]
    max_cross_task_overlap: list[float]

    def concentrated(self, threshold: float = 0.25) -> bool:
        return all(s > threshold for s in self.top_quarter_share)

    def separated(self, margin: float = 0.0) -> bool:
        return all(c < s - margin for s, c in zip(self.same_task_overlap, self.max_cross_task_overlap))


def specialization(halves: dict[str, tuple[RoutingLog, RoutingLog]], top_k: int,
                   policy: str = "gate_mass") -> Specialization:
    heat = overlap_heatmap(halves, top_k, policy)
    names, split = heat["tasks"], heat["split_half"]
    shares, same, cross = [], [], []
    for i, name in enumerate(names):
        full = _merge(*halves[name])
        shares.append(min(top_fraction_share(full, l, 0.25) for l in range(full.n_layers)))
        same.append(split[i][i])
        cross.append(max(split[i][j] for j in range(len(names)) if j != i))
    return Specialization(names, shares, same, cross)


def probe_halves(model: MoEModel, corpora: dict[str, Corpus], n_samples: int, seq_len: int,
                 seed: int) -> dict[str, tuple[RoutingLog, RoutingLog]]:
    """Routing logs on two disjoint document halves of every corpus."""
    out = {}
    for name, corpus in corpora.items():
        a, b = corpus.split(0.5, seed)
        out[name] = tuple(
            collect_routing(model, sample_selection_subset(part, min(n_samples, part.token_count // seq_len),
                                                           seq_len, seed + j), name)
            for j, part in enumerate((a, b)))
    return out


def _merge(a: RoutingLog, b: RoutingLog) -> RoutingLog:
    out = RoutingLog(a.n_layers, a.n_experts, a.top_k, a.task_label, False,
                     list(a.sample_lengths) + list(b.sample_lengths))
    for l in range(a.n_layers):
        out.layers[l] = [a.layer(l), b.layer(l)]
    return out


def experts_per_layer_rows(task: str, sel: ExpertSelection, n_experts: int) -> list[list]:
    rep = experts_trained_report(sel, n_experts)
    return [[task, sel.score_kind, sel.p, l, c, n_experts, repr(f)]
            for l, (c, f) in enumerate(zip(rep.counts, rep.routed_fraction))]


def tradeoff_rows(task: str, model: MoEModel, log_: RoutingLog, ps: Sequence[float]) -> list[list]:
    rows = []
    for kind in SCORE_OF_METHOD.values():
        rel = relevance(log_, kind)
        for p in sorted(ps):
            sel = select_experts(rel, p)
            mask = build_train_mask(model, sel)
            rows.append([task, kind, p, repr(float(np.mean(sel.counts))), mask.trainable_param_count])
    return rows


def export_figure_data(kind: str, run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Rebuild one figure's data files from the stage outputs stored in ``run_dir`` (a seed directory)."""
    run_dir = Path(run_dir)
    out = Path(out_dir) if out_dir is not None else run_dir / "figures"
    if kind not in FIGURE_KINDS:
        raise ConfigError(f"unknown figure kind {kind!r}; expected one of {FIGURE_KINDS}")

    def need(path: Path, stage: str) -> Path:
        if not path.exists():
            raise MissingInputError(f"{path} is missing; run the {stage!r} stage first")
        return path

    out.mkdir(parents=True, exist_ok=True)
    if kind == "gate_distribution":
        logs = sorted(need(run_dir / "probe", "probe").glob("routing_*.jsonl"))
        if not logs:
            raise MissingInputError(f"no routing logs under {run_dir / 'probe'}; run the 'probe' stage first")
        return [export_gate_distribution(RoutingLog.load(p), out / p.name.replace("routing_", "gate_distribution_")
                                         .replace(".jsonl", ".csv")) for p in logs]
    if kind == "overlap_heatmap":
        src = need(run_dir / "probe" / "overlap_heatmap.json", "probe")
        dst = out / "overlap_heatmap.json"
        dst.write_text(src.read_text())
        return [dst]
    if kind == "experts_per_layer":
        src = need(run_dir / "select" / "experts_per_layer.csv", "select")
        dst = out / "experts_per_layer.csv"
        dst.write_text(src.read_text())
        return [dst]
    src = need(run_dir / "select" / "tradeoff_curve.csv", "select")
    dst = out / "tradeoff_curve.csv"
    dst.write_text(src.read_text())
    return [dst]


# ---------------------------------------------------------------- pipeline


@dataclass
class SeedContext:
    seed: int
    root: Path
    corpora: dict[str, Corpus]
    finetune: dict[str, Corpus]
    model: MoEModel | None = None
    selections: dict[tuple[str, str], ExpertSelection] = field(default_factory=dict)
    logs: dict[str, RoutingLog] = field(default_factory=dict)


def _prepare(man: ExperimentManifest, seed: int, root: Path) -> SeedContext:
    cfg = man.model_config(seed)
    corpora = gen_tasks(seeded_specs(man.pretrain_tasks, seed), cfg.vocab_size)
    finetune = gen_tasks(seeded_specs(man.finetune_tasks, seed), cfg.vocab_size)
    cdir = root / "corpora"
    cdir.mkdir(parents=True, exist_ok=True)
    for name, c in {**corpora, **finetune}.items():
        c.save(cdir / f"{name}.jsonl")
    return SeedContext(seed, root, corpora, finetune)


def stage_pretrain(man: ExperimentManifest, ctx: SeedContext) -> None:
    cfg = man.model_config(ctx.seed)
    train_parts = [c.split(0.9, ctx.seed)[0] for c in ctx.corpora.values()]
    ctx.model = pretrain_model(cfg, train_parts, man.pretrain, ctx.seed)
    save_checkpoint(ctx.model, ctx.root / "vanilla.ckpt")


def _load_model(man: ExperimentManifest, ctx: SeedContext) -> MoEModel:
    if ctx.model is None:
        path = ctx.root / "vanilla.ckpt"
        if man.checkpoint:
            path = man.resolve(man.checkpoint)
        if not path.exists():
            raise MissingInputError(f"no checkpoint at {path}; enable the 'pretrain' stage or set 'checkpoint'")
        ctx.model = load_checkpoint(path)
    return ctx.model


def _selection_sample(man: ExperimentManifest, corpus: Corpus, seed: int) -> Corpus:
    ps = man.probe
    n = min(ps.selection_samples, corpus.token_count // ps.selection_seq_len)
    return sample_selection_subset(corpus, n, ps.selection_seq_len, seed)


def stage_probe(man: ExperimentManifest, ctx: SeedContext) -> None:
    model = _load_model(man, ctx)
    pdir = ctx.root / "probe"
    pdir.mkdir(parents=True, exist_ok=True)
    ps = man.probe
    halves = probe_halves(model, {**ctx.corpora, **ctx.finetune}, ps.selection_samples,
                          ps.selection_seq_len, ctx.seed)
    for name, (la, lb) in halves.items():
        full = _merge(la, lb)
        ctx.logs[name] = full
        full.save(pdir / f"routing_{name}.jsonl")
        export_gate_distribution(full, pdir / f"gate_distribution_{name}.csv")
    k = min(ps.overlap_top_k, model.config.n_routed_experts)
    _write_json(pdir / "overlap_heatmap.json", "overlap_heatmap", overlap_heatmap(halves, k, ps.ranking_policy))

    curves = {}
    for name, corpus in {**ctx.corpora, **ctx.finetune}.items():
        sizes = [s for s in ps.overlap_sizes if 2 * s <= corpus.token_count]
        if sizes:
            curves[name] = {str(s): v for s, v in overlap_vs_samplesize(
                model, corpus, sizes, k, seed=ctx.seed, policy=ps.ranking_policy).items()}
    _write_json(pdir / "overlap_vs_samplesize.json", "overlap_vs_samplesize", {"top_k": k, "curves": curves})

    align = _merge_all([ctx.logs[n] for n in ctx.corpora])
    grouping = {}
    N = model.config.n_routed_experts
    if ps.group_size >= 2 and N % ps.group_size == 0:
        for l in range(model.config.n_layers):
            sim = cooccurrence_similarity(align, l)
            part = greedy_group(sim, ps.group_size)
            grouping[str(l)] = {"groups": part, "score": partition_score(sim, part),
                                "similarity": sim.tolist()}
    _write_json(pdir / "grouping.json", "grouping", {"group_size": ps.group_size, "layers": grouping})


def _merge_all(logs: Sequence[RoutingLog]) -> RoutingLog:
    out = logs[0]
    for other in logs[1:]:
        out = _merge(out, other)
    return out


def _finetune_log(man: ExperimentManifest, ctx: SeedContext, task: str) -> RoutingLog:
    if task not in ctx.logs:
        path = ctx.root / "probe" / f"routing_{task}.jsonl"
        if not path.exists():
            raise MissingInputError(f"{path} is missing; run the 'probe' stage first")
        ctx.logs[task] = RoutingLog.load(path)
    return ctx.logs[task]


def stage_select(man: ExperimentManifest, ctx: SeedContext) -> None:
    model = _load_model(man, ctx)
    sdir = ctx.root / "select"
    sdir.mkdir(parents=True, exist_ok=True)
    N = model.config.n_routed_experts
    per_layer, curve = [], []
    for task in ctx.finetune:
        lg = _finetune_log(man, ctx, task)
        for method in man.methods:
            if method not in SCORE_OF_METHOD:
                continue
            sel = select_experts(relevance(lg, SCORE_OF_METHOD[method]), man.train.p[method])
            ctx.selections[(task, method)] = sel
            save_selection(sel, sdir / f"selection_{task}_{method}.json", build_train_mask(model, sel))
            per_layer += experts_per_layer_rows(task, sel, N)
        curve += tradeoff_rows(task, model, lg, man.p_sweep)
    _write_csv(sdir / "experts_per_layer.csv", "experts_per_layer",
               ["task", "score_kind", "p", "layer", "n_selected", "n_experts", "routed_fraction"], per_layer)
    _write_csv(sdir / "tradeoff_curve.csv", "tradeoff_curve",
               ["task", "score_kind", "p", "mean_experts_per_layer", "trainable_param_count"], curve)


def _selection(man: ExperimentManifest, ctx: SeedContext, task: str, method: str) -> ExpertSelection:
    if (task, method) not in ctx.selections:
        path = ctx.root / "select" / f"selection_{task}_{method}.json"
        if not path.exists():
            raise MissingInputError(f"{path} is missing; run the 'select' stage first")
        ctx.selections[(task, method)] = load_selection(path)
    return ctx.selections[(task, method)]


def finetune(vanilla: MoEModel, method: str, task_train: Corpus, alignment: Corpus,
             settings: TrainSettings, seed: int, evals: dict[str, np.ndarray],
             selection: ExpertSelection | None = None) -> tuple[MoEModel, TrainReport]:
    """Fine-tune a copy of ``vanilla`` with one method; returns (merged model, report)."""
    model = vanilla.clone()
    if method == "fft":
        mask = build_train_mask(model, None, "all", True, True)
    elif method == "lora":
        attach_lora(model, settings.lora_rank, settings.lora_scaling, seed)
        mask = build_train_mask(model, None, "none", False, False, adapters=True)
    else:
        if selection is None:
            raise ConfigError(f"{method} needs an expert selection")
        mask = build_train_mask(model, selection)
    sched = mix_datasets(task_train, alignment, (1, 1) if settings.mix_alignment else (1, 0))
    tc = TrainConfig(method=method, learning_rate=settings.learning_rate[method], batch_size=settings.batch_size,
                     seq_len=settings.seq_len, max_steps=settings.max_steps, eval_every=settings.eval_every,
                     p=settings.p.get(method, 0.2), lora_rank=settings.lora_rank,
                     lora_scaling=settings.lora_scaling, mix_alignment=settings.mix_alignment, seed=seed)
    report = train(model, mask, sched, tc, evals)
    return merge_lora(model), report


def eval_sets(task_test: Corpus, align_test: Corpus, seq_len: int, n: int) -> dict[str, np.ndarray]:
    return {"task": windows(task_test, seq_len, n), "alignment": windows(align_test, seq_len, n),
            "general": windows(align_test, seq_len, n)}


def stage_train(man: ExperimentManifest, ctx: SeedContext) -> None:
    vanilla = _load_model(man, ctx)
    ts = man.train
    align_parts = [c.split(0.9, ctx.seed) for c in ctx.corpora.values()]
    align_train = union_corpus([a for a, _ in align_parts])
    align_test = union_corpus([b for _, b in align_parts])
    for task, corpus in ctx.finetune.items():
        tdir = ctx.root / "train" / task
        task_train, task_test = corpus.split(0.8, ctx.seed)
        evals = eval_sets(task_test, align_test, ts.seq_len, ts.eval_windows)
        summary = {"task": task, "vanilla": {"task_loss": None}, "methods": {}}
        for method in man.methods:
            mdir = tdir / method
            mdir.mkdir(parents=True, exist_ok=True)
            sel = _selection(man, ctx, task, method) if method in SCORE_OF_METHOD else None
            model, report = finetune(vanilla, method, task_train, align_train, ts, ctx.seed, evals, sel)
            report.save(mdir / "report.jsonl")
            if sel is not None:
                save_selection(sel, mdir / "mask.json", build_train_mask(vanilla, sel))
            forget = evaluate_forgetting(vanilla, model, evals["alignment"])
            first, last = report.records[0], report.final
            summary["vanilla"]["task_loss"] = first["task_loss"]
            summary["methods"][method] = {
                "trainable_param_count": report.trainable_param_count,
                "task_loss": last["task_loss"],
                "alignment_loss": last["alignment_loss"],
                "forgetting_kl": forget.kl,
                "alignment_delta_loss": forget.delta_loss,
            }
        _write_json(tdir / "summary.json", "comparison_summary", summary)


def stage_grouped(man: ExperimentManifest, ctx: SeedContext) -> None:
    """ESFT-Token under grouped routing for each group size, against FFT on the same grouped model."""
    vanilla = _load_model(man, ctx)
    gdir = ctx.root / "grouped"
    gdir.mkdir(parents=True, exist_ok=True)
    align = _merge_all([ctx.logs.get(n) or RoutingLog.load(ctx.root / "probe" / f"routing_{n}.jsonl")
                        for n in ctx.corpora])
    ts = man.train
    align_parts = [c.split(0.9, ctx.seed) for c in ctx.corpora.values()]
    align_train = union_corpus([a for a, _ in align_parts])
    align_test = union_corpus([b for _, b in align_parts])
    results = {}
    for size in [1, *man.group_sizes]:
        grouped = vanilla.clone()
        if size > 1:
            parts = [greedy_group(cooccurrence_similarity(align, l), size) for l in range(grouped.config.n_layers)]
            grouped.config = MoEModelConfig.from_dict({**grouped.config.to_dict(), "expert_groups": parts})
        for task, corpus in ctx.finetune.items():
            task_train, task_test = corpus.split(0.8, ctx.seed)
            evals = eval_sets(task_test, align_test, ts.seq_len, ts.eval_windows)
            lg = collect_routing(grouped, _selection_sample(man, task_train, ctx.seed), task)
            sel = select_experts(relevance(lg, "token_selection_ratio"), ts.p["esft_token"])
            if size > 1:
                sel = expand_to_groups(sel, grouped.config.expert_groups)
            row = {"mean_trained_experts": float(np.mean(sel.counts))}
            for method in ("esft_token", "fft"):
                _, rep = finetune(grouped, method, task_train, align_train, ts, ctx.seed, evals,
                                  sel if method == "esft_token" else None)
                row[method] = {"task_loss": rep.final["task_loss"], "kl_vs_vanilla": rep.final["kl_vs_vanilla"]}
            results.setdefault(str(size), {})[task] = row
    _write_json(gdir / "summary.json", "grouped_experts", {"group_sizes": [1, *man.group_sizes],
                                                            "results": results})


def run_experiment(man: ExperimentManifest) -> Path:
    """Run every enabled stage for every seed; returns the output directory."""
    out = man.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(man.to_dict(), indent=2))
    for seed in man.seeds:
        root = out / f"seed_{seed}"
        ctx = _prepare(man, seed, root)
        plan = [(s, fn) for s, fn in (("pretrain", stage_pretrain), ("probe", stage_probe),
                                      ("select", stage_select), ("train", stage_train)) if man.stages[s]]
        if man.group_sizes and man.stages["train"]:
            plan.append(("grouped", stage_grouped))
        for name, fn in plan:
            log.info("seed %d: stage %s", seed, name)
            try:
                fn(man, ctx)
            except Exception as exc:
                raise StageError(name, exc) from exc
        if man.stages["export"] and man.stages["probe"]:
            for kind in FIGURE_KINDS:
                if kind in ("experts_per_layer", "tradeoff_curve") and not (root / "select").exists():
                    continue
                export_figure_data(kind, root)
    return out
