"""The ten acceptance criteria, each printed as one PASS/FAIL line at the end of the run.

Criteria 6 and 7 share one session fixture that pretrains the demo model on
five seeds and fine-tunes it with every method the checks compare.
"""

import itertools
import json
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from test_autodiff import _primitive_cases
from test_selection import brute_force_prefix
from verdicts import record

from esftlab import autodiff as ad
from esftlab import experiment as ex
from esftlab.autodiff import Tensor
from esftlab.model import (
    ROUTED,
    SHARED,
    MoEModel,
    MoEModelConfig,
    grouped_topk_gate,
    moe_layer_forward,
    topk_gate,
)
from esftlab.probe import (
    RoutingLog,
    collect_routing,
    cosine_similarity_rows,
    greedy_group,
    partition_score,
)
from esftlab.selection import (
    build_train_mask,
    random_selection,
    relevance,
    select_experts,
    select_layer,
    token_selection_ratio,
)
from esftlab.trainer import evaluate_forgetting

ROOT = Path(__file__).resolve().parents[1]
DEMO = ROOT / "configs" / "demo.json"
BASELINE = ROOT / "configs" / "specialization_baseline.json"
SEEDS = range(5)
DEMO_BUDGET_SECONDS = 600.0


def demo_manifest(output_dir: Path) -> ex.ExperimentManifest:
    man = ex.ExperimentManifest.load(DEMO)
    man.output_dir = str(output_dir)
    return man


@pytest.fixture(scope="session")
def demo_run(tmp_path_factory):
    """The full demo manifest, timed."""
    t0 = time.perf_counter()
    out = ex.run_experiment(demo_manifest(tmp_path_factory.mktemp("demo") / "run"))
    return out / "seed_0", time.perf_counter() - t0


@pytest.fixture(scope="session")
def seed_runs(tmp_path_factory):
    """Per seed: specialization summary, selection log, and the fine-tuned models and reports."""
    man = demo_manifest(tmp_path_factory.mktemp("seeds"))
    ts = man.train
    runs = {}
    for seed in SEEDS:
        ctx = ex._prepare(man, seed, man.out / f"seed_{seed}")
        ex.stage_pretrain(man, ctx)
        vanilla = ctx.model
        halves = ex.probe_halves(vanilla, ctx.corpora, man.probe.selection_samples,
                                 man.probe.selection_seq_len, seed)
        spec = ex.specialization(halves, man.probe.overlap_top_k, man.probe.ranking_policy)

        align_parts = [c.split(0.9, seed) for c in ctx.corpora.values()]
        align_train = ex.union_corpus([a for a, _ in align_parts])
        align_test = ex.union_corpus([b for _, b in align_parts])
        task_train, task_test = ctx.finetune["math_ft"].split(0.8, seed)
        evals = ex.eval_sets(task_test, align_test, ts.seq_len, ts.eval_windows)
        sel_log = collect_routing(vanilla, ex._selection_sample(man, task_train, seed), "math_ft")

        sels = {m: select_experts(relevance(sel_log, ex.SCORE_OF_METHOD[m]), ts.p[m])
                for m in ("esft_token", "esft_gate")}
        token_rel = relevance(sel_log, "token_selection_ratio")
        sels["random"] = random_selection(sels["esft_token"], vanilla.config.n_routed_experts, seed, token_rel)
        results = {}
        for name in ("esft_token", "esft_gate", "random", "fft"):
            method = "esft_token" if name == "random" else name
            model, rep = ex.finetune(vanilla, method, task_train, align_train, ts, seed, evals, sels.get(name))
            forget = evaluate_forgetting(vanilla, model, evals["alignment"])
            results[name] = {"model": model, "report": rep, "kl": forget.kl, "selection": sels.get(name),
                             "vanilla_loss": rep.records[0]["task_loss"], "task_loss": rep.final["task_loss"]}
        runs[seed] = {"vanilla": vanilla, "spec": spec, "sel_log": sel_log, "halves": halves,
                      "results": results}
    return runs


# ---------------------------------------------------------------- 1. gradients


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    errors = {name: ad.grad_check(f, inputs, eps=1e-5) for name, (f, inputs) in _primitive_cases().items()}
    worst_prim = max(errors.values())

    model = MoEModel(MoEModelConfig(vocab_size=8, d_model=6, n_layers=1, n_routed_experts=6, n_shared_experts=1,
                                    top_k=2, expert_hidden_dim=5, max_seq_len=8, seed=3))
    u = Tensor(np.random.default_rng(4).standard_normal((7, 6)))
    params = [model.param(0, "gate", "centroids")]
    params += [model.param(0, ROUTED, w, e) for e in range(6) for w in ("w_in", "w_out")]
    params += [model.param(0, SHARED, w, 0) for w in ("w_in", "w_out")]
    w = np.random.default_rng(5).uniform(0.5, 1.5, (7, 6))
    block = ad.grad_check(lambda u, *_: ad.sum(ad.mul_const(moe_layer_forward(model, u, 0), w)), [u, *params])
    elapsed = time.perf_counter() - t0

    ok = worst_prim < 1e-6 and block < 1e-4 and elapsed < 30
    worst = max(errors, key=errors.get)
    assert record("1", "gradient suite", ok,
                  f"{len(errors)} primitives max rel err {worst_prim:.2e} ({worst}), MoE block {block:.2e}, "
                  f"{elapsed:.1f}s"), errors


# ---------------------------------------------------------------- 2. routing structure


def test_criterion_02_routing_structure():
    rng = np.random.default_rng(2024)
    logits = rng.standard_normal((1000, 16)) * 2
    s = ad.softmax_rows(Tensor(logits)).data
    g = topk_gate(Tensor(s), 2)
    mismatches = 0
    for row, sel, gates in zip(s, g.selected, g.gates.data):
        ref = sorted(np.argsort(-row, kind="stable")[:2].tolist())
        nonzero = np.flatnonzero(gates).tolist()
        if sel.tolist() != ref or nonzero != ref or not np.array_equal(gates[ref], row[ref]):
            mismatches += 1
    # the affinities themselves are a plain softmax of the logits
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    softmax_err = float(np.abs(s - e / e.sum(axis=1, keepdims=True)).max())
    grouped = grouped_topk_gate(Tensor(s), [[i] for i in range(16)], Fraction(2, 16))
    singleton_exact = (np.array_equal(grouped.selected, g.selected)
                       and grouped.gates.data.tobytes() == g.gates.data.tobytes())
    ok = mismatches == 0 and singleton_exact and softmax_err < 1e-15
    assert record("2", "routing structure", ok,
                  f"1000 rows, {mismatches} oracle mismatches, softmax err {softmax_err:.1e}, "
                  f"singleton groups bit-exact={singleton_exact}")


# ---------------------------------------------------------------- 3. token ratio identity


def test_criterion_03_token_ratio_sums(demo_run, seed_runs):
    seed_dir, _ = demo_run
    logs = [RoutingLog.load(p) for p in sorted((seed_dir / "probe").glob("routing_*.jsonl"))]
    for run in seed_runs.values():
        logs.append(run["sel_log"])
        logs += [h for pair in run["halves"].values() for h in pair]
    worst = 0.0
    for lg in logs:
        sums = token_selection_ratio(lg, lg.top_k).scores.sum(axis=1)
        worst = max(worst, float(np.abs(sums - 1.0).max()))
    ok = worst <= 1e-9 and len(logs) > 0
    assert record("3", "token-ratio layer sums", ok, f"{len(logs)} logs, max |sum - 1| = {worst:.1e}")


# ---------------------------------------------------------------- 4. threshold selection


def test_criterion_04_threshold_semantics():
    rng = np.random.default_rng(7)
    minimality = monotone = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 17))
        scores = rng.dirichlet(np.full(n, 0.5)) if rng.random() < 0.5 else rng.uniform(0, 1, n) / n
        if rng.random() < 0.2:
            scores[rng.integers(0, n)] = 0.0
        p1, p2 = sorted(rng.uniform(1e-6, 1.0, 2))
        chosen1, _ = select_layer(scores, p1)
        chosen2, _ = select_layer(scores, p2)
        if chosen1 != brute_force_prefix(scores.tolist(), p1) or chosen2 != brute_force_prefix(scores.tolist(), p2):
            minimality += 1
        if not set(chosen1) <= set(chosen2):
            monotone += 1
    ok = minimality == 0 and monotone == 0
    assert record("4", "threshold selection", ok,
                  f"10000 vectors, {minimality} prefix violations, {monotone} monotonicity violations")


# ---------------------------------------------------------------- 5. freezing


def test_criterion_05_freezing(seed_runs):
    run = seed_runs[0]
    vanilla, res = run["vanilla"], run["results"]["esft_token"]
    before, after = vanilla.snapshot(), res["model"].snapshot()
    mask = build_train_mask(vanilla, res["selection"])
    frozen_changed = [k for k, raw in before.items() if k[0] not in mask.groups and after[k] != raw]
    selected_same = [k for k, raw in before.items() if k[0] in mask.groups and after[k] == raw]
    state = set(res["report"].optimizer_state_groups)
    steps = res["report"].final["step"]
    ok = (not frozen_changed and not selected_same and state == {str(g) for g in mask.groups}
          and steps == 200 and len(mask.groups) > 0)
    assert record("5", "freezing soundness", ok,
                  f"{steps} steps, {len(mask.groups)} selected groups, {len(frozen_changed)} frozen tensors "
                  f"changed, {len(selected_same)} selected tensors unchanged, optimizer groups {len(state)}")


# ---------------------------------------------------------------- 6. specialization


def test_criterion_06_specialization(seed_runs):
    base = json.loads(BASELINE.read_text())
    threshold, margin = base["share_threshold"], base["overlap_margin"]
    passing, details = 0, []
    for seed, run in seed_runs.items():
        spec = run["spec"]
        good = spec.concentrated(threshold) and spec.separated(margin)
        passing += good
        gaps = [s - c for s, c in zip(spec.same_task_overlap, spec.max_cross_task_overlap)]
        details.append(f"s{seed}:{min(spec.top_quarter_share):.2f}/{min(gaps):.1f}")
    ok = passing >= 4
    assert record("6", "specialization emergence", ok,
                  f"{passing}/5 seeds (share > {threshold:.3f}, cross < same - {margin:.1f}; "
                  f"min share/gap {' '.join(details)})")


# ---------------------------------------------------------------- 7. ESFT vs FFT


def test_criterion_07_esft_vs_fft(seed_runs):
    counts = {"a": 0, "b": 0, "c": 0}
    details = []
    for seed, run in seed_runs.items():
        r = run["results"]
        a = all(r[m]["task_loss"] < r[m]["vanilla_loss"] for m in ("esft_token", "esft_gate"))
        b = all(r[m]["kl"] < r["fft"]["kl"] for m in ("esft_token", "esft_gate"))
        c = r["random"]["task_loss"] > r["esft_token"]["task_loss"]
        counts["a"] += a
        counts["b"] += b
        counts["c"] += c
        details.append(f"s{seed}: loss {r['esft_token']['vanilla_loss']:.2f}->{r['esft_token']['task_loss']:.2f} "
                       f"kl {r['esft_token']['kl']:.3f}/{r['esft_gate']['kl']:.3f} vs fft {r['fft']['kl']:.3f} "
                       f"random {r['random']['task_loss']:.2f}")
    for line in details:
        print(line)
    ok = all(v >= 4 for v in counts.values())
    assert record("7", "ESFT vs FFT directional", ok,
                  f"(a) task loss improves {counts['a']}/5, (b) KL below FFT {counts['b']}/5, "
                  f"(c) random selection worse {counts['c']}/5")


# ---------------------------------------------------------------- 8. trainable fraction


def test_criterion_08_trainable_fraction(demo_run):
    seed_dir, _ = demo_run
    from esftlab.model import load_checkpoint
    from esftlab.selection import load_selection

    model = load_checkpoint(seed_dir / "vanilla.ckpt")
    sel = load_selection(seed_dir / "select" / "selection_math_ft_esft_token.json")
    fractions = []
    for layer, chosen in enumerate(sel.experts):
        routed = [g for g in model.groups if g.kind == ROUTED and g.layer == layer]
        total = sum(model.group_size(g) for g in routed)
        picked = sum(model.group_size(g) for g in routed if g.expert in chosen)
        fractions.append(picked / total)
    rows = [r for r in ex.read_csv(seed_dir / "figures" / "experts_per_layer.csv")
            if r["score_kind"] == "token_selection_ratio"]
    exported = [float(r["routed_fraction"]) for r in sorted(rows, key=lambda r: int(r["layer"]))]
    ok = sel.p == 0.2 and all(f <= 0.5 for f in fractions) and exported == fractions
    assert record("8", "trainable fraction", ok,
                  f"p={sel.p}, selected routed-parameter fraction per layer {fractions} (exported: {exported})")


# ---------------------------------------------------------------- 9. grouping


def perfect_matchings(items):
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for i, partner in enumerate(rest):
        for tail in perfect_matchings(rest[:i] + rest[i + 1:]):
            yield [[first, partner], *tail]


def uniform_similarity(rng, n):
    a = rng.uniform(0, 1, (n, n))
    s = (a + a.T) / 2
    np.fill_diagonal(s, 1.0)
    return s


def poisson_cooccurrence_similarity(rng, n):
    counts = rng.poisson(rng.uniform(0.2, 3.0, (n, n)))
    return cosine_similarity_rows((counts + counts.T).astype(float))


def routed_cooccurrence_similarity(rng, n, tokens=200):
    """Co-occurrence of top-2 choices for tokens routed by random low-rank affinities."""
    centroids = rng.standard_normal((n, 3))
    counts = np.zeros((n, n))
    for _ in range(tokens):
        a, b = np.argsort(-(centroids @ rng.standard_normal(3)), kind="stable")[:2]
        counts[a, b] += 1
        counts[b, a] += 1
    return cosine_similarity_rows(counts)


FAMILIES = (uniform_similarity, poisson_cooccurrence_similarity, routed_cooccurrence_similarity)


def test_criterion_09_grouping_oracle():
    rng = np.random.default_rng(9)
    first_bad = first_cases = 0
    for n in (2, 4, 6, 8):
        pairs = list(itertools.combinations(range(n), 2))
        for family in FAMILIES:
            for _ in range(50):
                sim = family(rng, n)
                best_pair = max(pairs, key=lambda p: (sim[p], -p[0], -p[1]))
                first_bad += tuple(greedy_group(sim, 2)[0]) != best_pair
                first_cases += 1
    bound_bad = bound_cases = 0
    matchings = list(perfect_matchings(list(range(8))))
    for family in (uniform_similarity, routed_cooccurrence_similarity):
        for _ in range(100):
            sim = family(rng, 8)
            opt = max(partition_score(sim, m) for m in matchings)
            rand = np.mean([partition_score(sim, rng.permutation(8).reshape(-1, 2).tolist()) for _ in range(100)])
            score = partition_score(sim, greedy_group(sim, 2))
            bound_bad += not (rand - 1e-12 <= score <= opt + 1e-12)
            bound_cases += 1
    ok = first_bad == 0 and bound_bad == 0
    assert record("9", "grouping oracle", ok,
                  f"first group: {first_cases} matrices n<=8, {first_bad} mismatches; "
                  f"partition bound: {bound_cases} matrices n=8, {bound_bad} violations")


# ---------------------------------------------------------------- 10. runtime


def test_criterion_10_demo_runtime(demo_run):
    seed_dir, seconds = demo_run
    summary = json.loads((seed_dir / "train" / "math_ft" / "summary.json").read_text())
    ok = seconds < DEMO_BUDGET_SECONDS and set(summary["methods"]) == {"fft", "lora", "esft_token", "esft_gate"}
    assert record("10a", "demo manifest runtime", ok,
                  f"{seconds:.1f}s for pretrain + probe + 4 methods x 1 task (budget {DEMO_BUDGET_SECONDS:.0f}s)")
