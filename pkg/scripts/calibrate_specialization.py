"""Baseline runs for the specialization check; writes configs/specialization_baseline.json.

Pretrains the demo model on held-out seeds (not the ones the acceptance test
uses), measures per-task concentration and overlap separation, and derives
the thresholds the acceptance test reads: halfway between the chance level
and the worst baseline value.
"""

import argparse
import json
import time
from pathlib import Path

from esftlab import experiment as ex

ROOT = Path(__file__).resolve().parents[1]


def measure(man: ex.ExperimentManifest, seed: int) -> ex.Specialization:
    cfg = man.model_config(seed)
    corpora = ex.gen_tasks(ex.seeded_specs(man.pretrain_tasks, seed), cfg.vocab_size)
    model = ex.pretrain_model(cfg, [c.split(0.9, seed)[0] for c in corpora.values()], man.pretrain, seed)
    halves = ex.probe_halves(model, corpora, man.probe.selection_samples, man.probe.selection_seq_len, seed)
    return ex.specialization(halves, man.probe.overlap_top_k, man.probe.ranking_policy)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--manifest", default=str(ROOT / "configs" / "demo.json"))
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(100, 110)))
    ap.add_argument("--out", default=str(ROOT / "configs" / "specialization_baseline.json"))
    args = ap.parse_args()
    man = ex.ExperimentManifest.load(args.manifest)
    runs = []
    for seed in args.seeds:
        t0 = time.time()
        spec = measure(man, seed)
        runs.append({"seed": seed, **ex.dataclasses.asdict(spec)})
        print(f"seed {seed} ({time.time() - t0:.1f}s): share {[round(s, 3) for s in spec.top_quarter_share]} "
              f"same {spec.same_task_overlap} cross {spec.max_cross_task_overlap}")
    worst_share = min(min(r["top_quarter_share"]) for r in runs)
    worst_gap = min(s - c for r in runs for s, c in zip(r["same_task_overlap"], r["max_cross_task_overlap"]))
    out = {
        "schema_version": 1,
        "kind": "specialization_baseline",
        "manifest": Path(args.manifest).name,
        "top_k": man.probe.overlap_top_k,
        "worst_top_quarter_share": worst_share,
        "worst_overlap_gap": worst_gap,
        "share_threshold": max(0.25, 0.25 + 0.5 * (worst_share - 0.25)),
        "overlap_margin": max(0.0, 0.5 * worst_gap),
        "runs": runs,
    }
    Path(args.out).write_text(json.dumps(out, indent=2) + "\n")
    print(json.dumps({k: v for k, v in out.items() if k != "runs"}, indent=2))


if __name__ == "__main__":
    main()
