"""Run the demo manifest end to end and print the per-method comparison."""

import argparse
import json
import time
from pathlib import Path

from esftlab import experiment as ex

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--manifest", default=str(ROOT / "configs" / "demo.json"))
    ap.add_argument("--output-dir", default=None, help="override the manifest's output_dir")
    args = ap.parse_args()
    man = ex.ExperimentManifest.load(args.manifest)
    if args.output_dir:
        man.output_dir = str(Path(args.output_dir).resolve())
    t0 = time.perf_counter()
    out = ex.run_experiment(man)
    print(f"finished in {time.perf_counter() - t0:.1f}s; outputs under {out}")
    for summary in sorted(out.glob("seed_*/train/*/summary.json")):
        data = json.loads(summary.read_text())
        print(f"\n{summary.parent.parent.parent.name} task {data['task']} "
              f"(vanilla task loss {data['vanilla']['task_loss']:.3f})")
        print(f"{'method':<12}{'trainable':>11}{'task loss':>11}{'align loss':>12}{'forget KL':>11}")
        for method, m in data["methods"].items():
            print(f"{method:<12}{m['trainable_param_count']:>11}{m['task_loss']:>11.3f}"
                  f"{m['alignment_loss']:>12.3f}{m['forgetting_kl']:>11.4f}")


if __name__ == "__main__":
    main()
