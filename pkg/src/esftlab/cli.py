"""esftlab command line: corpus generation, probing, selection, fine-tuning, export."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from esftlab import experiment as ex
from esftlab.model import MoEModelConfig, load_checkpoint, save_checkpoint
from esftlab.probe import RoutingLog, collect_routing, overlap_vs_samplesize
from esftlab.selection import (
    build_train_mask,
    load_selection,
    relevance,
    save_selection,
    select_experts,
)
from esftlab.tasks import Corpus, TaskSpec, gen_tasks, ingest
from esftlab.trainer import (
    LARGE_SCALE,
    METHODS,
    evaluate_forgetting,
    windows,
)

SCORES = {"token": "token_selection_ratio", "gate": "average_gate"}


def _out_dir(path: str) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_gen(args) -> None:
    specs = [TaskSpec.from_dict(d) for d in json.loads(Path(args.spec).read_text())]
    out = _out_dir(args.out)
    for name, corpus in gen_tasks(specs, args.vocab_size).items():
        corpus.save(out / f"{name}.jsonl")
        print(f"{name}: {len(corpus)} documents, {corpus.token_count} tokens")


def cmd_ingest(args) -> None:
    corpus = ingest(args.path, args.format, args.tokenizer, args.vocab_size, args.label)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    corpus.save(args.out)
    print(f"{len(corpus)} documents, {corpus.token_count} tokens, vocab {corpus.vocab_size}")


def cmd_pretrain(args) -> None:
    cfg = MoEModelConfig.from_dict({**json.loads(Path(args.config).read_text()), "seed": args.seed})
    corpora = [Corpus.load(p) for p in args.corpus]
    settings = ex.PretrainSettings(args.steps, args.batch_size, args.seq_len, args.lr)
    model = ex.pretrain_model(cfg, corpora, settings, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, args.out)


def cmd_probe(args) -> None:
    model = load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    logs = {}
    for path in args.corpus:
        corpus = Corpus.load(path)
        a, b = corpus.split(0.5, args.seed)
        logs[corpus.task_label] = (collect_routing(model, a), collect_routing(model, b))
        full = collect_routing(model, corpus)
        full.save(out / f"routing_{corpus.task_label}.jsonl")
        ex.export_gate_distribution(full, out / f"gate_distribution_{corpus.task_label}.csv")
    k = min(args.top_k, model.config.n_routed_experts)
    ex._write_json(out / "overlap_heatmap.json", "overlap_heatmap", ex.overlap_heatmap(logs, k))


def cmd_select(args) -> None:
    log = RoutingLog.load(args.log)
    sel = select_experts(relevance(log, SCORES[args.score]), args.p)
    mask = build_train_mask(load_checkpoint(args.checkpoint), sel) if args.checkpoint else None
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_selection(sel, args.out, mask)
    print("experts per layer:", sel.counts)


def cmd_train(args) -> None:
    vanilla = load_checkpoint(args.checkpoint)
    task = Corpus.load(args.task)
    align = Corpus.load(args.alignment) if args.alignment else None
    settings = ex.TrainSettings(max_steps=args.steps, batch_size=args.batch_size, seq_len=args.seq_len,
                                eval_every=args.eval_every, mix_alignment=align is not None and not args.no_mix,
                                lora_rank=args.lora_rank, lora_scaling=args.lora_scaling)
    if args.lr is not None:
        settings.learning_rate[args.method] = args.lr
    sel = load_selection(args.selection) if args.selection else None
    task_train, task_test = task.split(0.8, args.seed)
    evals = {"task": windows(task_test, args.seq_len, settings.eval_windows)}
    if align is not None:
        evals["alignment"] = evals["general"] = windows(align, args.seq_len, settings.eval_windows)
    model, report = ex.finetune(vanilla, args.method, task_train, align, settings, args.seed, evals, sel)
    out = _out_dir(args.out)
    report.save(out / "report.jsonl")
    save_checkpoint(model, out / "model.ckpt")
    print(json.dumps(report.final))


def cmd_eval(args) -> None:
    before, after = load_checkpoint(args.before), load_checkpoint(args.after)
    f = evaluate_forgetting(before, after, Corpus.load(args.probe), args.seq_len)
    print(json.dumps({"mean_kl": f.kl, "loss_before": f.loss_before, "loss_after": f.loss_after,
                      "delta_loss": f.delta_loss}))


def cmd_export(args) -> None:
    for p in ex.export_figure_data(args.kind, args.run_dir, args.out):
        print(p)


def cmd_sweep(args) -> None:
    model = load_checkpoint(args.checkpoint)
    out = _out_dir(args.out)
    if args.kind == "p":
        log = RoutingLog.load(args.log)
        rows = ex.tradeoff_rows(log.task_label, model, log, args.values or ex.P_SWEEP)
        ex._write_csv(out / "tradeoff_curve.csv", "tradeoff_curve",
                      ["task", "score_kind", "p", "mean_experts_per_layer", "trainable_param_count"], rows)
    else:
        corpus = Corpus.load(args.corpus)
        sizes = [int(v) for v in args.values] if args.values else [64, 256, 1024]
        curve = overlap_vs_samplesize(model, corpus, sizes, args.top_k, seed=args.seed)
        ex._write_json(out / "overlap_vs_samplesize.json", "overlap_vs_samplesize",
                       {"top_k": args.top_k, "curves": {corpus.task_label: {str(k): v for k, v in curve.items()}}})


def cmd_run(args) -> None:
    man = ex.ExperimentManifest.load(args.manifest)
    if args.output_dir:
        man.output_dir = str(Path(args.output_dir).resolve())
    print(ex.run_experiment(man))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="esftlab", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate synthetic task corpora from a JSON list of task specs")
    p.add_argument("--spec", required=True)
    p.add_argument("--vocab-size", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("ingest", help="tokenize a jsonl or plain-text file into a corpus file")
    p.add_argument("path")
    p.add_argument("--format", choices=("jsonl", "text"), default="jsonl")
    p.add_argument("--tokenizer", choices=("byte", "whitespace"), default="byte")
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--label", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("pretrain", help="train a vanilla multitask model")
    p.add_argument("--config", required=True, help="model config JSON")
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="routing logs, gate distributions and overlap heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", nargs="+", required=True)
    p.add_argument("--top-k", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("select", help="relevance scores and threshold expert selection")
    p.add_argument("--log", required=True)
    p.add_argument("--score", choices=tuple(SCORES), default="token")
    p.add_argument("--p", type=float, default=LARGE_SCALE["p"]["esft_token"])
    p.add_argument("--checkpoint", help="model checkpoint, to report the trainable parameter count")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("train", help="fine-tune with one method")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--alignment", help="alignment corpus, mixed 1:1 and used as the general probe")
    p.add_argument("--no-mix", action="store_true")
    p.add_argument("--selection", help="selection JSON (esft methods)")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--seq-len", type=int, default=32)
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lora-rank", type=int, default=LARGE_SCALE["lora_rank"])
    p.add_argument("--lora-scaling", type=float, default=LARGE_SCALE["lora_scaling"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="forgetting: mean KL and loss change on a probe corpus")
    p.add_argument("--before", required=True)
    p.add_argument("--after", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--seq-len", type=int, default=32)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="write one figure's data files from a seed run directory")
    p.add_argument("--kind", choices=ex.FIGURE_KINDS, required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("sweep", help="p-sweep of trainable counts, or overlap vs sample size")
    p.add_argument("--kind", choices=("p", "overlap"), required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log", help="routing log (p sweep)")
    p.add_argument("--corpus", help="corpus (overlap sweep)")
    p.add_argument("--values", type=float, nargs="*")
    p.add_argument("--top-k", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("run", help="run an experiment manifest end to end")
    p.add_argument("manifest")
    p.add_argument("--output-dir", default=None)
    p.set_defaults(func=cmd_run)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"esftlab {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
