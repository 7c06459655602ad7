"""Command-line entry point: gen, train, eval, ablate, gradcheck, report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from .checkpoint import CheckpointError, sha256_file
from .config import (ConfigError, PhaseTimer, RunManifest, load_config,
                     verify_manifest, write_manifest)
from .world import CorpusError, WorldConfig, build_corpus, export_jsonl, load_corpus, save_corpus

_ERRORS = (ConfigError, CorpusError, CheckpointError, ValueError, OSError)


def _parse_seed_range(text: str) -> range:
    try:
        lo, hi = text.split("..", 1)
        return range(int(lo), int(hi))
    except ValueError as exc:
        raise ConfigError(f"expected a seed range like 0..64, got {text!r}") from exc


def _cmd_gen(args) -> int:
    cfg = WorldConfig(n_agents=args.agents)
    val = _parse_seed_range(args.val_seeds) if args.val_seeds else []
    corpus = build_corpus(_parse_seed_range(args.seeds), val, cfg)
    save_corpus(corpus, args.out)
    if args.jsonl:
        export_jsonl(corpus, args.jsonl)
    n_train = len(corpus.split("train"))
    n_val = len(corpus.split("val"))
    print(f"wrote {args.out}: {n_train} train / {n_val} val scenes, "
          f"{args.agents} agents each")
    return 0


def _load_train_inputs(args):
    tcfg = load_config(args.config)
    if args.seed is not None:
        tcfg.seed = args.seed
    corpus = load_corpus(args.corpus)
    return tcfg, corpus


def _cmd_train(args) -> int:
    from .train import train_to_dir

    tcfg, corpus = _load_train_inputs(args)
    out_dir = Path(args.out)
    timer = PhaseTimer()
    with timer.time("train"):
        model, reports = train_to_dir(corpus, tcfg, out_dir)
    manifest = RunManifest(
        config=tcfg.to_dict(),
        corpus_sha256=sha256_file(args.corpus),
        checkpoints={"checkpoint.bin": sha256_file(out_dir / "checkpoint.bin")},
        version=__version__,
        timings=timer.timings,
    )
    write_manifest(out_dir / "manifest.json", manifest)
    if reports:
        last = reports[-1]
        print(f"trained {len(reports)} steps: task {last.task:.4f} lm {last.lm:.4f} "
              f"total {last.total:.4f}")
    else:
        print("trained 0 steps: checkpoint equals initialization")
    print(f"wrote {out_dir / 'checkpoint.bin'}")
    return 0


def _cmd_eval(args) -> int:
    from .evaluate import evaluate
    from .model import ModelConfig, load_model

    corpus = load_corpus(args.corpus)
    model = load_model(ModelConfig(world=corpus.world), args.ckpt)
    report = evaluate(model, corpus, split=args.split, bank_seed=args.seed or 0)
    Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    print(f"wrote {args.out}: collision avg {report.collision_rate['avg']:.4f} "
          f"bleu4 {report.bleu4:.4f} qa {report.qa_acc['All']:.4f} "
          f"consistency {report.consistency:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    from .train import ablate

    tcfg, corpus = _load_train_inputs(args)
    out_dir = Path(args.out)
    timer = PhaseTimer()
    with timer.time("ablate"):
        comparison = ablate(corpus, tcfg, out_dir)
    manifest = RunManifest(
        config=tcfg.to_dict(),
        corpus_sha256=sha256_file(args.corpus),
        checkpoints={f"{arm}/checkpoint.bin": sha256_file(out_dir / arm / "checkpoint.bin")
                     for arm in ("align", "noalign")},
        version=__version__,
        timings=timer.timings,
    )
    write_manifest(out_dir / "manifest.json", manifest)
    for arm in ("align", "noalign"):
        consistency = comparison["metrics"][arm]["eval"]["consistency"]
        print(f"{arm}: consistency {consistency:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    checks, elapsed = run_suite(seed=args.seed or 0)
    failed = False
    for check in checks:
        status = "ok" if check.ok else "FAIL"
        print(f"{check.loss:<12} configs={check.configs} coords={check.coords} "
              f"max_rel_err={check.max_rel_err:.3e} [{status}]")
        failed = failed or not check.ok
    print(f"suite finished in {elapsed:.1f}s")
    return 1 if failed else 0


def _metric_rows(report: dict) -> list[tuple[str, float]]:
    rows = [(f"collision {k}", v) for k, v in sorted(report["collision_rate"].items())]
    rows.append(("bleu4", report["bleu4"]))
    rows += [(f"qa {k}", v) for k, v in sorted(report["qa_acc"].items())]
    rows.append(("consistency", report["consistency"]))
    return rows


def _render_single(path: Path, report: dict) -> list[str]:
    lines = [f"## {path}", "", "| metric | value |", "| --- | --- |"]
    for name, value in _metric_rows(report):
        lines.append(f"| {name} | {value:.6f} |")
    lines += ["", f"scenes: {report['n_scenes']}", ""]
    return lines


def _render_ablation(path: Path, comparison: dict) -> list[str]:
    metrics = comparison["metrics"]
    lines = [f"## ablation: {path}", "",
             "| metric | align | noalign | delta |", "| --- | --- | --- | --- |"]
    align_rows = dict(_metric_rows(metrics["align"]["eval"]))
    noalign_rows = dict(_metric_rows(metrics["noalign"]["eval"]))
    for name in align_rows:
        a, n = align_rows[name], noalign_rows[name]
        lines.append(f"| {name} | {a:.6f} | {n:.6f} | {a - n:+.6f} |")
    lines.append("")
    return lines


def _cmd_report(args) -> int:
    lines = ["# alnp3 evaluation report", ""]
    for raw in args.inputs:
        path = Path(raw)
        if path.is_dir():
            if (path / "manifest.json").exists():
                verify_manifest(path)
            ablation = path / "ablation.json"
            if ablation.exists():
                lines += _render_ablation(path, json.loads(ablation.read_text()))
                continue
            report = path / "report.json"
            if not report.exists():
                raise ConfigError(f"{path}: no ablation.json or report.json found")
            lines += _render_single(path, json.loads(report.read_text()))
        else:
            lines += _render_single(path, json.loads(path.read_text()))
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alnp3",
        description="Desk-scale fast/slow driving stack with cross-modal "
                    "alignment training, evaluation, and gradient checking.")
    parser.add_argument("--version", action="version", version=f"alnp3 {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic corpus")
    gen.add_argument("--seeds", required=True, help="train seed range, e.g. 0..64")
    gen.add_argument("--agents", type=int, default=4)
    gen.add_argument("--out", required=True)
    gen.add_argument("--val-seeds", default=None, help="held-out seed range")
    gen.add_argument("--jsonl", default=None, help="also write a JSON-lines mirror")
    gen.add_argument("--seed", type=int, default=None,
                     help="unused; scenes are keyed by the seed range")
    gen.set_defaults(fn=_cmd_gen)

    tr = sub.add_parser("train", help="run co-distillation training")
    tr.add_argument("--config", required=True)
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=None, help="override config seed")
    tr.set_defaults(fn=_cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--split", default="val", choices=("train", "val"))
    ev.add_argument("--seed", type=int, default=None,
                    help="bank seed for probing checkpoints without alignment")
    ev.set_defaults(fn=_cmd_eval)

    ab = sub.add_parser("ablate", help="train alignment on/off arms and compare")
    ab.add_argument("--config", required=True)
    ab.add_argument("--corpus", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--seed", type=int, default=None, help="override config seed")
    ab.set_defaults(fn=_cmd_ablate)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(fn=_cmd_gradcheck)

    rp = sub.add_parser("report", help="render reports/ablations to markdown")
    rp.add_argument("inputs", nargs="+",
                    help="report.json files, run dirs, or ablation dirs")
    rp.add_argument("--out", required=True)
    rp.add_argument("--seed", type=int, default=None, help="unused")
    rp.set_defaults(fn=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
