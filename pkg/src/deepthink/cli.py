"""Command-line entry point: ``deepthink <command> ...``.

Every artifact-producing command writes ``manifest.json`` next to its
outputs; ``deepthink replay`` re-runs a manifest and checks the outputs.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shlex
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import analysis, evaluation, mazes, models, records, training

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "DEEPTHINK_OUTPUT_ROOT"
MANIFEST = "manifest.json"

log = logging.getLogger("deepthink")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def resolve_out(raw: str) -> Path:
    """Relative output paths land under the output-root override when it is set."""
    path = Path(raw)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def prepare_out(out: Path, names: Sequence[str], force: bool) -> None:
    clash = [n for n in list(names) + [MANIFEST] if (out / n).exists()]
    if clash and not force:
        raise UsageError(f"refusing to overwrite {', '.join(str(out / n) for n in clash)}; pass --force")
    out.mkdir(parents=True, exist_ok=True)


def write_manifest(out: Path, argv: Sequence[str], outputs: Sequence[str], *, config: str = "",
                   seeds: Optional[dict] = None, inputs: Sequence = (), checkpoint=None) -> Path:
    manifest = {
        "tool": "deepthink",
        "version": __version__,
        "argv": list(argv),
        "command_line": shlex.join(["deepthink", *argv]),
        "config": config,
        "seeds": seeds or {},
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "checkpoint": {str(checkpoint): sha256_file(checkpoint)} if checkpoint else {},
        "outputs": {name: sha256_file(out / name) for name in outputs},
    }
    path = out / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def parse_size(token: str) -> tuple[str, int]:
    if token in mazes.PRESETS:
        return token, mazes.PRESETS[token]
    if token.startswith("custom:"):
        try:
            n = int(token.split(":", 1)[1])
        except ValueError:
            n = 0
        if n >= 1:
            return f"custom{n}", n
    raise UsageError(
        f"bad --size {token!r}; expected one of {', '.join(mazes.PRESETS)} or custom:<n> with n >= 1"
    )


def parse_budgets(text: str) -> list[int]:
    out = []
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = (int(x) for x in part.split("-", 1))
                out.extend(range(lo, hi + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise UsageError(f"bad budget list {text!r}; use e.g. 1-30 or 6,8,10") from None
    if not out or min(out) < 1:
        raise UsageError(f"bad budget list {text!r}; budgets must be positive")
    return sorted(set(out))


def parse_named_data(items: Sequence[str]) -> dict[str, Path]:
    named = {}
    for item in items:
        name, _, path = item.rpartition("=")
        named[name or Path(path).stem] = Path(path)
    return named


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, argv) -> int:
    label, n = parse_size(args.size)
    if args.count is None and label not in mazes.PRESETS:
        raise UsageError("custom sizes need --count")
    out = resolve_out(args.out)
    if args.count is None:
        names = [f"{label}_train.dtmz", f"{label}_test.dtmz"]
        prepare_out(out, names, args.force)
        parts = mazes.build_preset(label, args.seed)
    else:
        if args.count < 1:
            raise UsageError("--count must be at least 1")
        names = [f"{label}.dtmz"]
        prepare_out(out, names, args.force)
        parts = (mazes.build_dataset(n, args.count, args.seed),)
    for name, ds in zip(names, parts):
        mazes.write_dataset(ds, out / name)
        print(f"wrote {len(ds)} mazes (n={n}) to {out / name}")
    write_manifest(out, argv, names, seeds={"maze": args.seed})
    return EXIT_OK


def _load_model_and_config(args) -> tuple[models.Model, training.TrainConfig, str]:
    text = Path(args.config).read_text(encoding="utf-8")
    config, model_kw = training.parse_config_text(text)
    spec = models.ModelSpec.from_text("\n".join(f"{k}={v}" for k, v in model_kw.items()))
    return models.build_model(spec, config.seed), config, text


def cmd_train(args, argv) -> int:
    out = resolve_out(args.out)
    names = ["model.dtck", "history.csv"]
    model, config, text = _load_model_and_config(args)
    data = mazes.read_dataset(args.data) if args.format == "maze" else records.ingest_classification(args.data)
    prepare_out(out, names, args.force)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    report = training.train(model, data, config, checkpoint_path=out / "model.dtck")
    with open(out / "history.csv", "w") as fh:
        fh.write("epoch,loss,train_accuracy\n")
        for e, (l, a) in enumerate(zip(report.losses, report.train_accuracy), 1):
            fh.write(f"{e},{l:.8f},{a:.6f}\n")
    if report.final_train_accuracy is not None:
        print(f"final train accuracy {report.final_train_accuracy:.4f}")
    write_manifest(out, argv, names, config=text, seeds={"train": config.seed},
                   inputs=[args.data, args.config], checkpoint=out / "model.dtck")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    out = resolve_out(args.out)
    names = ["eval.csv", "exits.csv"]
    model = models.load_checkpoint(args.checkpoint)
    ds = mazes.read_dataset(args.data)
    n = model.spec.iterations
    budget = args.budget or (n + 2 if model.recurrent else n)
    try:
        rule = evaluation.ExitRule(args.rule, args.train_iters or n, budget)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    prepare_out(out, names, args.force)
    rep = evaluation.evaluate(model, ds, rule)
    evaluation.write_rows_csv([rep.row(Path(args.data).stem)], out / "eval.csv")
    evaluation.write_histogram_csv(rep.exit_histogram, out / "exits.csv")
    print(f"{rule.kind} budget {budget}: accuracy {rep.accuracy:.4f} +/- {rep.stderr:.4f} "
          f"over {rep.n_samples} mazes")
    write_manifest(out, argv, names, inputs=[args.data], checkpoint=args.checkpoint)
    return EXIT_OK


def cmd_sweep(args, argv) -> int:
    out = resolve_out(args.out)
    names = ["sweep.csv"]
    model = models.load_checkpoint(args.checkpoint)
    named = parse_named_data(args.data)
    budgets = parse_budgets(args.budgets)
    rules = args.rules.split(",") if args.rules else list(evaluation.SWEEP_RULES)
    unknown = [r for r in rules if r not in evaluation.SWEEP_RULES]
    if unknown:
        raise UsageError(f"unknown rule(s) {unknown}; expected {', '.join(evaluation.SWEEP_RULES)}")
    datasets = {name: mazes.read_dataset(p) for name, p in named.items()}
    prepare_out(out, names, args.force)
    rows = evaluation.sweep(model, datasets, budgets, rules, train_iters=args.train_iters)
    evaluation.write_rows_csv(rows, out / "sweep.csv")
    print(f"wrote {len(rows)} rows to {out / 'sweep.csv'}")
    write_manifest(out, argv, names, inputs=list(named.values()), checkpoint=args.checkpoint)
    return EXIT_OK


def cmd_analyze(args, argv) -> int:
    out = resolve_out(args.out)
    model = models.load_checkpoint(args.checkpoint)
    ds = mazes.read_dataset(args.data)
    iters = args.iters or model.spec.iterations
    if args.kind == "reuse":
        names = ["reuse_histogram.csv", "reuse.json"]
        idx = np.arange(min(args.count, len(ds)))
        prepare_out(out, names, args.force)
        res = analysis.activation_reuse(model, ds.inputs(idx), iters, args.threshold)
        analysis.write_reuse_histogram_csv(res, out / "reuse_histogram.csv")
        (out / "reuse.json").write_text(json.dumps(
            {"threshold": args.threshold, "reuse_fraction": res.fraction, "images": len(idx),
             "iterations": iters, "active_pairs": int(res.matrix.active.sum())}, indent=2) + "\n")
        print(f"reuse fraction at threshold {args.threshold}: {res.fraction:.4f}")
    else:
        if not 0 <= args.index < len(ds):
            raise UsageError(f"--index {args.index} outside dataset of {len(ds)} mazes")
        names = [f"iter_{t:03d}.{args.format}" for t in range(1, iters + 1)]
        names += [f"input.{args.format}", f"target.{args.format}"]
        prepare_out(out, names, args.force)
        analysis.render_thoughts(model, ds[args.index], iters, out, fmt=args.format)
        print(f"wrote {len(names)} images to {out}")
    write_manifest(out, argv, names, inputs=[args.data], checkpoint=args.checkpoint)
    return EXIT_OK


def cmd_ingest(args, argv) -> int:
    out = resolve_out(args.out)
    names = ["records.bin", "labels.csv"]
    ds = records.ingest_classification(args.input, args.format)
    prepare_out(out, names, args.force)
    records.write_records(ds, out / "records.bin")
    counts = np.bincount(ds.labels, minlength=10)
    with open(out / "labels.csv", "w") as fh:
        fh.write("label,count\n")
        for k, c in enumerate(counts):
            fh.write(f"{k},{c}\n")
    print(f"ingested {len(ds)} records from {args.input}")
    write_manifest(out, argv, names, inputs=[args.input])
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    src = Path(args.manifest)
    manifest = json.loads(src.read_text())
    old = list(manifest["argv"])
    if args.out:
        for i, tok in enumerate(old):
            if tok == "--out" and i + 1 < len(old):
                old[i + 1] = args.out
    new_out = None
    for i, tok in enumerate(old):
        if tok == "--out":
            new_out = resolve_out(old[i + 1])
    if "--force" not in old:
        old.append("--force")
    code = main(old)
    if code != EXIT_OK:
        return code
    mismatched = [
        name for name, digest in manifest["outputs"].items()
        if sha256_file(new_out / name) != digest
    ]
    if mismatched:
        print(f"replay differs in {', '.join(mismatched)}", file=sys.stderr)
        return EXIT_DATA
    print(f"replay reproduced {len(manifest['outputs'])} output(s) bit-identically")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deepthink", description="Recurrent maze solvers: data, training, evaluation.")
    p.add_argument("--version", action="version", version=f"deepthink {__version__}")
    p.add_argument("--threads", type=int, default=None, help="cap numeric worker threads")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="generate maze datasets")
    g.add_argument("--size", required=True, help="small|medium|large|custom:<n>")
    g.add_argument("--count", type=int, default=None, help="write one file with this many mazes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model from a key=value config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--format", choices=("maze", "cifar_binary"), default="maze")
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="exact-match accuracy under one exit rule")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--rule", choices=evaluation.RULES, default="baseline")
    e.add_argument("--budget", type=int, default=None, help="iteration cap (default: trained n + 2)")
    e.add_argument("--train-iters", type=int, default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="accuracy table over datasets, rules and budgets")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True, nargs="+", help="dataset files, optionally name=path")
    s.add_argument("--budgets", default="1-30")
    s.add_argument("--rules", default=None, help="comma list (default: all rules plus last)")
    s.add_argument("--train-iters", type=int, default=None)
    s.add_argument("--out", required=True)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", help="filter reuse or thought renderings")
    a.add_argument("kind", choices=("reuse", "thoughts"))
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--iters", type=int, default=None)
    a.add_argument("--threshold", type=float, default=analysis.DEFAULT_THRESHOLD)
    a.add_argument("--count", type=int, default=8, help="images for reuse statistics")
    a.add_argument("--index", type=int, default=0, help="maze to render")
    a.add_argument("--format", choices=tuple(analysis.IMAGE_FORMATS), default="ppm")
    a.add_argument("--out", required=True)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_analyze)

    i = sub.add_parser("ingest", help="parse a binary classification record file")
    i.add_argument("--input", required=True)
    i.add_argument("--format", choices=records.FORMATS, default="cifar_binary")
    i.add_argument("--out", required=True)
    i.add_argument("--force", action="store_true")
    i.set_defaults(func=cmd_ingest)

    r = sub.add_parser("replay", help="re-run a manifest and verify its outputs")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", default=None, help="write the replay somewhere else")
    r.set_defaults(func=cmd_replay)
    return p


def _thread_limit(n: Optional[int]):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be positive")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        # the manifest records the command without the global thread cap
        sub_argv = argv[argv.index(args.command):]
        with _thread_limit(args.threads):
            return args.func(args, sub_argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
