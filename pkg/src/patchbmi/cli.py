"""Command line entry point: ``patchbmi <subcommand>``.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .bench import measure_latency
from .data import (ManifestError, load_samples, prepare, read_manifest, split_dataset,
                   write_rejections)
from .ensemble import BundleError, EnsembleModel, load_bundle, predict_bmi, save_bundle
from .evaluation import (EvaluationAborted, cross_evaluate, cross_table, evaluate,
                         region_table, reports_csv, split_table)
from .imaging import Image, ImageFormatError, read_image, write_image
from .landmarks import (DEFAULT_RULES, REGIONS, DegenerateROIError, LandmarkParseError,
                        extract_all_patches, load_rules, read_landmarks)
from .training import TrainConfig, train_ensemble, usable_samples, write_history

log = logging.getLogger("patchbmi")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class InvalidInput(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(args, payload: dict, text: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2))
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        env = os.environ.get("PATCHBMI_THREADS", "1")
        try:
            n = int(env)
        except ValueError:
            raise InvalidInput(f"PATCHBMI_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise InvalidInput(f"thread count must be >= 1, got {n}")
    return n


def _rules(args):
    return load_rules(args.rules) if getattr(args, "rules", None) else DEFAULT_RULES


def _manifest(path):
    try:
        return read_manifest(path)
    except FileNotFoundError:
        raise InvalidInput(f"manifest not found: {path}") from None
    except ManifestError as exc:
        raise InvalidInput(str(exc)) from None


def _image_and_landmarks(args):
    try:
        return read_image(args.image), read_landmarks(args.landmarks)
    except FileNotFoundError as exc:
        raise InvalidInput(f"file not found: {exc.filename}") from None
    except (ImageFormatError, LandmarkParseError) as exc:
        raise InvalidInput(str(exc)) from None


def _model(path) -> EnsembleModel:
    try:
        return load_bundle(path)
    except BundleError as exc:
        raise InvalidInput(str(exc)) from None


# ------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch, patience=args.patience,
                      max_epochs=args.max_epochs, seed=args.seed, augment=not args.no_augment)
    rules = _rules(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(args.manifest)
    rejected = list(manifest.rejections)
    if args.val_manifest:
        val_manifest = _manifest(args.val_manifest)
        rejected += val_manifest.rejections
        train_recs = manifest.split("train") or manifest.records
        val_recs = val_manifest.split("val") or val_manifest.records
        val_base = val_manifest.base_dir
    else:
        train_recs, val_recs, _ = split_dataset(manifest.records, seed=args.seed)
        val_base = manifest.base_dir
    if rejected:
        report = out / "rejections.csv"
        write_rejections(rejected, report)
        log.warning("%d manifest rows rejected, see %s", len(rejected), report)
    train, fail_t = load_samples(train_recs, manifest.base_dir)
    val, fail_v = load_samples(val_recs, val_base)
    train, drop_t = usable_samples(train, rules)
    val, drop_v = usable_samples(val, rules)
    skipped = len(fail_t) + len(fail_v) + len(drop_t) + len(drop_v)
    if not train or not val:
        where = f" (rejection report: {out / 'rejections.csv'})" if rejected else ""
        raise InvalidInput(f"need non-empty training and validation sets, got "
                           f"{len(train)} / {len(val)} usable samples{where}")
    results = train_ensemble(train, val, cfg, rules, threads=_threads(args))
    provenance = {
        "seed": args.seed,
        "train_config": cfg.to_dict(),
        "n_train": len(train),
        "n_val": len(val),
        "n_skipped": skipped,
        "regions": {r: res.summary() for r, res in zip(REGIONS, results)},
        "version": __version__,
    }
    model = EnsembleModel([r.params for r in results], rules, provenance=provenance)
    save_bundle(model, out)
    for region, res in zip(REGIONS, results):
        write_history(res.history, out / f"history_{region}.csv")
    payload = {"bundle": str(out), "param_count": model.parameter_count(), **provenance}
    text = "\n".join([f"bundle written to {out}",
                      f"parameters {model.parameter_count():,}",
                      *(f"{r:12s} epochs {s['epochs_run']:3d}  best val mse {s['best_val_mse']:.4f}"
                        for r, s in provenance["regions"].items())])
    _emit(args, payload, text)
    return EXIT_OK


def cmd_predict(args) -> int:
    model = _model(args.model)
    img, lm = _image_and_landmarks(args)
    pred = predict_bmi(model, img, lm)
    text = f"bmi={pred.bmi:.3f}"
    _emit(args, pred.to_dict(), text)
    return EXIT_OK


def _report_out(args, reports, text):
    if args.csv:
        Path(args.csv).write_text(reports_csv(reports), encoding="utf-8")
    payload = {"reports": [r.to_dict() for r in reports]}
    _emit(args, payload, text)


def cmd_evaluate(args) -> int:
    model = _model(args.model)
    manifest = _manifest(args.manifest)
    splits = args.split or ([s for s in ("train", "val", "test") if manifest.split(s)] or [None])
    reports = [evaluate(model, manifest, s, dataset=args.dataset) for s in splits]
    size = f"{model.parameter_count() / 1e6:.1f}M"
    _report_out(args, reports, split_table(reports, size) + "\n" + region_table(reports))
    return EXIT_OK


def cmd_cross_evaluate(args) -> int:
    model = _model(args.model)
    manifests = {}
    for item in args.manifest:
        label, sep, path = item.partition("=")
        if not sep or not label or not path:
            raise InvalidInput(f"--manifest expects LABEL=PATH, got {item!r}")
        manifests[label] = _manifest(path)
    reports = cross_evaluate(model, manifests, args.split)
    _report_out(args, reports, cross_table(reports) + "\n" + region_table(reports))
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.iterations < 1:
        raise InvalidInput(f"--iterations must be >= 1, got {args.iterations}")
    if args.warmup < 0:
        raise InvalidInput(f"--warmup must be >= 0, got {args.warmup}")
    model = _model(args.model)
    img, lm = _image_and_landmarks(args)
    raw = Path(args.image).read_bytes()
    modes = {"serial": False, "parallel": True} if args.heads == "both" else \
        {args.heads: args.heads == "parallel"}
    reports = {name: measure_latency(model, img, lm, args.iterations, args.warmup,
                                     parallel_heads=flag, image_bytes=raw)
               for name, flag in modes.items()}
    payload = {name: r.to_dict() for name, r in reports.items()}
    text = "\n".join(f"[{name} heads]\n{r.text()}" for name, r in reports.items())
    _emit(args, payload, text)
    return EXIT_OK


def cmd_extract_patches(args) -> int:
    img, lm = _image_and_landmarks(args)
    rules = _rules(args)
    pimg, plm = prepare(img, lm)
    patches = extract_all_patches(pimg, plm, rules)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for (region, patch), box in zip(patches.items(), patches.boxes):
        px = np.clip(np.floor(patch.data[0] * 255.0 + 0.5), 0, 255).astype(np.uint8)
        path = out / f"{region}.pgm"
        write_image(Image(px), path)
        files[region] = {"file": str(path), "box": list(box)}
    text = "\n".join(f"{r:12s} box={tuple(v['box'])} -> {v['file']}" for r, v in files.items())
    _emit(args, {"patches": files}, text)
    return EXIT_OK


# --------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="patchbmi", description="Facial-patch ensemble BMI regression.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker threads (falls back to PATCHBMI_THREADS, then 1)")
        sp.add_argument("-v", "--verbose", action="store_true")

    t = sub.add_parser("train", help="train the six region models")
    t.add_argument("--manifest", required=True, help="training manifest CSV")
    t.add_argument("--val-manifest", help="validation manifest CSV (else split --manifest)")
    t.add_argument("--out", required=True, help="bundle output directory")
    t.add_argument("--seed", type=int, default=0, help="random seed (default: %(default)s)")
    t.add_argument("--lr", type=float, default=0.001, help="Adam learning rate (default: %(default)s)")
    t.add_argument("--batch", type=int, default=32, help="minibatch size (default: %(default)s)")
    t.add_argument("--patience", type=int, default=10, help="early-stopping patience in epochs (default: %(default)s)")
    t.add_argument("--max-epochs", type=int, default=200, help="epoch cap per region (default: %(default)s)")
    t.add_argument("--rules", help="JSON ROI rule table")
    t.add_argument("--no-augment", action="store_true", help="disable flip/rotation")
    common(t)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="predict BMI for one image")
    pr.add_argument("--model", required=True, help="bundle directory")
    pr.add_argument("--image", required=True, help="PGM/PPM image")
    pr.add_argument("--landmarks", required=True, help="68-line landmark file")
    common(pr)
    pr.set_defaults(func=cmd_predict)

    ev = sub.add_parser("evaluate", help="MAE on a manifest")
    ev.add_argument("--model", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--split", action="append", choices=("train", "val", "test"),
                    help="split(s) to score; default: every split present, else all rows")
    ev.add_argument("--dataset", default="dataset", help="dataset label for the report (default: %(default)s)")
    ev.add_argument("--csv", help="also write the report CSV here")
    common(ev)
    ev.set_defaults(func=cmd_evaluate)

    cx = sub.add_parser("cross-evaluate", help="MAE on foreign datasets")
    cx.add_argument("--model", required=True)
    cx.add_argument("--manifest", required=True, action="append", metavar="LABEL=PATH")
    cx.add_argument("--split", choices=("train", "val", "test"), default=None)
    cx.add_argument("--csv")
    common(cx)
    cx.set_defaults(func=cmd_cross_evaluate)

    b = sub.add_parser("bench", help="latency and size benchmark")
    b.add_argument("--model", required=True)
    b.add_argument("--image", required=True)
    b.add_argument("--landmarks", required=True)
    b.add_argument("--iterations", type=int, default=1000, help="timed iterations (default: %(default)s)")
    b.add_argument("--warmup", type=int, default=10, help="discarded warmup iterations (default: %(default)s)")
    b.add_argument("--heads", choices=("serial", "parallel", "both"), default="both", help="head execution mode (default: %(default)s)")
    common(b)
    b.set_defaults(func=cmd_bench)

    x = sub.add_parser("extract-patches", help="write the six 32x32 patches as PGM")
    x.add_argument("--image", required=True)
    x.add_argument("--landmarks", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--rules")
    common(x)
    x.set_defaults(func=cmd_extract_patches)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # --threads bounds every internal pool, BLAS included
        with threadpool_limits(limits=_threads(args)):
            return args.func(args)
    except (InvalidInput, ValueError) as exc:
        # DegenerateROIError is a ValueError but is a per-sample runtime failure
        if isinstance(exc, DegenerateROIError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (EvaluationAborted, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
