"""Command-line entry point: ``bridgeseg <subcommand> [flags]``.

Subcommands: gen-data, train, translate, segment, evaluate, report.
Exit codes: 0 success, 2 usage error, 1 runtime error (a one-line JSON
object with ``error``, ``message`` and ``subcommand`` goes to stderr).
Config-file values are overridden by command-line flags.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .exceptions import ArgumentError

log = logging.getLogger("bridgeseg")

TRAIN_SEED_OFFSET = 0
TEST_SEED_OFFSET = 1000


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p, out_required=True):
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="random seed override")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    p.add_argument("-q", "--quiet", action="store_true", help="errors only")


def _inference_flags(p):
    p.add_argument("--checkpoint", required=True, help="checkpoint archive (.ckpt)")
    p.add_argument("--data", required=True, help="dataset directory with manifest.json")
    p.add_argument("--passes", type=int, default=10, help="MC-dropout forward passes (default 10)")
    p.add_argument("--dropout-rate", type=float, default=0.5, help="test-time dropout rate (default 0.5)")
    p.add_argument("--threshold", type=float, default=0.5, help="mask threshold on mean probability")


def build_parser():
    parser = _Parser(prog="bridgeseg", allow_abbrev=False,
                     description="Unpaired MRI->CT bridge translation with CT segmentation.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand", parser_class=_Parser)

    p = sub.add_parser("gen-data", allow_abbrev=False, help="generate phantom datasets",
                       description="Write phantom rasters and manifest.json. With --split all, "
                                   "an unpaired TRAIN set goes to OUT/train and a paired TEST set "
                                   "to OUT/test; otherwise the single split is written to OUT.")
    _common(p)
    p.add_argument("--subjects", type=int, default=20, help="number of subjects (default 20)")
    p.add_argument("--test-subjects", type=int, default=6, help="test subjects for --split all (default 6)")
    p.add_argument("--slices", type=int, default=4, help="slices per subject (default 4)")
    p.add_argument("--size", type=int, default=64, help="slice size in pixels (default 64)")
    p.add_argument("--split", choices=["all", "train", "test"], default="all")

    p = sub.add_parser("train", allow_abbrev=False, help="train translation + segmentation",
                       description="Train on an unpaired TRAIN dataset. Writes checkpoints, loss "
                                   "CSVs and experiment.json to OUT.")
    _common(p)
    p.add_argument("--data", required=True, help="TRAIN dataset directory")
    p.add_argument("--config", help="JSON file with TrainConfig fields (see docs/config.schema.json)")
    p.add_argument("--mode", type=str.upper, choices=["E2E", "TWO_STAGE"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    p = sub.add_parser("translate", allow_abbrev=False, help="MRI -> synthetic CT",
                       description="Translate every MRI slice of a dataset; writes SYNTH_CT "
                                   "rasters and a manifest to OUT.")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("segment", allow_abbrev=False, help="MC-dropout CT segmentation",
                       description="Segment every CT slice; writes probability, variance (f32), "
                                   "mask (u8) rasters and 8-bit variance heatmap PNGs.")
    _common(p)
    _inference_flags(p)

    p = sub.add_parser("evaluate", allow_abbrev=False, help="score a checkpoint on a paired test set",
                       description="Writes metrics.csv, subjects.csv, summary.json and plots. "
                                   "Exits 1 if any metric is NaN.")
    _common(p)
    _inference_flags(p)

    p = sub.add_parser("report", allow_abbrev=False, help="compare evaluated variants",
                       description="Paired t-tests over per-slice DSC of several metrics.csv files "
                                   "given as NAME=PATH; writes report.json and a DSC box plot.")
    _common(p)
    p.add_argument("--metrics", nargs="+", required=True, metavar="NAME=PATH")
    return parser


def _load_config(args):
    from .training import TrainConfig

    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg = json.loads(path.read_text())
    for key in ("mode", "epochs", "lr", "seed"):
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    return TrainConfig.from_dict(cfg)


def cmd_gen_data(args):
    from .phantom import Split, generate_phantoms, save_dataset

    seed = args.seed if args.seed is not None else 0
    out = Path(args.out)
    jobs = {"all": [("train", Split.TRAIN, args.subjects, seed + TRAIN_SEED_OFFSET, out / "train"),
                    ("test", Split.TEST, args.test_subjects, seed + TEST_SEED_OFFSET, out / "test")],
            "train": [("train", Split.TRAIN, args.subjects, seed, out)],
            "test": [("test", Split.TEST, args.subjects, seed, out)]}[args.split]
    written = []
    for prefix, split, n, s, d in jobs:
        slices, masks, manifest = generate_phantoms(s, n, args.slices, args.size, split=split,
                                                    subject_prefix=prefix)
        written.append(str(save_dataset(slices, masks, manifest, d)))
    return f"gen-data: wrote {', '.join(written)}"


def cmd_train(args):
    from .training import train

    config = _load_config(args)
    out = Path(args.out)
    models, record = train(args.data, config, out)
    final = record.checkpoints[-1] if record.checkpoints else "none"
    last = record.epoch_losses[-1] if record.epoch_losses else {}
    return (f"train: mode={config.mode} epochs={config.epochs} seed={config.seed} "
            f"final_loss={last} checkpoint={final}")


def _load_models(checkpoint):
    from .training import TrainConfig, load_checkpoint

    models, cfg = load_checkpoint(checkpoint)
    return models, TrainConfig.from_dict(cfg)


def cmd_translate(args):
    from .bridge import translate
    from .phantom import DatasetManifest, Domain, ManifestEntry, Split, load_dataset

    models, cfg = _load_models(args.checkpoint)
    seed = args.seed if args.seed is not None else cfg.seed
    schedule = cfg.make_schedule()
    slices, _, manifest = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in sorted((s for s in slices if s.domain == Domain.MRI),
                    key=lambda s: (s.subject_id, s.slice_index)):
        fake = translate(s, models.generator, schedule, seed=seed)
        name = f"{s.subject_id}_{s.slice_index}_{Domain.SYNTH_CT.value}.f32"
        np.asarray(fake.pixels, dtype="<f4").tofile(out / name)
        entries.append(ManifestEntry(s.subject_id, s.slice_index, Domain.SYNTH_CT, name))
    if not entries:
        raise ArgumentError(f"no MRI slices in {args.data}")
    params = dict(manifest.generator_params, source=str(args.data),
                  checkpoint=str(args.checkpoint))
    out_manifest = DatasetManifest(entries, Split(manifest.split), seed, params)
    (out / "manifest.json").write_text(json.dumps(out_manifest.to_dict(), indent=2,
                                                  sort_keys=True) + "\n")
    return f"translate: {len(entries)} synthetic CT slices -> {out}"


def _heatmap_png(variance, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # 0.25 is the largest possible variance of a probability
    v = np.clip(np.asarray(variance) / 0.25, 0.0, 1.0)
    rgb = (plt.get_cmap("magma")(v)[..., :3] * 255).round().astype(np.uint8)
    plt.imsave(path, rgb)


def cmd_segment(args):
    from .phantom import Domain, load_dataset
    from .segment import mc_predict

    models, cfg = _load_models(args.checkpoint)
    seed = args.seed if args.seed is not None else cfg.seed
    slices, _, _ = load_dataset(args.data)
    targets = [s for s in slices if s.domain in (Domain.CT, Domain.SYNTH_CT)]
    if not targets:
        raise ArgumentError(f"no CT slices in {args.data}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in targets:
        b = mc_predict(s.pixels, models.segmenter, passes=args.passes,
                       dropout_rate=args.dropout_rate, threshold=args.threshold,
                       seed=seed + 7919 * s.slice_index)
        stem = out / f"{s.subject_id}_{s.slice_index}"
        np.asarray(b.mean_prob, dtype="<f4").tofile(f"{stem}_prob.f32")
        np.asarray(b.variance, dtype="<f4").tofile(f"{stem}_var.f32")
        np.asarray(b.mask, dtype="u1").tofile(f"{stem}_mask.u8")
        _heatmap_png(b.variance, f"{stem}_var.png")
    return f"segment: {len(targets)} slices -> {out}"


def cmd_evaluate(args):
    from .evaluate import evaluate_experiment, has_nan

    seed = args.seed if args.seed is not None else 0
    records, summary = evaluate_experiment(args.checkpoint, args.data, args.out,
                                           passes=args.passes, dropout_rate=args.dropout_rate,
                                           threshold=args.threshold, seed=seed)
    if has_nan(records):
        raise FloatingPointError(f"NaN metric in {Path(args.out) / 'metrics.csv'}")
    m = summary["metrics"]
    return (f"evaluate: n={summary['n_slices']} dsc={m['dsc']['mean']:.4f} "
            f"iou={m['iou']['mean']:.4f} ssim={m['ssim']['mean']:.4f} -> {args.out}")


def cmd_report(args):
    from .evaluate import compare_variants, read_metrics_csv

    variants = {}
    for item in args.metrics:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"--metrics expects NAME=PATH, got {item!r}")
        variants[name] = read_metrics_csv(path)
    keys = {n: [(r.subject_id, r.slice_index) for r in recs] for n, recs in variants.items()}
    first = next(iter(keys.values()))
    for n, k in keys.items():
        if k != first:
            raise ArgumentError(f"variant {n!r} covers different slices than the others")
    dsc = {n: [r.dsc for r in recs] for n, recs in variants.items()}
    report = {"variants": {n: {"mean_dsc": float(np.mean(v)), "std_dsc": float(np.std(v)),
                               "n": len(v)} for n, v in dsc.items()},
              "paired_ttests": compare_variants(dsc)}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(dsc), 3))
    ax.boxplot(list(dsc.values()))
    ax.set_xticks(range(1, len(dsc) + 1), list(dsc))
    ax.set_ylabel("DSC")
    fig.tight_layout()
    fig.savefig(out / "dsc_boxplot.png", dpi=100)
    plt.close(fig)
    return f"report: {len(dsc)} variants -> {out / 'report.json'}"


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "translate": cmd_translate,
            "segment": cmd_segment, "evaluate": cmd_evaluate, "report": cmd_report}


def _fail(command, exc, code):
    msg = {"error": type(exc).__name__, "message": str(exc), "subcommand": command}
    print(json.dumps(msg), file=sys.stderr)
    return code


def run(argv=None):
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _fail(argv[0] if argv else None, exc, 2)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return _fail(None, UsageError("a subcommand is required"), 2)

    level = logging.ERROR if args.quiet else [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = COMMANDS[args.command](args)
    except (UsageError, ArgumentError) as exc:
        return _fail(args.command, exc, 2)
    except Exception as exc:  # every other failure is a runtime error
        log.debug("failure", exc_info=True)
        return _fail(args.command, exc, 1)
    if not args.quiet:
        print(summary)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
