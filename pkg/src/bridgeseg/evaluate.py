"""Per-slice evaluation on a paired test split and report emission.

Segmentation is scored on real CT slices against their reference masks;
translation quality (MSE, SSIM) compares the synthetic CT of the paired MRI
slice with the real CT. Outputs: ``metrics.csv``, ``subjects.csv``,
``summary.json`` and PNG plots.
"""

import csv
import itertools
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bridge import translate
from .exceptions import DegenerateInputError, FormatError
from .metrics import SSIM_DEFAULTS, dice, dice3d, iou, mean_std, mse, paired_ttest, pearson, ssim, spearman
from .phantom import Domain, load_dataset
from .segment import DegenerateUncertaintyWarning, PredictionBundle, mc_predict, slice_uncertainty, uncertainty_region
from .training import TrainConfig, load_checkpoint

METRIC_COLUMNS = ["subject_id", "slice_index", "dsc", "iou", "mse", "ssim", "uncertainty"]
CONVENTIONS = {
    "empty_masks": "DSC = IoU = 1.0 when prediction and reference are both empty",
    "ssim": dict(SSIM_DEFAULTS, data_range=1.0, input_rescale="[-1,1] -> [0,1]"),
    "uncertainty": "mean MC-dropout variance over predicted-or-reference foreground",
    "correlation": "slices with empty prediction and empty reference are excluded",
}


@dataclass
class MetricsRecord:
    subject_id: str
    slice_index: int
    dsc: float
    iou: float
    mse: float
    ssim: float
    uncertainty: float
    degenerate: bool = False

    def row(self):
        return [self.subject_id, self.slice_index, self.dsc, self.iou, self.mse,
                self.ssim, self.uncertainty]


def _test_pairs(slices, masks, manifest):
    if any(e.domain == Domain.CT and e.mask is None for e in manifest.entries):
        missing = [e.image for e in manifest.entries if e.domain == Domain.CT and e.mask is None]
        raise FormatError(f"reference masks missing for CT slices: {missing[:5]}")
    ct = [s for s in slices if s.domain == Domain.CT]
    if not ct:
        raise FormatError("test split contains no CT slices")
    mri = {s.key: s for s in slices if s.domain == Domain.MRI}
    refs = {m.key: m for m in masks}
    missing = [s.key for s in ct if s.key not in refs]
    if missing:
        raise FormatError(f"reference masks missing for CT slices {missing[:5]}")
    ct.sort(key=lambda s: (s.subject_id, s.slice_index))
    return ct, [refs[s.key] for s in ct], [mri.get(s.key) for s in ct]


def evaluate_slices(ct_slices, refs, predict, synthesize=None, mri_slices=None):
    """Score every CT slice.

    ``predict(slice) -> PredictionBundle``; ``synthesize(mri_slice) -> pixels``
    produces the synthetic CT compared with the real CT (NaN when absent).
    """
    records = []
    for i, (ct, ref) in enumerate(zip(ct_slices, refs)):
        bundle = predict(ct)
        ref_px = getattr(ref, "pixels", ref)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateUncertaintyWarning)
            unc = slice_uncertainty(bundle, ref_px)
        degenerate = not uncertainty_region(bundle, ref_px).any()
        src = mri_slices[i] if mri_slices is not None else None
        if synthesize is not None and src is not None:
            fake = synthesize(src)
            e_mse, e_ssim = mse(fake, ct.pixels), ssim(fake, ct.pixels)
        else:
            e_mse = e_ssim = math.nan
        records.append(MetricsRecord(ct.subject_id, ct.slice_index,
                                     dice(bundle.mask, ref_px), iou(bundle.mask, ref_px),
                                     e_mse, e_ssim, unc, degenerate))
    return records


def per_subject_dice3d(records, predictions, refs):
    groups = {}
    for rec, pred, ref in zip(records, predictions, refs):
        groups.setdefault(rec.subject_id, []).append((rec.slice_index, pred, ref))
    out = {}
    for sid, items in sorted(groups.items()):
        items.sort(key=lambda it: it[0])
        out[sid] = dice3d([p for _, p, _ in items], [getattr(r, "pixels", r) for _, _, r in items])
    return out


def _stat(values):
    v = [x for x in values if not math.isnan(x)]
    if not v:
        return {"mean": None, "std": None, "n": 0}
    m, s = mean_std(v)
    return {"mean": m, "std": s, "n": len(v)}


def correlation_summary(records):
    usable = [r for r in records if not r.degenerate]
    out = {"n": len(usable), "excluded": len(records) - len(usable),
           "pearson": None, "spearman": None}
    if len(usable) >= 3:
        xs = [r.dsc for r in usable]
        ys = [r.uncertainty for r in usable]
        try:
            out["pearson"] = pearson(xs, ys)
            out["spearman"] = spearman(xs, ys)
        except DegenerateInputError as exc:
            out["reason"] = str(exc)
    return out


def summarize(records, dsc3d_by_subject=None):
    summary = {
        "n_slices": len(records),
        "metrics": {k: _stat([getattr(r, k) for r in records])
                    for k in ("dsc", "iou", "mse", "ssim", "uncertainty")},
        "correlation_dsc_uncertainty": correlation_summary(records),
        "conventions": CONVENTIONS,
    }
    if dsc3d_by_subject:
        summary["dsc3d"] = _stat(list(dsc3d_by_subject.values()))
        summary["dsc3d_by_subject"] = dsc3d_by_subject
    return summary


def has_nan(records):
    return any(math.isnan(v) for r in records for v in (r.dsc, r.iou, r.mse, r.ssim, r.uncertainty))


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def write_metrics_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in records:
            w.writerow([_fmt(v) for v in r.row()])


def read_metrics_csv(path):
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"metrics file missing: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRIC_COLUMNS:
            raise FormatError(f"{path}: expected columns {METRIC_COLUMNS}, got {reader.fieldnames}")
        return [MetricsRecord(row["subject_id"], int(row["slice_index"]),
                              *(float(row[c]) for c in METRIC_COLUMNS[2:])) for row in reader]


def compare_variants(dsc_by_variant):
    """Pairwise two-sided paired t-tests over aligned per-slice DSC lists."""
    out = {}
    for a, b in itertools.combinations(sorted(dsc_by_variant), 2):
        try:
            t, p = paired_ttest(dsc_by_variant[a], dsc_by_variant[b])
            out[f"{a} vs {b}"] = {"t": t, "p": p}
        except (DegenerateInputError, ValueError) as exc:
            out[f"{a} vs {b}"] = {"t": None, "p": None, "reason": str(exc)}
    return out


def plot_dsc_histogram(records, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    ax.hist([r.dsc for r in records], bins=np.linspace(0, 1, 21), color="tab:blue")
    ax.set_xlabel("DSC")
    ax.set_ylabel("slices")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_uncertainty(image, bundle, ref, path, title=""):
    """Image with reference contour, mean probability and variance heatmap side by side."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(9, 3))
    axes[0].imshow(image, cmap="gray", vmin=-1, vmax=1)
    axes[0].contour(getattr(ref, "pixels", ref), levels=[0.5], colors="lime", linewidths=0.8)
    axes[0].set_title(title or "CT + reference")
    axes[1].imshow(bundle.mean_prob, cmap="viridis", vmin=0, vmax=1)
    axes[1].set_title("mean probability")
    im = axes[2].imshow(bundle.variance, cmap="magma")
    axes[2].set_title("variance")
    fig.colorbar(im, ax=axes[2], fraction=0.046)
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_report(records, out_dir, dsc3d_by_subject=None, extra=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(records, out / "metrics.csv")
    if dsc3d_by_subject:
        with open(out / "subjects.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subject_id", "dsc3d"])
            for sid, v in dsc3d_by_subject.items():
                w.writerow([sid, _fmt(v)])
    summary = summarize(records, dsc3d_by_subject)
    if extra:
        summary.update(extra)
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    plot_dsc_histogram(records, out / "dsc_hist.png")
    return summary


def evaluate_experiment(checkpoint, test_data, out_dir=None, passes=10, dropout_rate=0.5,
                        threshold=0.5, seed=0, n_heatmaps=4):
    """Evaluate a checkpoint on a paired test split.

    ``test_data`` is a dataset directory or ``(slices, masks, manifest)``.
    Returns ``(records, summary)``; writes the report when ``out_dir`` is set.
    """
    models, cfg = load_checkpoint(checkpoint)
    schedule = TrainConfig.from_dict(cfg).make_schedule()
    return evaluate_models(models, schedule, test_data, out_dir, passes, dropout_rate,
                           threshold, seed, n_heatmaps)


def evaluate_models(models, schedule, test_data, out_dir=None, passes=10, dropout_rate=0.5,
                    threshold=0.5, seed=0, n_heatmaps=4):
    if isinstance(test_data, (str, Path)):
        slices, masks, manifest = load_dataset(test_data)
    else:
        slices, masks, manifest = test_data
    ct, refs, mri = _test_pairs(slices, masks, manifest)
    bundles = {}

    def predict(s):
        b = mc_predict(s.pixels, models.segmenter, passes=passes, dropout_rate=dropout_rate,
                       threshold=threshold, seed=seed + 7919 * s.slice_index)
        bundles[s.key] = b
        return b

    def synthesize(s):
        return translate(s, models.generator, schedule, seed=seed).pixels

    records = evaluate_slices(ct, refs, predict, synthesize, mri)
    preds = [bundles[s.key].mask for s in ct]
    d3 = per_subject_dice3d(records, preds, refs)
    summary = summarize(records, d3)
    if out_dir is not None:
        summary = write_report(records, out_dir, d3, {"passes": passes,
                                                      "dropout_rate": dropout_rate,
                                                      "threshold": threshold})
        for k, (s, r) in enumerate(zip(ct[:n_heatmaps], refs[:n_heatmaps])):
            plot_uncertainty(s.pixels, bundles[s.key], r,
                             Path(out_dir) / f"uncertainty_{s.subject_id}_{s.slice_index}.png",
                             f"{s.subject_id}/{s.slice_index}")
    return records, summary


def oracle_bundle(ref):
    """A prediction identical to the reference with zero variance."""
    m = np.asarray(getattr(ref, "pixels", ref), dtype=np.uint8)
    return PredictionBundle(m.astype(np.float64), np.zeros(m.shape), m.copy(), passes=1)
