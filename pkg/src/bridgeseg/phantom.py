"""Synthetic two-domain (MRI-like / CT-like) head phantoms with exact ventricle masks.

Every subject gets one anatomy (head ellipse, skull ring, two mirrored
ventricle ellipses) that is rendered in both domains. The MRI rendering has
high soft-tissue contrast and mild noise; the CT rendering is produced in
Hounsfield-like units, windowed and normalized, with a bright skull ring,
about a quarter of the MRI ventricle/brain contrast and heavier noise.

On disk a dataset is a directory holding ``manifest.json`` plus one raw
little-endian raster per slice (``.f32`` images, ``.u8`` masks).
"""

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .exceptions import ArgumentError, ContractError, FormatError

CT_WINDOW = (-10.0, 500.0)
MRI_WINDOW = (0.0, 1000.0)
MRI_NOISE = 15.0
CT_NOISE_HU = 15.0


class Domain(str, Enum):
    MRI = "MRI"
    CT = "CT"
    SYNTH_CT = "SYNTH_CT"
    SYNTH_MRI = "SYNTH_MRI"


class Split(str, Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"


@dataclass
class ImageSlice:
    pixels: np.ndarray
    domain: Domain
    subject_id: str
    slice_index: int
    value_range: tuple = (-1.0, 1.0)

    @property
    def key(self):
        return (self.subject_id, self.slice_index)


@dataclass
class LabelMask:
    pixels: np.ndarray
    subject_id: str
    slice_index: int

    @property
    def key(self):
        return (self.subject_id, self.slice_index)


@dataclass
class ManifestEntry:
    subject_id: str
    slice_index: int
    domain: Domain
    image: str
    mask: str | None = None

    def to_dict(self):
        d = {
            "subject_id": self.subject_id,
            "slice_index": self.slice_index,
            "domain": self.domain.value,
            "image": self.image,
        }
        if self.mask is not None:
            d["mask"] = self.mask
        return d


@dataclass
class DatasetManifest:
    entries: list
    split: Split
    seed: int
    generator_params: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "seed": self.seed,
            "split": self.split.value,
            "generator_params": self.generator_params,
            "entries": [e.to_dict() for e in self.entries],
        }

    @classmethod
    def from_dict(cls, d):
        for key in ("seed", "split", "generator_params", "entries"):
            if key not in d:
                raise FormatError(f"manifest is missing key '{key}'")
        entries = []
        for i, e in enumerate(d["entries"]):
            try:
                entries.append(
                    ManifestEntry(
                        subject_id=str(e["subject_id"]),
                        slice_index=int(e["slice_index"]),
                        domain=Domain(e["domain"]),
                        image=str(e["image"]),
                        mask=e.get("mask"),
                    )
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"manifest entry {i} is invalid: {exc!r}") from exc
        try:
            split = Split(d["split"])
        except ValueError as exc:
            raise FormatError(f"manifest has unknown split {d['split']!r}") from exc
        return cls(entries, split, int(d["seed"]), dict(d["generator_params"]))

    def entries_for(self, domain):
        return [e for e in self.entries if e.domain == Domain(domain)]

    def check_unpaired(self):
        """Raise ContractError if a TRAIN manifest pairs MRI and CT of one subject."""
        if self.split != Split.TRAIN:
            return
        mri = {e.subject_id for e in self.entries_for(Domain.MRI)}
        ct = {e.subject_id for e in self.entries_for(Domain.CT)}
        both = sorted(mri & ct)
        if both:
            raise ContractError(
                f"TRAIN split pairs MRI and CT slices of subjects {both}"
            )

    def check_label_hygiene(self):
        """Raise ContractError if any target-domain (CT) entry carries a mask."""
        bad = [
            f"{e.subject_id}/{e.slice_index}"
            for e in self.entries
            if e.domain in (Domain.CT, Domain.SYNTH_CT) and e.mask is not None
        ]
        if self.split == Split.TRAIN and bad:
            raise ContractError(
                "target-domain labels are forbidden in training; CT entries with "
                f"masks: {bad[:5]}{' ...' if len(bad) > 5 else ''}"
            )


def hu_window(raw, lo=CT_WINDOW[0], hi=CT_WINDOW[1]):
    """Clamp intensities to ``[lo, hi]`` (default is the [-10, 500] HU brain window)."""
    if not lo < hi:
        raise ArgumentError(f"window requires lo < hi, got ({lo}, {hi})")
    return np.clip(np.asarray(raw, dtype=np.float64), lo, hi)


def normalize(raw, lo, hi):
    """Affinely map ``[lo, hi]`` onto ``[-1, 1]``."""
    if not lo < hi:
        raise ArgumentError(f"normalize requires lo < hi, got ({lo}, {hi})")
    raw = np.asarray(raw, dtype=np.float64)
    out = 2.0 * (raw - lo) / (hi - lo) - 1.0
    # guards the [-1, 1] contract against rounding at the bounds
    return np.clip(out, -1.0, 1.0).astype(np.float32)


def _ellipse(yy, xx, cy, cx, a, b, angle=0.0):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = c * dy + s * dx
    v = -s * dy + c * dx
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _subject_geometry(rng, size):
    return {
        "cy": size / 2 + rng.uniform(-0.03, 0.03) * size,
        "cx": size / 2 + rng.uniform(-0.03, 0.03) * size,
        "head_a": rng.uniform(0.40, 0.44) * size,
        "head_b": rng.uniform(0.33, 0.37) * size,
        "skull": 0.05 * size,
        "vent_offset": rng.uniform(0.07, 0.10) * size,
        "vent_dy": rng.uniform(-0.04, 0.04) * size,
        "vent_a": rng.uniform(0.13, 0.17) * size,
        "vent_b": rng.uniform(0.065, 0.085) * size,
        "vent_angle": rng.uniform(0.15, 0.35),
        "asym": rng.uniform(0.9, 1.1),
    }


def _slice_scale(k, n_slices):
    z = (k + 0.5) / n_slices
    return 0.65 + 0.35 * np.sin(np.pi * z)


def _anatomy(geom, size, k, n_slices):
    """Label maps for one slice: head, brain interior and ventricle mask."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    s = _slice_scale(k, n_slices)
    head_scale = 0.92 + 0.08 * s
    head = _ellipse(yy, xx, geom["cy"], geom["cx"],
                    geom["head_a"] * head_scale, geom["head_b"] * head_scale)
    brain = _ellipse(yy, xx, geom["cy"], geom["cx"],
                     geom["head_a"] * head_scale - geom["skull"],
                     geom["head_b"] * head_scale - geom["skull"])
    vy = geom["cy"] + geom["vent_dy"]
    left = _ellipse(yy, xx, vy, geom["cx"] - geom["vent_offset"],
                    geom["vent_a"] * s, geom["vent_b"] * s, geom["vent_angle"])
    r = s * geom["asym"]
    right = _ellipse(yy, xx, vy, geom["cx"] + geom["vent_offset"],
                     geom["vent_a"] * r, geom["vent_b"] * r, -geom["vent_angle"])
    vent = (left | right) & brain
    return head, brain, vent


def _texture(rng, size):
    f = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16)
    return f / (f.std() + 1e-12)


def _render_mri(head, brain, vent, texture, rng):
    img = np.zeros(head.shape)
    img[head] = 200.0
    img[brain] = 650.0 + 40.0 * texture[brain]
    img[vent] = 250.0
    img = ndimage.gaussian_filter(img, 0.5)
    img += rng.normal(0.0, MRI_NOISE, img.shape)
    return normalize(hu_window(img, *MRI_WINDOW), *MRI_WINDOW)


def _render_ct(head, brain, vent, texture, rng):
    # ventricle/brain contrast 51 HU is 25% of the MRI contrast after normalization
    img = np.full(head.shape, -1000.0)
    img[head] = 1200.0
    img[brain] = 60.0 + 5.1 * texture[brain]
    img[vent] = 9.0
    img = ndimage.gaussian_filter(img, 0.5)
    img += rng.normal(0.0, CT_NOISE_HU, img.shape)
    return normalize(hu_window(img, *CT_WINDOW), *CT_WINDOW)


def _raster_names(subject_id, k, domain):
    return f"{subject_id}_{k}_{Domain(domain).value}.f32", f"{subject_id}_{k}_mask.u8"


def generate_phantoms(seed, n_subjects, slices_per_subject, size=64,
                      split=Split.TEST, subject_prefix="s"):
    """Render ``n_subjects`` phantom subjects.

    For TEST/VAL splits every slice is rendered in both domains (paired), and
    both entries reference the shared mask. For TRAIN, even-indexed subjects
    contribute only their MRI slices (with masks) and odd-indexed subjects
    only their unlabeled CT slices, so no subject is paired across domains.

    Returns ``(slices, masks, manifest)``. Output is a pure function of the
    arguments.
    """
    if n_subjects < 1 or slices_per_subject < 1:
        raise ArgumentError("n_subjects and slices_per_subject must be >= 1")
    if size < 32:
        raise ArgumentError(f"size must be >= 32, got {size}")
    split = Split(split)

    slices, masks, entries = [], [], []
    for i in range(n_subjects):
        sid = f"{subject_prefix}{i:03d}"
        geom = _subject_geometry(np.random.default_rng([seed, i]), size)
        if split == Split.TRAIN:
            domains = [Domain.MRI] if i % 2 == 0 else [Domain.CT]
        else:
            domains = [Domain.MRI, Domain.CT]
        for k in range(slices_per_subject):
            head, brain, vent = _anatomy(geom, size, k, slices_per_subject)
            tex = _texture(np.random.default_rng([seed, i, k, 0]), size)
            mask = vent.astype(np.uint8)
            keep_mask = False
            for dom in domains:
                rng = np.random.default_rng([seed, i, k, 1 if dom == Domain.MRI else 2])
                render = _render_mri if dom == Domain.MRI else _render_ct
                pixels = render(head, brain, vent, tex, rng)
                slices.append(ImageSlice(pixels, dom, sid, k))
                image_name, mask_name = _raster_names(sid, k, dom)
                labeled = split != Split.TRAIN or dom == Domain.MRI
                entries.append(ManifestEntry(sid, k, dom, image_name,
                                             mask_name if labeled else None))
                keep_mask |= labeled
            if keep_mask:
                masks.append(LabelMask(mask, sid, k))

    params = {
        "n_subjects": n_subjects,
        "slices_per_subject": slices_per_subject,
        "size": size,
        "subject_prefix": subject_prefix,
        "ct_window": list(CT_WINDOW),
        "mri_window": list(MRI_WINDOW),
    }
    manifest = DatasetManifest(entries, split, seed, params)
    manifest.check_unpaired()
    return slices, masks, manifest


def _num_workers():
    try:
        return max(1, int(os.environ.get("BRIDGESEG_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def save_dataset(slices, masks, manifest, out_dir):
    """Write rasters and ``manifest.json`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    by_key = {(s.subject_id, s.slice_index, Domain(s.domain)): s for s in slices}
    mask_by_key = {m.key: m for m in masks}
    for e in manifest.entries:
        s = by_key.get((e.subject_id, e.slice_index, e.domain))
        if s is None:
            raise ArgumentError(f"no slice for manifest entry {e.image}")
        np.asarray(s.pixels, dtype="<f4").tofile(out / e.image)
        if e.mask is not None:
            m = mask_by_key.get((e.subject_id, e.slice_index))
            if m is None:
                raise ArgumentError(f"no mask for manifest entry {e.mask}")
            np.asarray(m.pixels, dtype="u1").tofile(out / e.mask)
    path = out / "manifest.json"
    tmp = out / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def read_manifest(directory):
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise FormatError(f"no manifest found at {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest {path}: {exc}") from exc
    return DatasetManifest.from_dict(raw)


def _read_raster(path, dtype, size):
    if not path.is_file():
        raise FormatError(f"raster file missing: {path}")
    data = np.fromfile(path, dtype=dtype)
    if data.size != size * size:
        raise FormatError(
            f"raster {path} has {data.size} values, expected {size}x{size}"
        )
    return data.reshape(size, size)


def load_dataset(directory):
    """Inverse of :func:`save_dataset`; returns ``(slices, masks, manifest)``."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    size = manifest.generator_params.get("size")
    if not isinstance(size, int):
        raise FormatError("manifest generator_params must record integer 'size'")

    def load_entry(e):
        img = _read_raster(directory / e.image, "<f4", size).astype(np.float32)
        m = None
        if e.mask is not None:
            m = _read_raster(directory / e.mask, "u1", size).astype(np.uint8)
        return e, img, m

    with ThreadPoolExecutor(max_workers=_num_workers()) as pool:
        loaded = list(pool.map(load_entry, manifest.entries))

    slices, masks, seen = [], [], set()
    for e, img, m in loaded:
        slices.append(ImageSlice(img, e.domain, e.subject_id, e.slice_index))
        if m is not None and (e.subject_id, e.slice_index) not in seen:
            seen.add((e.subject_id, e.slice_index))
            masks.append(LabelMask(m, e.subject_id, e.slice_index))
    return slices, masks, manifest


def domain_arrays(slices, domain):
    """Stack the pixels of all slices in ``domain`` -> (n, H, W), plus their keys."""
    sel = [s for s in slices if Domain(s.domain) == Domain(domain)]
    if not sel:
        return np.zeros((0, 0, 0), dtype=np.float32), []
    return np.stack([s.pixels for s in sel]).astype(np.float32), [s.key for s in sel]


def masks_for(keys, masks):
    by_key = {m.key: m.pixels for m in masks}
    missing = [k for k in keys if k not in by_key]
    if missing:
        raise FormatError(f"reference masks missing for slices {missing[:5]}")
    return np.stack([by_key[k] for k in keys]).astype(np.uint8)
