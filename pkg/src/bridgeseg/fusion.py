"""Silver-standard labels from simulated multi-atlas majority voting."""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import ArgumentError
from .phantom import LabelMask
from .validation import check_mask, check_unit_interval


@dataclass
class AtlasVoteSet:
    masks: list
    source_ids: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.masks) < 1:
            raise ArgumentError("an AtlasVoteSet needs at least one mask")
        shapes = {np.shape(_pixels(m)) for m in self.masks}
        if len(shapes) != 1:
            raise ArgumentError(f"atlas masks differ in shape: {sorted(shapes)}")
        if not self.source_ids:
            self.source_ids = [f"atlas{i}" for i in range(len(self.masks))]

    def stack(self):
        return np.stack([check_mask(_pixels(m)) for m in self.masks])


def _pixels(m):
    return m.pixels if isinstance(m, LabelMask) else m


def boundary_band(mask):
    """Pixels on either side of the mask edge (4-connectivity)."""
    m = check_mask(mask).astype(bool)
    inner = m & ~ndimage.binary_erosion(m)
    outer = ndimage.binary_dilation(m) & ~m
    return inner | outer


def perturb_mask(mask, seed, magnitude):
    """Flip a seeded random subset of boundary pixels.

    At most ``floor(magnitude * n_boundary)`` pixels change, emulating the
    edge disagreement left by an imperfect atlas registration.
    """
    check_unit_interval(magnitude, "magnitude")
    pixels = check_mask(_pixels(mask))
    band = np.flatnonzero(boundary_band(pixels))
    n_flip = int(np.floor(magnitude * band.size))
    out = pixels.copy()
    if n_flip:
        rng = np.random.default_rng(seed)
        idx = rng.choice(band, size=n_flip, replace=False)
        flat = out.reshape(-1)
        flat[idx] = 1 - flat[idx]
    if isinstance(mask, LabelMask):
        return LabelMask(out, mask.subject_id, mask.slice_index)
    return out


def vote_fraction(votes):
    """Per-pixel fraction of atlases voting foreground (a fusion-confidence map)."""
    if not isinstance(votes, AtlasVoteSet):
        votes = AtlasVoteSet(list(votes))
    return votes.stack().mean(axis=0)


def majority_vote(votes):
    """Foreground where strictly more than half the atlases agree; ties go to background."""
    if not isinstance(votes, AtlasVoteSet):
        votes = AtlasVoteSet(list(votes))
    stack = votes.stack()
    fused = (2 * stack.sum(axis=0, dtype=np.int64) > stack.shape[0]).astype(np.uint8)
    first = votes.masks[0]
    if isinstance(first, LabelMask):
        return LabelMask(fused, first.subject_id, first.slice_index)
    return fused


def silver_mask(mask, seed, n_atlases=5, magnitude=0.3):
    """Fuse ``n_atlases`` independently perturbed copies of ``mask``."""
    votes = AtlasVoteSet(
        [perturb_mask(mask, [seed, k], magnitude) for k in range(n_atlases)],
        [f"atlas{k}" for k in range(n_atlases)],
    )
    return majority_vote(votes)
