"""Ventricle segmentation networks, weighted cross-entropy and MC-dropout prediction.

A single configurable U-Net covers both architectures: R2AUNet uses
recurrent convolution units, residual blocks and attention-gated skips;
the plain U-Net is the degenerate setting (one recurrence step, no residual
path, no gates) and shares its parameter names. Dropout sits immediately
before the final 1x1 convolution, so MC sampling only re-runs the head.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ArgumentError
from .validation import as_tensor, check_mask, check_same_shape, require_finite

EPS = 1e-7


class DegenerateUncertaintyWarning(UserWarning):
    """Uncertainty requested over an empty foreground union."""


def conv_unit(ch_in, ch_out):
    return nn.Sequential(
        nn.Conv2d(ch_in, ch_out, 3, padding=1),
        nn.InstanceNorm2d(ch_out, affine=True),
        nn.ReLU(),
    )


class RecurrentConv(nn.Module):
    """``h = f(x)`` then ``h = f(x + h)`` for the remaining steps (shared weights)."""

    def __init__(self, ch_in, ch_out, steps):
        super().__init__()
        self.steps = steps
        self.unit = conv_unit(ch_in, ch_out)

    def forward(self, x):
        h = self.unit(x)
        for _ in range(self.steps - 1):
            h = self.unit(x + h)
        return h


class R2Block(nn.Module):
    def __init__(self, ch_in, ch_out, steps=2, residual=True):
        super().__init__()
        self.residual = residual
        # recurrence adds x to h, so channels must match before the first unit
        self.proj = nn.Conv2d(ch_in, ch_out, 1) if (residual or steps > 1) else None
        first_in = ch_out if self.proj is not None else ch_in
        self.rec1 = RecurrentConv(first_in, ch_out, steps)
        self.rec2 = RecurrentConv(ch_out, ch_out, steps)

    def forward(self, x):
        if self.proj is not None:
            x = self.proj(x)
        h = self.rec2(self.rec1(x))
        return x + h if self.residual else h


class AttentionGate(nn.Module):
    """Additive attention on a skip connection; coefficients lie in [0, 1].

    ``fixed_coefficient`` overrides the learned map (1.0 gives an ungated skip).
    """

    def __init__(self, f_g, f_l, f_int):
        super().__init__()
        self.w_g = nn.Sequential(nn.Conv2d(f_g, f_int, 1), nn.InstanceNorm2d(f_int, affine=True))
        self.w_x = nn.Sequential(nn.Conv2d(f_l, f_int, 1), nn.InstanceNorm2d(f_int, affine=True))
        self.psi = nn.Conv2d(f_int, 1, 1)
        self.fixed_coefficient = None
        self.last_coefficients = None

    def forward(self, g, x):
        if self.fixed_coefficient is not None:
            alpha = torch.full_like(x[:, :1], float(self.fixed_coefficient))
        else:
            alpha = torch.sigmoid(self.psi(F.relu(self.w_g(g) + self.w_x(x))))
        self.last_coefficients = alpha.detach()
        return x * alpha


ARCHS = ("R2AUNET", "UNET")


class SegNet(nn.Module):
    def __init__(self, arch="R2AUNET", base_channels=16, depth=4, recurrence_steps=2,
                 residual=None, attention=None, dropout_rate=0.5, fg_weight=30.0,
                 in_channels=1):
        super().__init__()
        arch = arch.upper()
        if arch not in ARCHS:
            raise ArgumentError(f"unknown architecture {arch!r}; choose from {ARCHS}")
        if arch == "UNET":
            recurrence_steps, residual, attention = 1, False, False
        residual = True if residual is None else residual
        attention = True if attention is None else attention
        if recurrence_steps < 1:
            raise ArgumentError("recurrence_steps must be >= 1")
        if not 0.0 <= dropout_rate < 1.0:
            raise ArgumentError(f"dropout_rate must lie in [0, 1), got {dropout_rate}")
        if not fg_weight > 0:
            raise ArgumentError(f"fg_weight must be > 0, got {fg_weight}")
        self.arch = arch
        self.base_channels = base_channels
        self.depth = depth
        self.recurrence_steps = recurrence_steps
        self.residual = residual
        self.attention = attention
        self.fg_weight = float(fg_weight)
        self.in_channels = in_channels

        chs = [base_channels * 2**i for i in range(depth + 1)]
        self.encoders = nn.ModuleList(
            R2Block(in_channels if i == 0 else chs[i - 1], chs[i], recurrence_steps, residual)
            for i in range(depth + 1)
        )
        self.ups = nn.ModuleList(
            nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), conv_unit(chs[i], chs[i - 1]))
            for i in range(depth, 0, -1)
        )
        self.gates = nn.ModuleList(
            AttentionGate(chs[i - 1], chs[i - 1], max(chs[i - 1] // 2, 1))
            for i in range(depth, 0, -1)
        ) if attention else None
        self.decoders = nn.ModuleList(
            R2Block(2 * chs[i - 1], chs[i - 1], recurrence_steps, residual)
            for i in range(depth, 0, -1)
        )
        self.dropout = nn.Dropout(dropout_rate)
        self.final = nn.Conv2d(chs[0], 1, 1)

    @property
    def dropout_rate(self):
        return self.dropout.p

    def config(self):
        return {
            "arch": self.arch,
            "base_channels": self.base_channels,
            "depth": self.depth,
            "recurrence_steps": self.recurrence_steps,
            "residual": self.residual,
            "attention": self.attention,
            "dropout_rate": self.dropout_rate,
            "fg_weight": self.fg_weight,
            "in_channels": self.in_channels,
        }

    def check_shape(self, x):
        div = 2**self.depth
        h, w = x.shape[-2:]
        if h % div or w % div:
            raise ArgumentError(
                f"input size {(h, w)} must be divisible by 2**depth = {div}"
            )

    def features(self, x):
        """Decoder output just before dropout and the final convolution."""
        self.check_shape(x)
        skips = []
        h = x
        for i, enc in enumerate(self.encoders):
            if i:
                h = F.max_pool2d(h, 2)
            h = enc(h)
            skips.append(h)
        h = skips.pop()
        for j, (up, dec) in enumerate(zip(self.ups, self.decoders)):
            g = up(h)
            skip = skips.pop()
            if self.gates is not None:
                skip = self.gates[j](g, skip)
            h = dec(torch.cat([skip, g], dim=1))
        return h

    def head(self, feats):
        return self.final(self.dropout(feats))

    def forward(self, x):
        """Logits, shape (N, 1, H, W)."""
        return self.head(self.features(x))


def _set_dropout(model, active, rate=None):
    model.eval()
    model.dropout.train(active)
    if rate is not None:
        model.dropout.p = float(rate)


def seg_forward(x, params, dropout_active=False, seed=0):
    """Foreground probability map in [0, 1]; deterministic given the seed."""
    numpy_in = not isinstance(x, torch.Tensor)
    xt = require_finite(as_tensor(x), "x")
    params.check_shape(xt)
    was_training = params.training
    _set_dropout(params, dropout_active)
    try:
        with torch.random.fork_rng(devices=[]), torch.no_grad():
            torch.manual_seed(int(seed))
            prob = torch.sigmoid(params(xt))
    finally:
        params.train(was_training)
    return prob.numpy()[0, 0] if numpy_in else prob


def weighted_ce(prob, target, fg_weight=30.0, eps=EPS):
    """Mean of ``-[w y log p + (1 - y) log(1 - p)]`` with ``p`` clamped to [eps, 1 - eps].

    Tensors in, tensor out (differentiable); arrays in, float out.
    """
    numpy_in = not isinstance(prob, torch.Tensor)
    if numpy_in:
        check_same_shape(prob, target, ("prob", "target"))
        p = torch.as_tensor(np.asarray(prob, dtype=np.float64))
        y = torch.as_tensor(check_mask(target, "target").astype(np.float64))
    else:
        if prob.shape != target.shape:
            raise ArgumentError(
                f"shape mismatch: prob {tuple(prob.shape)} vs target {tuple(target.shape)}"
            )
        p, y = prob, target.to(prob.dtype)
    if not fg_weight > 0:
        raise ArgumentError(f"fg_weight must be > 0, got {fg_weight}")
    p = p.clamp(eps, 1.0 - eps)
    loss = -(fg_weight * y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()
    return float(loss) if numpy_in else loss


@dataclass
class PredictionBundle:
    mean_prob: np.ndarray
    variance: np.ndarray
    mask: np.ndarray
    passes: int
    threshold: float = 0.5
    samples: np.ndarray | None = None


def mc_predict(x, params, passes=10, dropout_rate=None, threshold=0.5, seed=0,
               keep_samples=False):
    """Monte-Carlo dropout prediction.

    Runs ``passes`` stochastic forward passes with dropout active (rate
    ``dropout_rate``, or the model's own rate when None) and returns the mean
    probability, the per-pixel population variance and the thresholded mean.
    """
    if passes < 1:
        raise ArgumentError(f"passes must be >= 1, got {passes}")
    xt = require_finite(as_tensor(x), "x")
    if xt.shape[0] != 1:
        raise ArgumentError("mc_predict takes a single image")
    params.check_shape(xt)
    was_training, old_rate = params.training, params.dropout.p
    _set_dropout(params, True, dropout_rate)
    try:
        with torch.random.fork_rng(devices=[]), torch.no_grad():
            torch.manual_seed(int(seed))
            feats = params.features(xt)
            samples = np.stack([
                torch.sigmoid(params.head(feats)).numpy()[0, 0] for _ in range(passes)
            ]).astype(np.float64)
    finally:
        params.dropout.p = old_rate
        params.train(was_training)
    mean = samples.mean(axis=0)
    var = samples.var(axis=0)
    return PredictionBundle(
        mean_prob=mean,
        variance=var,
        mask=(mean > threshold).astype(np.uint8),
        passes=passes,
        threshold=threshold,
        samples=samples if keep_samples else None,
    )


def uncertainty_region(bundle, reference=None):
    region = bundle.mask.astype(bool)
    if reference is not None:
        ref = check_mask(getattr(reference, "pixels", reference), "reference")
        region = region | ref.astype(bool)
    return region


def slice_uncertainty(bundle, reference=None):
    """Mean variance over the union of predicted and reference foreground.

    An empty union yields 0.0 and a DegenerateUncertaintyWarning.
    """
    region = uncertainty_region(bundle, reference)
    if not region.any():
        warnings.warn("empty foreground union; uncertainty set to 0",
                      DegenerateUncertaintyWarning, stacklevel=2)
        return 0.0
    return float(np.asarray(bundle.variance)[region].mean())
