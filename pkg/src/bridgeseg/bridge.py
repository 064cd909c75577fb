"""Unpaired Schrödinger-bridge translation from the MRI domain to the CT domain.

The transport from source to target is split over a time grid
``0 = t_0 < ... < t_N = 1``. At step ``i`` a time-conditional generator
predicts the target endpoint ``x1_hat`` from the current state ``x_t``, and
the next state is drawn from the Brownian bridge between ``x_t`` and
``x1_hat``. Training minimizes, per sampled step,

    total = adv + lambda_sb * sb + lambda_reg * reg

with a least-squares adversarial term against a time-conditional patch
discriminator, a (1 - t)-weighted quadratic transport cost, and a
patch-contrastive content regularizer between the source and the prediction.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ArgumentError, NumericError
from .phantom import Domain, ImageSlice
from .validation import as_tensor, require_finite


@dataclass(frozen=True)
class TimeSchedule:
    times: tuple
    tau: float = 0.01

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", times)
        if len(times) < 2:
            raise ArgumentError("a schedule needs at least the endpoints 0 and 1")
        if times[0] != 0.0 or times[-1] != 1.0:
            raise ArgumentError(f"schedule must start at 0 and end at 1, got {times}")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ArgumentError(f"schedule times must be strictly increasing: {times}")
        if not self.tau > 0:
            raise ArgumentError(f"tau must be > 0, got {self.tau}")

    @property
    def N(self):
        return len(self.times) - 1

    def relative_step(self, i):
        """Fraction of the remaining bridge covered by step ``i`` -> ``i + 1``."""
        t0, t1 = self.times[i], self.times[i + 1]
        return (t1 - t0) / (1.0 - t0)

    def to_dict(self):
        return {"times": list(self.times), "tau": self.tau}


@dataclass(frozen=True)
class SBLossWeights:
    lambda_sb: float = 1.0
    lambda_reg: float = 1.0

    def __post_init__(self):
        if self.lambda_sb < 0 or self.lambda_reg < 0:
            raise ArgumentError("loss weights must be non-negative")


def make_schedule(N=5, tau=0.01, times=None):
    if times is not None:
        return TimeSchedule(tuple(times), tau)
    if N < 1:
        raise ArgumentError(f"N must be >= 1, got {N}")
    if not tau > 0:
        raise ArgumentError(f"tau must be > 0, got {tau}")
    # i / N keeps the endpoints exact
    return TimeSchedule(tuple(i / N for i in range(N + 1)), tau)


def _bridge(x0, x1, t, tau, generator):
    if t == 0.0:
        return x0.clone()
    if t == 1.0:
        return x1.clone()
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    return (1.0 - t) * x0 + t * x1 + math.sqrt(tau * t * (1.0 - t)) * eps


def sample_bridge(x0, x1_hat, t, tau, seed=0, generator=None):
    """Draw ``x_t = (1-t) x0 + t x1_hat + sqrt(tau t (1-t)) eps``.

    Accepts numpy arrays or tensors and returns the same kind. Noise comes
    from ``generator`` when given, otherwise from a generator seeded with
    ``seed``.
    """
    if not 0.0 <= t <= 1.0:
        raise ArgumentError(f"t must lie in [0, 1], got {t}")
    if tuple(np.shape(x0)) != tuple(np.shape(x1_hat)):
        raise ArgumentError(
            f"shape mismatch: x0 {tuple(np.shape(x0))} vs x1_hat {tuple(np.shape(x1_hat))}"
        )
    numpy_in = not isinstance(x0, torch.Tensor)
    a = torch.as_tensor(np.asarray(x0)) if numpy_in else x0
    b = torch.as_tensor(np.asarray(x1_hat)) if numpy_in else x1_hat
    b = b.to(a.dtype)
    if generator is None:
        generator = torch.Generator().manual_seed(int(seed))
    out = _bridge(a, b, float(t), float(tau), generator)
    return out.numpy() if numpy_in else out


def _time_features(t, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype) / half)
    angles = t[:, None] * freqs[None, :] * 10.0
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class TimeEmbedding(nn.Module):
    def __init__(self, dim=64):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        return self.mlp(_time_features(t, self.dim))


def _time_tensor(t, batch, like):
    if isinstance(t, torch.Tensor):
        t = t.to(like.dtype).reshape(-1)
        return t.expand(batch) if t.numel() == 1 else t
    return torch.full((batch,), float(t), dtype=like.dtype)


class ResnetBlock(nn.Module):
    """Residual block whose first activation is shifted by a time embedding."""

    def __init__(self, channels, temb_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect")
        self.norm1 = nn.InstanceNorm2d(channels, affine=True)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect")
        self.norm2 = nn.InstanceNorm2d(channels, affine=True)
        self.time_proj = nn.Linear(temb_dim, channels)

    def forward(self, x, temb):
        h = self.norm1(self.conv1(x)) + self.time_proj(temb)[:, :, None, None]
        h = self.norm2(self.conv2(F.relu(h)))
        return x + h


class ResnetGenerator(nn.Module):
    """Time-conditional ResNet generator (stem, 2 downsamplings, residual trunk, tanh head)."""

    def __init__(self, in_channels=1, base_channels=16, n_res_blocks=4, n_down=2,
                 temb_dim=64, nce_dim=64):
        super().__init__()
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.n_res_blocks = n_res_blocks
        self.n_down = n_down
        self.temb_dim = temb_dim
        self.nce_dim = nce_dim

        self.time_embed = TimeEmbedding(temb_dim)
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, base_channels, 7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(base_channels, affine=True),
            nn.ReLU(),
        )
        down, ch = [], base_channels
        for _ in range(n_down):
            down.append(nn.Sequential(
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2, affine=True),
                nn.ReLU(),
            ))
            ch *= 2
        self.down = nn.ModuleList(down)
        self.blocks = nn.ModuleList(ResnetBlock(ch, temb_dim) for _ in range(n_res_blocks))
        up = []
        for _ in range(n_down):
            up.append(nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, ch // 2, 3, padding=1),
                nn.InstanceNorm2d(ch // 2, affine=True),
                nn.ReLU(),
            ))
            ch //= 2
        self.up = nn.ModuleList(up)
        self.head = nn.Conv2d(ch, in_channels, 7, padding=3, padding_mode="reflect")
        # projection heads for the contrastive regularizer, one per encoder level
        self.nce_heads = nn.ModuleList(
            nn.Sequential(nn.Linear(c, nce_dim), nn.ReLU(), nn.Linear(nce_dim, nce_dim))
            for c in [base_channels * 2 ** k for k in range(n_down + 1)])

    def config(self):
        return {
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "n_res_blocks": self.n_res_blocks,
            "n_down": self.n_down,
            "temb_dim": self.temb_dim,
            "nce_dim": self.nce_dim,
        }

    def encode(self, x):
        """Time-independent encoder features used by the contrastive regularizer."""
        feats = [self.stem(x)]
        for layer in self.down:
            feats.append(layer(feats[-1]))
        return feats

    def forward(self, x, t):
        H, W = x.shape[-2:]
        div = 2 ** self.n_down
        ph, pw = -H % div, -W % div
        if ph or pw:  # any input size: pad up to the stride multiple, crop after
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        h = self.encode(x)[-1]
        temb = self.time_embed(_time_tensor(t, x.shape[0], x))
        for block in self.blocks:
            h = block(h, temb)
        for layer in self.up:
            h = layer(h)
        return torch.tanh(self.head(h))[..., :H, :W]


class PatchDiscriminator(nn.Module):
    """Time-conditional PatchGAN; the score map is downsampled by ``2 ** n_layers``.

    With ``spectral_norm`` every convolution is spectrally normalized and the
    instance norms are dropped.
    """

    def __init__(self, in_channels=1, base_channels=16, n_layers=3, temb_dim=64,
                 spectral_norm=True):
        super().__init__()
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.n_layers = n_layers
        self.temb_dim = temb_dim
        self.spectral_norm = spectral_norm
        sn = nn.utils.parametrizations.spectral_norm if spectral_norm else (lambda m: m)

        self.time_embed = TimeEmbedding(temb_dim)
        self.first = sn(nn.Conv2d(in_channels, base_channels, 4, stride=2, padding=1))
        convs, norms, projs = [], [], []
        ch = base_channels
        for _ in range(n_layers - 1):
            convs.append(sn(nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1)))
            norms.append(nn.Identity() if spectral_norm
                         else nn.InstanceNorm2d(ch * 2, affine=True))
            projs.append(nn.Linear(temb_dim, ch * 2))
            ch *= 2
        self.convs = nn.ModuleList(convs)
        self.norms = nn.ModuleList(norms)
        self.time_projs = nn.ModuleList(projs)
        self.time_first = nn.Linear(temb_dim, base_channels)
        self.out = sn(nn.Conv2d(ch, 1, 3, padding=1))

    @property
    def downsample_factor(self):
        return 2 ** self.n_layers

    def config(self):
        return {
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "n_layers": self.n_layers,
            "temb_dim": self.temb_dim,
            "spectral_norm": self.spectral_norm,
        }

    def forward(self, x, t):
        temb = self.time_embed(_time_tensor(t, x.shape[0], x))
        h = F.leaky_relu(self.first(x) + self.time_first(temb)[:, :, None, None], 0.2)
        for conv, norm, proj in zip(self.convs, self.norms, self.time_projs):
            h = norm(conv(h)) + proj(temb)[:, :, None, None]
            h = F.leaky_relu(h, 0.2)
        return self.out(h)


def _check_input(x, name):
    if not isinstance(x, torch.Tensor) and not np.all(np.isfinite(np.asarray(x))):
        raise NumericError(f"{name} contains non-finite values", component=name)
    t = as_tensor(x)
    return require_finite(t, name)


def generator_forward(x_t, t, phi):
    """Predict the target-domain endpoint for state ``x_t`` at time ``t``.

    Numpy input (2D) gives a 2D numpy output; tensors pass through batched.
    """
    if not 0.0 <= float(t) <= 1.0:
        raise ArgumentError(f"t must lie in [0, 1], got {t}")
    numpy_in = not isinstance(x_t, torch.Tensor)
    x = _check_input(x_t, "x_t")
    if numpy_in:
        with torch.no_grad():
            return phi(x, float(t)).numpy()[0, 0]
    return phi(x, float(t))


def discriminator_forward(x, t, d):
    numpy_in = not isinstance(x, torch.Tensor)
    xt = _check_input(x, "x")
    if numpy_in:
        with torch.no_grad():
            return d(xt, float(t)).numpy()[0, 0]
    return d(xt, float(t))


@torch.no_grad()
def simulate_chain(x0, phi, schedule, t_index, generator):
    """Run the stochastic chain from ``x0`` up to time ``t_{t_index}`` (no gradient)."""
    x = x0
    for i in range(t_index):
        x1_hat = phi(x, schedule.times[i])
        x = _bridge(x, x1_hat, schedule.relative_step(i), schedule.tau, generator)
    return x


def patch_nce(phi, source, prediction, n_patches=64, temperature=0.07, generator=None):
    """Patch-contrastive loss between encoder features of ``source`` and ``prediction``.

    For every encoder layer, projected features at ``n_patches`` random
    locations of the prediction must match the source feature at the same
    location against the other sampled locations (InfoNCE). Gradients flow
    through both sides, so the loss is an exact function of the parameters.
    Always >= 0.
    """
    f_src = phi.encode(source)
    f_pred = phi.encode(prediction)
    losses = []
    for fs, fp, proj in zip(f_src, f_pred, phi.nce_heads):
        b, c, h, w = fs.shape
        n = min(n_patches, h * w)
        idx = torch.randperm(h * w, generator=generator)[:n]
        ks = F.normalize(proj(fs.flatten(2)[:, :, idx].transpose(1, 2)), dim=2)  # (b, n, d)
        qs = F.normalize(proj(fp.flatten(2)[:, :, idx].transpose(1, 2)), dim=2)
        logits = torch.bmm(qs, ks.transpose(1, 2)) / temperature  # (b, n, n)
        target = torch.arange(n).expand(b, n)
        losses.append(F.cross_entropy(logits.reshape(b * n, n), target.reshape(-1)))
    return torch.stack(losses).mean()


@dataclass
class UNSBTerms:
    total: torch.Tensor
    adv: torch.Tensor
    sb: torch.Tensor
    reg: torch.Tensor
    x_t: torch.Tensor
    x1_hat: torch.Tensor
    t_index: int

    @property
    def components(self):
        return {"adv": self.adv, "sb": self.sb, "reg": self.reg}

    def as_floats(self):
        return {
            "adv": self.adv.item(),
            "sb": self.sb.item(),
            "reg": self.reg.item(),
            "total": self.total.item(),
        }


def unsb_loss(batch, phi, d, schedule, weights, t_index, nce_patches=64):
    """Generator objective at step ``t_index``.

    ``batch`` holds ``x0`` (source images, N x 1 x H x W), an integer ``seed``
    for the bridge noise and patch sampling, and optionally a precomputed
    chain state ``x_t``; otherwise the chain is simulated from ``x0`` without
    gradient. With target images ``x1`` in the batch the regularizer also
    includes the identity term: real targets sent through the same chain
    (or the precomputed ``x1_t``) must keep their patch correspondence; the
    two terms are averaged. Components are float64 scalars so the logged total is exactly
    the weighted sum of the logged components.
    """
    if not 0 <= t_index < schedule.N:
        raise ArgumentError(f"t_index must lie in [0, {schedule.N - 1}], got {t_index}")
    x0 = batch["x0"]
    gen = torch.Generator().manual_seed(int(batch.get("seed", 0)))
    x_t = batch.get("x_t")
    if x_t is None:
        x_t = simulate_chain(x0, phi, schedule, t_index, gen)
    t = schedule.times[t_index]
    x1_hat = phi(x_t, t)

    adv = torch.mean((d(x1_hat, t) - 1.0) ** 2).double()
    sb = ((1.0 - t) * torch.mean((x1_hat - x_t) ** 2)).double()
    reg = patch_nce(phi, x0, x1_hat, n_patches=nce_patches, generator=gen)
    x1 = batch.get("x1")
    if x1 is not None:
        x1_t = batch.get("x1_t")
        if x1_t is None:
            x1_t = simulate_chain(x1, phi, schedule, t_index, gen)
        idt = phi(x1_t, t)
        reg = 0.5 * (reg + patch_nce(phi, x1, idt, n_patches=nce_patches, generator=gen))
    reg = reg.double()
    for name, value in (("adv", adv), ("sb", sb), ("reg", reg)):
        if not torch.isfinite(value):
            raise NumericError(f"loss component '{name}' is not finite", component=name)
    total = adv + weights.lambda_sb * sb + weights.lambda_reg * reg
    return UNSBTerms(total, adv, sb, reg, x_t, x1_hat, t_index)


def discriminator_loss(d, real, fake, t):
    """Least-squares discriminator objective; ``fake`` is detached here."""
    loss_real = torch.mean((d(real, t) - 1.0) ** 2)
    loss_fake = torch.mean(d(fake.detach(), t) ** 2)
    return 0.5 * (loss_real + loss_fake)


@torch.no_grad()
def translate_tensor(x, phi, schedule, seed=0):
    gen = torch.Generator().manual_seed(int(seed))
    return simulate_chain(x, phi, schedule, schedule.N, gen)


def translate(x_src, phi, schedule, seed=0):
    """Run the full chain on a source slice; returns a SYNTH_CT ImageSlice.

    Accepts an ImageSlice or a bare 2D array.
    """
    if not isinstance(schedule, TimeSchedule):
        raise ArgumentError("schedule must be a TimeSchedule")
    pixels = x_src.pixels if isinstance(x_src, ImageSlice) else x_src
    x = _check_input(pixels, "x_src")
    out = translate_tensor(x, phi, schedule, seed).numpy()[0, 0].astype(np.float32)
    if isinstance(x_src, ImageSlice):
        return ImageSlice(out, Domain.SYNTH_CT, x_src.subject_id, x_src.slice_index)
    return ImageSlice(out, Domain.SYNTH_CT, "", 0)
