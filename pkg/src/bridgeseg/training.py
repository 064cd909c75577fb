"""End-to-end and two-stage training, configuration and checkpoint archives.

End-to-end: every step draws a bridge time index, updates the discriminator,
then backpropagates ``L_UNSB + L_seg`` through generator and segmenter
jointly; the segmenter sees the generator's predicted target endpoint with
the source mask as label.

Two-stage: the translator is trained alone, frozen, used to translate every
source slice, and the segmenter is trained on those synthetic images with
its own optimizer.
"""

import csv
import dataclasses
import io
import json
import os
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .bridge import (
    PatchDiscriminator,
    ResnetGenerator,
    SBLossWeights,
    discriminator_loss,
    make_schedule,
    simulate_chain,
    translate_tensor,
    unsb_loss,
)
from .exceptions import ArgumentError, CheckpointError, ContractError, FormatError
from .phantom import Domain, domain_arrays, load_dataset, masks_for
from .segment import SegNet, weighted_ce

CHECKPOINT_VERSION = 1
MODES = ("E2E", "TWO_STAGE")

E2E_COLUMNS = ["step", "epoch", "t_index", "adv", "sb", "reg", "total", "seg",
               "e2e_total", "disc"]
TRANSLATION_COLUMNS = ["step", "epoch", "t_index", "adv", "sb", "reg", "total", "disc"]
SEGMENTATION_COLUMNS = ["step", "epoch", "seg"]


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "E2E"
    epochs: int = 15
    lr: float = 2e-4
    batch_size: int = 1
    seed: int = 0
    schedule: dict = field(default_factory=lambda: {"N": 5, "tau": 0.01})
    weights: dict = field(default_factory=lambda: {"lambda_sb": 1.0, "lambda_reg": 1.0})
    seg_arch: str = "R2AUNET"
    fg_weight: float = 30.0
    recurrence_steps: int = 2
    seg_base_channels: int = 16
    seg_depth: int = 4
    dropout_rate: float = 0.5
    gen_base_channels: int = 16
    n_res_blocks: int = 4
    disc_base_channels: int = 16
    disc_layers: int = 3
    betas: tuple = (0.5, 0.999)
    nce_patches: int = 64
    checkpoint_every: int = 5
    translation_epochs: int | None = None
    seg_augment: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mode", str(self.mode).upper().replace("-", "_"))
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "seg_arch", str(self.seg_arch).upper())
        if self.mode not in MODES:
            raise ArgumentError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lr > 0:
            raise ArgumentError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ArgumentError("epochs must be >= 1")
        if self.checkpoint_every < 1:
            raise ArgumentError("checkpoint_every must be >= 1")
        make_schedule(**self.schedule)
        SBLossWeights(**self.weights)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ArgumentError(f"unknown config keys: {unknown}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {path} is not valid JSON: {exc}") from exc

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def make_schedule(self):
        return make_schedule(**self.schedule)

    def loss_weights(self):
        return SBLossWeights(**self.weights)


@dataclass
class ExperimentRecord:
    config: dict
    mode: str
    epoch_losses: list = field(default_factory=list)
    stage_losses: dict = field(default_factory=dict)
    checkpoints: list = field(default_factory=list)
    loss_logs: list = field(default_factory=list)
    n_synthetic: int | None = None
    wall_clock_s: float = 0.0
    version: str = __version__

    def to_dict(self):
        return dataclasses.asdict(self)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


@dataclass
class Models:
    generator: ResnetGenerator
    discriminator: PatchDiscriminator
    segmenter: SegNet

    def as_dict(self):
        return {"generator": self.generator, "discriminator": self.discriminator,
                "segmenter": self.segmenter}


def build_models(config):
    """Seeded construction of the three networks described by ``config``."""
    torch.manual_seed(config.seed)
    g = ResnetGenerator(base_channels=config.gen_base_channels,
                        n_res_blocks=config.n_res_blocks)
    d = PatchDiscriminator(base_channels=config.disc_base_channels,
                           n_layers=config.disc_layers)
    s = SegNet(arch=config.seg_arch, base_channels=config.seg_base_channels,
               depth=config.seg_depth, recurrence_steps=config.recurrence_steps,
               dropout_rate=config.dropout_rate, fg_weight=config.fg_weight)
    return Models(g, d, s)


MODEL_CLASSES = {"generator": ResnetGenerator, "discriminator": PatchDiscriminator,
                 "segmenter": SegNet}


# ---------------------------------------------------------------- checkpoints

def _zip_write(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_checkpoint(path, models, config):
    """Write a single zip archive: ``checkpoint.json`` plus one ``.npy`` per tensor.

    The write goes to a temporary file that is atomically renamed.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    models = models.as_dict() if isinstance(models, Models) else dict(models)
    cfg = config.to_dict() if isinstance(config, TrainConfig) else dict(config)
    meta = {"version": CHECKPOINT_VERSION, "package_version": __version__,
            "config": cfg, "architectures": {}, "tensors": {}}
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        for name, model in sorted(models.items()):
            meta["architectures"][name] = model.config()
            state = model.state_dict()
            meta["tensors"][name] = list(state)
            for key, tensor in state.items():
                buf = io.BytesIO()
                np.save(buf, tensor.detach().cpu().numpy(), allow_pickle=False)
                _zip_write(zf, f"tensors/{name}/{key}.npy", buf.getvalue())
        _zip_write(zf, "checkpoint.json", json.dumps(meta, indent=2, sort_keys=True))
    os.replace(tmp, path)
    return path


def _read_meta(zf, path):
    try:
        meta = json.loads(zf.read("checkpoint.json"))
    except KeyError as exc:
        raise CheckpointError(f"{path}: archive has no checkpoint.json") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: checkpoint.json is corrupt: {exc}") from exc
    if "version" not in meta:
        raise CheckpointError(f"{path}: checkpoint has no version field")
    if meta["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {meta['version']} is not supported "
            f"(expected {CHECKPOINT_VERSION}); migrate the archive first"
        )
    return meta


def load_state_checked(model, state, model_name="model"):
    """Load ``state`` into ``model``, naming the first mismatching layer on failure."""
    own = model.state_dict()
    for key in own:
        if key not in state:
            raise CheckpointError(f"{model_name}: layer '{key}' missing from checkpoint",
                                  layer=key)
        if tuple(state[key].shape) != tuple(own[key].shape):
            raise CheckpointError(
                f"{model_name}: layer '{key}' has shape {tuple(state[key].shape)} in the "
                f"checkpoint but {tuple(own[key].shape)} in the model", layer=key)
    extra = [k for k in state if k not in own]
    if extra:
        raise CheckpointError(f"{model_name}: unexpected layer '{extra[0]}' in checkpoint",
                              layer=extra[0])
    model.load_state_dict(state)
    return model


def load_checkpoint(path, models=None):
    """Restore a checkpoint archive.

    Without ``models`` the networks are rebuilt from the stored architecture
    configs. With ``models`` (a Models or name->module mapping) the stored
    tensors are loaded into them, with a CheckpointError naming the first
    layer that does not match. Returns ``(Models, config dict)``.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint archive") from exc
    with zf:
        meta = _read_meta(zf, path)
        targets = models.as_dict() if isinstance(models, Models) else models
        built = {}
        for name, arch in meta["architectures"].items():
            if targets is not None:
                if name not in targets:
                    raise CheckpointError(f"{path}: no target model for '{name}'")
                model = targets[name]
            else:
                model = MODEL_CLASSES[name](**arch)
            state = {}
            for key in meta["tensors"][name]:
                try:
                    raw = zf.read(f"tensors/{name}/{key}.npy")
                    state[key] = torch.from_numpy(np.load(io.BytesIO(raw), allow_pickle=False))
                except (KeyError, ValueError, zipfile.BadZipFile) as exc:
                    raise CheckpointError(f"{path}: tensor {name}/{key} unreadable",
                                          layer=key) from exc
            built[name] = load_state_checked(model, state, name)
    return Models(built["generator"], built["discriminator"], built["segmenter"]), meta["config"]


# ------------------------------------------------------------------ data prep

def resolve_training_data(data):
    """Return ``(X_src, Y_src, X_tgt)`` arrays from a directory or (slices, masks, manifest).

    Enforces the label-hygiene and unpaired contracts of the manifest.
    """
    if isinstance(data, (str, os.PathLike)):
        slices, masks, manifest = load_dataset(data)
    else:
        slices, masks, manifest = data
    manifest.check_label_hygiene()
    manifest.check_unpaired()
    ct_keys = {(e.subject_id, e.slice_index) for e in manifest.entries
               if e.domain == Domain.CT}
    labeled_ct = [m.key for m in masks if m.key in ct_keys]
    mri_keys = {(e.subject_id, e.slice_index) for e in manifest.entries
                if e.domain == Domain.MRI}
    if any(k not in mri_keys for k in labeled_ct):
        raise ContractError(f"target-domain masks supplied for CT slices {labeled_ct[:5]}")
    X_src, keys = domain_arrays(slices, Domain.MRI)
    X_tgt, _ = domain_arrays(slices, Domain.CT)
    if len(keys) == 0 or X_tgt.shape[0] == 0:
        raise ArgumentError("training needs MRI (labeled) and CT (unlabeled) slices")
    return X_src, masks_for(keys, masks), X_tgt


def _batch(arr, idx):
    return torch.from_numpy(np.ascontiguousarray(arr[idx], dtype=np.float32))[:, None]


def _seg_augment(x, seed):
    """Random gain, offset and Gaussian noise on the segmenter input.

    Keeps the segmenter from keying on the exact contrast of the synthetic
    images; differentiable in ``x`` so E2E gradients still reach the generator.
    """
    gen = torch.Generator().manual_seed(int(seed))
    b = x.shape[0]
    gain = 0.7 + 0.6 * torch.rand(b, 1, 1, 1, generator=gen)
    offset = 0.4 * torch.rand(b, 1, 1, 1, generator=gen) - 0.2
    sigma = 0.08 * torch.rand(b, 1, 1, 1, generator=gen)
    noise = torch.randn(x.shape, generator=gen)
    return gain * x + offset + sigma * noise


def _adam(params, config):
    return torch.optim.Adam(params, lr=config.lr, betas=config.betas)


class _LossLog:
    def __init__(self, columns):
        self.columns = columns
        self.rows = []

    def add(self, **row):
        self.rows.append([row[c] for c in self.columns])

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for row in self.rows:
                w.writerow([repr(v) if isinstance(v, float) else v for v in row])

    def epoch_means(self, epoch_col="epoch", skip=("step", "epoch", "t_index")):
        ei = self.columns.index(epoch_col)
        out = {}
        for row in self.rows:
            out.setdefault(row[ei], []).append(row)
        means = []
        for epoch, rows in sorted(out.items()):
            m = {"epoch": epoch}
            for j, c in enumerate(self.columns):
                if c not in skip:
                    m[c] = float(np.mean([r[j] for r in rows]))
            means.append(m)
        return means


def _discriminator_step(models, opt_d, x0, x1, schedule, t_index, step_seed):
    gen = torch.Generator().manual_seed(step_seed)
    x_t = simulate_chain(x0, models.generator, schedule, t_index, gen)
    t = schedule.times[t_index]
    with torch.no_grad():
        fake = models.generator(x_t, t)
    opt_d.zero_grad()
    loss = discriminator_loss(models.discriminator, x1, fake, t)
    loss.backward()
    opt_d.step()
    return x_t, float(loss.detach())


def _checkpoint_due(epoch, config, n_epochs):
    return (epoch + 1) % config.checkpoint_every == 0 or epoch + 1 == n_epochs


def fit_e2e(X_src, Y_src, X_tgt, config, out_dir=None, models=None):
    """Joint training on arrays; returns ``(Models, ExperimentRecord)``."""
    start = time.perf_counter()
    config = config if config.mode == "E2E" else config.replace(mode="E2E")
    models = models or build_models(config)
    schedule, weights = config.make_schedule(), config.loss_weights()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    g, d, s = models.generator, models.discriminator, models.segmenter
    opt_d = _adam(d.parameters(), config)
    opt_g = _adam(g.parameters(), config)
    opt_s = _adam(s.parameters(), config)
    record = ExperimentRecord(config=config.to_dict(), mode="E2E")
    log = _LossLog(E2E_COLUMNS)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    g.train(), d.train(), s.train()

    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(X_src))
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size]
            tgt_idx = rng.integers(len(X_tgt), size=len(idx))
            t_index = int(rng.integers(schedule.N))
            step_seed = int(rng.integers(2**31 - 1))
            x0, x1 = _batch(X_src, idx), _batch(X_tgt, tgt_idx)
            y = _batch(Y_src, idx)

            x_t, d_loss = _discriminator_step(models, opt_d, x0, x1, schedule, t_index,
                                              step_seed)
            d.requires_grad_(False)
            opt_g.zero_grad()
            opt_s.zero_grad()
            terms = unsb_loss({"x0": x0, "x1": x1, "x_t": x_t, "seed": step_seed}, g, d, schedule,
                              weights, t_index, nce_patches=config.nce_patches)
            seg_in = _seg_augment(terms.x1_hat, step_seed + 1) if config.seg_augment else terms.x1_hat
            prob = torch.sigmoid(s(seg_in))
            seg = weighted_ce(prob, y, config.fg_weight).double()
            total = terms.total + seg
            total.backward()
            opt_g.step()
            opt_s.step()
            d.requires_grad_(True)

            f = terms.as_floats()
            log.add(step=step, epoch=epoch + 1, t_index=t_index, adv=f["adv"], sb=f["sb"],
                    reg=f["reg"], total=f["total"], seg=seg.item(),
                    e2e_total=total.item(), disc=d_loss)
            step += 1
        if out is not None and _checkpoint_due(epoch, config, config.epochs):
            ckpt = save_checkpoint(out / f"checkpoint_e{epoch + 1:03d}.ckpt", models, config)
            record.checkpoints.append(str(ckpt))
            log.write(out / "loss.csv")

    record.epoch_losses = log.epoch_means()
    if out is not None:
        log.write(out / "loss.csv")
        record.loss_logs = [str(out / "loss.csv")]
    record.wall_clock_s = time.perf_counter() - start
    if out is not None:
        record.save(out / "experiment.json")
    g.eval(), d.eval(), s.eval()
    return models, record


def fit_two_stage(X_src, Y_src, X_tgt, config, out_dir=None, models=None):
    """Translator first, then the segmenter on the frozen translator's outputs."""
    start = time.perf_counter()
    config = config if config.mode == "TWO_STAGE" else config.replace(mode="TWO_STAGE")
    models = models or build_models(config)
    schedule, weights = config.make_schedule(), config.loss_weights()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    g, d, s = models.generator, models.discriminator, models.segmenter
    record = ExperimentRecord(config=config.to_dict(), mode="TWO_STAGE")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    # stage 1: translation only
    opt_d = _adam(d.parameters(), config)
    opt_g = _adam(g.parameters(), config)
    tlog = _LossLog(TRANSLATION_COLUMNS)
    g.train(), d.train()
    n_trans = config.translation_epochs or config.epochs
    step = 0
    for epoch in range(n_trans):
        order = rng.permutation(len(X_src))
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size]
            tgt_idx = rng.integers(len(X_tgt), size=len(idx))
            t_index = int(rng.integers(schedule.N))
            step_seed = int(rng.integers(2**31 - 1))
            x0, x1 = _batch(X_src, idx), _batch(X_tgt, tgt_idx)
            x_t, d_loss = _discriminator_step(models, opt_d, x0, x1, schedule, t_index,
                                              step_seed)
            d.requires_grad_(False)
            opt_g.zero_grad()
            terms = unsb_loss({"x0": x0, "x1": x1, "x_t": x_t, "seed": step_seed}, g, d, schedule,
                              weights, t_index, nce_patches=config.nce_patches)
            terms.total.backward()
            opt_g.step()
            d.requires_grad_(True)
            f = terms.as_floats()
            tlog.add(step=step, epoch=epoch + 1, t_index=t_index, adv=f["adv"], sb=f["sb"],
                     reg=f["reg"], total=f["total"], disc=d_loss)
            step += 1

    # stage 2: frozen translator, segmentation on all synthetic images
    g.eval(), d.eval()
    g.requires_grad_(False)
    synth_seed = int(rng.integers(2**31 - 1))
    synth = np.stack([
        translate_tensor(_batch(X_src, [i]), g, schedule, seed=synth_seed + i).numpy()[0, 0]
        for i in range(len(X_src))
    ])
    record.n_synthetic = int(len(synth))
    opt_s = _adam(s.parameters(), config)
    slog = _LossLog(SEGMENTATION_COLUMNS)
    s.train()
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(synth))
        for b in range(0, len(order), config.batch_size):
            idx = order[b:b + config.batch_size]
            opt_s.zero_grad()
            seg_in = _batch(synth, idx)
            if config.seg_augment:
                seg_in = _seg_augment(seg_in, int(rng.integers(2**31 - 1)))
            prob = torch.sigmoid(s(seg_in))
            seg = weighted_ce(prob, _batch(Y_src, idx), config.fg_weight)
            seg.backward()
            opt_s.step()
            slog.add(step=step, epoch=epoch + 1, seg=seg.item())
            step += 1
        if out is not None and _checkpoint_due(epoch, config, config.epochs):
            ckpt = save_checkpoint(out / f"checkpoint_e{epoch + 1:03d}.ckpt", models, config)
            record.checkpoints.append(str(ckpt))
    g.requires_grad_(True)
    s.eval()

    record.stage_losses = {"translation": tlog.epoch_means(),
                           "segmentation": slog.epoch_means()}
    record.epoch_losses = slog.epoch_means()
    if out is not None:
        tlog.write(out / "translation_loss.csv")
        slog.write(out / "segmentation_loss.csv")
        record.loss_logs = [str(out / "translation_loss.csv"),
                            str(out / "segmentation_loss.csv")]
    record.wall_clock_s = time.perf_counter() - start
    if out is not None:
        record.save(out / "experiment.json")
    return models, record


def train_e2e(data, config, out_dir=None):
    """Joint training from a dataset directory or ``(slices, masks, manifest)``."""
    X_src, Y_src, X_tgt = resolve_training_data(data)
    return fit_e2e(X_src, Y_src, X_tgt, config, out_dir)


def train_two_stage(data, config, out_dir=None):
    X_src, Y_src, X_tgt = resolve_training_data(data)
    return fit_two_stage(X_src, Y_src, X_tgt, config, out_dir)


def train(data, config, out_dir=None):
    fn = train_e2e if config.mode == "E2E" else train_two_stage
    return fn(data, config, out_dir)
