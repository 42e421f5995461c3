"""Training, evaluation and the optimizer.

Training runs in two phases: first on 33 x 33 patches, then a fine-tune
phase on 99 x 99 patches at its own (lower) learning rate.  Every epoch
emits one ``key=value`` log line.  Each phase holds out a 10% slice of its
patch pool, chosen by a seeded shuffle, for validation; the checkpoint with
the best validation PSNR of the latest phase is kept next to the final one.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .imaging import crop, extract_patches, list_images, load_gray, pad_to_block, psnr, ssim
from .network import ModelConfig, init_params, model_forward, named_parameters
from .sensing import BLOCK, init_reconstruction, orth_loss, sample
from .tensor import ShapeError, Tensor


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteGradient(FloatingPointError):
    pass


# ------------------------------------------------------------------ config

@dataclass
class TrainConfig:
    ratio: float = 0.25
    stages: int = 3
    rank: int = 4
    channels: int = 16
    epochs: int = 20
    finetune_epochs: int = 10
    batch_size: int = 32
    finetune_batch_size: int = 8
    patch_size: int = 33
    finetune_patch_size: int = 99
    patch_stride: int = 33
    finetune_stride: int = 99
    max_patches: int = 2000
    finetune_patches: int = 100
    val_fraction: float = 0.1
    lr: float = 1e-3
    finetune_lr: float = 1e-4
    tau: float = 0.01
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/desk"

    def __post_init__(self):
        counts = ("stages", "rank", "channels", "epochs", "batch_size",
                  "finetune_batch_size", "patch_size", "finetune_patch_size",
                  "patch_stride", "finetune_stride", "max_patches", "finetune_patches")
        for name in counts:
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be non-negative")
        if self.tau < 0 or self.lr < 0 or self.finetune_lr < 0:
            raise ValueError("tau and learning rates must be non-negative")
        if not 0 < self.val_fraction < 1:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        for name in ("patch_size", "finetune_patch_size"):
            if getattr(self, name) % BLOCK:
                raise ValueError(f"{name} must be a multiple of {BLOCK}")

    def model_config(self):
        return ModelConfig(stages=self.stages, rank=self.rank,
                           channels=self.channels, ratio=self.ratio)

    @classmethod
    def from_mapping(cls, values):
        """Build from string (or typed) values; unknown keys are errors."""
        types = {f.name: type(f.default) for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            try:
                kwargs[key] = types[key](raw)
            except ValueError:
                raise ValueError(f"config key {key!r}: cannot parse {raw!r}") from None
        return cls(**kwargs)


def read_config_file(path):
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
    return values


# -------------------------------------------------------------------- loss

def total_loss(x_k, gt, op, tau):
    """Mean squared pixel error over the batch plus ``tau * orth_loss``."""
    x_k, gt = T.as_tensor(x_k), T.as_tensor(gt)
    if x_k.shape != gt.shape:
        raise ShapeError(f"reconstruction {x_k.shape} and ground truth {gt.shape} differ")
    d = x_k - gt
    fidelity = T.mul(T.tsum(T.mul(d, d)), 1.0 / d.size)
    if tau == 0:
        return fidelity
    return fidelity + T.mul(orth_loss(op), float(tau))


# -------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place.

    ``params`` maps names to tensors and is walked in its own order (for the
    network this is :func:`named_parameters` order).  A missing gradient
    counts as zero.  All gradients are checked before anything is touched.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    for name, t in params.items():
        g = grads.get(name)
        if g is not None:
            if np.shape(g) != t.shape:
                raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, "
                                 f"parameter {t.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradient(f"non-finite gradient for parameter {name}")
            # an overflowing second moment would silently freeze the parameter
            if np.size(g) and np.max(np.abs(g)) >= np.sqrt(np.finfo(t.dtype).max):
                raise NonFiniteGradient(f"gradient for parameter {name} overflows "
                                        f"its second moment")
    state.step += 1
    c1 = 1 - beta1 ** state.step
    c2 = 1 - beta2 ** state.step
    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(t.data)
            state.v[name] = np.zeros_like(t.data)
        v = state.v[name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        t.data = (t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(t.dtype)
    return params, state


# -------------------------------------------------------------------- data

def load_patches(paths, size, stride):
    """Patches of every image (padded to whole blocks), in file then grid order."""
    out = []
    for path in paths:
        img, _ = pad_to_block(load_gray(path))
        if min(img.shape) >= size:
            out.append(extract_patches(img, size, stride).patches)
    if not out:
        return np.zeros((0, size, size))
    return np.concatenate(out)


def split_patches(patches, val_fraction, seed, limit=None):
    """Seeded shuffle, optional truncation to ``limit``, then a validation
    slice of ``round(val_fraction * n)`` (at least 1) off the front."""
    perm = np.random.default_rng([seed, 7]).permutation(len(patches))
    if limit is not None:
        perm = perm[:limit]
    n_val = max(1, round(val_fraction * len(perm)))
    if len(perm) - n_val < 1:
        raise ValueError(f"{len(perm)} patches are too few to hold out a validation split")
    return patches[perm[n_val:]], patches[perm[:n_val]]


def _batch_tensor(patches, dtype):
    return Tensor(np.asarray(patches, dtype=dtype)[:, None])


def reconstruct_batch(params, patches):
    """x^K and the per-stage estimates (x0 first) for a stack of patches."""
    with T.no_grad():
        x = _batch_tensor(patches, params.op.phi.dtype)
        meas = sample(params.op, x)
        x_k, states = model_forward(meas, params)
        x0 = init_reconstruction(params.op, meas)
    return x_k.data[:, 0], [x0.data[:, 0]] + [s.x.data[:, 0] for s in states]


def mean_patch_psnr(params, patches, batch=32):
    vals = []
    for i in range(0, len(patches), batch):
        chunk = patches[i:i + batch]
        x_k, _ = reconstruct_batch(params, chunk)
        vals += [psnr(a, b) for a, b in zip(x_k, chunk)]
    return float(np.mean(vals))


# ------------------------------------------------------------------- train

def _run_epoch(params, state, patches, batch, lr, tau, rng):
    named = named_parameters(params)
    order = rng.permutation(len(patches))
    losses = []
    for i in range(0, len(order), batch):
        chunk = patches[order[i:i + batch]]
        x = _batch_tensor(chunk, params.op.phi.dtype)
        x_k, _ = model_forward(sample(params.op, x), params)
        loss = total_loss(x_k, x, params.op, tau)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss became {value}")
        T.zero_grad(named.values())
        T.backward(loss)
        try:
            adam_step(named, {k: t.grad for k, t in named.items()}, state, lr)
        except NonFiniteGradient as exc:
            raise TrainingDiverged(str(exc)) from None
        losses.append(value)
    T.zero_grad(named.values())
    return float(np.mean(losses))


def train(cfg, log=None, dtype=np.float32):
    """Run both phases and return the path of the final checkpoint.

    ``log`` receives each ``key=value`` line (default: stdout); lines are
    also appended to ``train.log`` in the output directory.  On divergence
    the best checkpoint written so far is left in place.
    """
    t_start = time.perf_counter()
    paths = list_images(cfg.data_dir)
    if not paths:
        raise ValueError(f"no images found in {cfg.data_dir}")
    pool = load_patches(paths, cfg.patch_size, cfg.patch_stride)
    if len(pool) == 0:
        raise ValueError(f"no {cfg.patch_size}x{cfg.patch_size} patches in {cfg.data_dir}")
    train_set, val_set = split_patches(pool, cfg.val_fraction, cfg.seed, cfg.max_patches)
    phases = [(1, train_set, val_set, cfg.epochs, cfg.batch_size, cfg.lr)]
    if cfg.finetune_epochs:
        # each phase validates on held-out patches of its own size
        fine_pool = load_patches(paths, cfg.finetune_patch_size, cfg.finetune_stride)
        if len(fine_pool) < 2:
            raise ValueError(f"fewer than two {cfg.finetune_patch_size}-pixel patches in "
                             f"{cfg.data_dir}; set finetune_epochs = 0 to skip fine-tuning")
        fine, fine_val = split_patches(fine_pool, cfg.val_fraction, cfg.seed)
        phases.append((2, fine[:cfg.finetune_patches], fine_val, cfg.finetune_epochs,
                       cfg.finetune_batch_size, cfg.finetune_lr))

    os.makedirs(cfg.out_dir, exist_ok=True)
    best_dir = os.path.join(cfg.out_dir, "best")
    final_dir = os.path.join(cfg.out_dir, "final")
    log_path = os.path.join(cfg.out_dir, "train.log")
    sink = log or (lambda line: print(line, flush=True))
    with open(log_path, "w", encoding="utf-8"):
        pass

    def emit(**fields):
        line = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                        for k, v in fields.items())
        sink(line)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")

    params = init_params(cfg.model_config(), cfg.seed, dtype=dtype)
    state = AdamState()
    emit(phase=0, epoch=0, train_patches=len(train_set), val_patches=len(val_set),
         finetune_patches=len(phases[-1][1]) if len(phases) > 1 else 0,
         finetune_val_patches=len(phases[-1][2]) if len(phases) > 1 else 0)
    for phase, patches, val_patches, epochs, batch, lr in phases:
        # best/ tracks the current phase; its start counts as a candidate
        best = val = mean_patch_psnr(params, val_patches, batch)
        save_checkpoint(best_dir, params, {"phase": phase, "epoch": 0, "val_psnr_db": best})
        emit(phase=phase, epoch=0, val_psnr_db=val)
        for epoch in range(1, epochs + 1):
            t0 = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, phase, epoch])
            try:
                loss = _run_epoch(params, state, patches, batch, lr, cfg.tau, rng)
            except TrainingDiverged as exc:
                emit(phase=phase, epoch=epoch, status="diverged")
                raise TrainingDiverged(f"phase {phase} epoch {epoch}: {exc}; "
                                       f"last good checkpoint kept at {best_dir}") from None
            val = mean_patch_psnr(params, val_patches, batch)
            with T.no_grad():
                orth = float(orth_loss(params.op).data)
            emit(phase=phase, epoch=epoch, train_loss=loss, val_psnr_db=val,
                 orth_loss=orth, seconds=time.perf_counter() - t0)
            if val > best:
                best = val
                save_checkpoint(best_dir, params,
                                {"phase": phase, "epoch": epoch, "val_psnr_db": val})
    save_checkpoint(final_dir, params, {"phase": len(phases), "val_psnr_db": val,
                                        "seconds": time.perf_counter() - t_start})
    return final_dir


# ---------------------------------------------------------------- evaluate

@dataclass
class MetricsReport:
    images: list
    psnr: list
    ssim: list
    stage_psnr: list           # per image: PSNR of x0, x1, ..., xK
    seconds: float = 0.0

    @property
    def mean_psnr(self):
        return math.fsum(self.psnr) / len(self.psnr)

    @property
    def mean_ssim(self):
        return math.fsum(self.ssim) / len(self.ssim)

    @property
    def mean_stage_psnr(self):
        return [math.fsum(col) / len(col) for col in zip(*self.stage_psnr)]

    def write_csv(self, path):
        """One row per (image, stage); stage 0 is the initial estimate."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh)
            out.writerow(["image", "psnr_db", "ssim", "stage", "psnr_stage_db"])
            for name, p, s, stages in zip(self.images, self.psnr, self.ssim, self.stage_psnr):
                for k, ps in enumerate(stages):
                    out.writerow([name, repr(float(p)), repr(float(s)), k, repr(float(ps))])


def reconstruct_image(params, image):
    """Pad, sample, reconstruct and crop one gray image.

    Returns the final estimate and the list of per-stage estimates, x0 first.
    """
    padded, dims = pad_to_block(image)
    _, stages = reconstruct_batch(params, padded[None])
    stages = [crop(s[0], dims).astype(np.float64) for s in stages]
    return stages[-1], stages


def evaluate_params(params, paths):
    t0 = time.perf_counter()
    names, ps, ss, stage_ps = [], [], [], []
    for path in paths:
        ref = load_gray(path)
        x, stages = reconstruct_image(params, ref)
        names.append(os.path.basename(path))
        ps.append(psnr(x, ref))
        ss.append(ssim(x, ref))
        stage_ps.append([psnr(s, ref) for s in stages])
    return MetricsReport(names, ps, ss, stage_ps, time.perf_counter() - t0)


def evaluate(checkpoint, image_dir, ratio=None):
    """Metrics of a checkpoint on every image in ``image_dir``."""
    params, manifest = load_checkpoint(checkpoint)
    if ratio is not None and not math.isclose(ratio, manifest["ratio"], abs_tol=1e-12):
        raise ValueError(f"checkpoint was trained at ratio {manifest['ratio']}, "
                         f"not {ratio}")
    paths = list_images(image_dir)
    if not paths:
        raise ValueError(f"no images found in {image_dir}")
    return evaluate_params(params, paths)
