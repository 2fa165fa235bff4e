"""Charbonnier loss, AdamW with cosine decay, and the desk-scale training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import Degradation, augment, load_png_dir, synth_degrade, synthetic_images
from .metrics import psnr
from .model import ConfigError, UformerParams, decay_exempt, forward
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "lr", "loss", "val_psnr")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epsilon: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.02
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    total_steps: int = 100
    batch_size: int = 4
    patch_size: int = 32
    num_patches: int = 16
    val_patches: int = 4
    val_every: int = 50
    checkpoint_every: int = 0
    seed: int = 0
    augment: bool = True
    grad_clip: float = 0.0
    degradation: Degradation = field(default_factory=Degradation)

    def validate(self) -> None:
        problems = []
        if not 0 < self.lr_end <= self.lr_start:
            problems.append("need 0 < lr_end <= lr_start")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            problems.append("epsilon must be positive")
        if self.total_steps < 0 or self.batch_size < 1 or self.num_patches < 1 or self.patch_size < 1:
            problems.append("steps, batch, patch count and size must be positive")
        if problems:
            raise ConfigError("; ".join(problems))
        self.degradation.validate()


# -- loss / schedule / optimizer -------------------------------------------


def charbonnier_loss(pred: Tensor, target, epsilon: float = 1e-3) -> Tensor:
    """Mean over elements of ``sqrt(d^2 + eps^2)``.

    Written as ``eps + mean(d^2 / (sqrt(d^2 + eps^2) + eps))`` so that a
    perfect prediction yields exactly ``eps``.
    """
    target = T.as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise DimensionError(f"loss shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    d2 = d * d
    excess = d2 / (T.sqrt(d2 + epsilon * epsilon) + epsilon)
    return excess.mean() + epsilon


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    total = cfg.total_steps
    if total <= 0:
        return cfg.lr_start
    if step >= total:
        return cfg.lr_end
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + math.cos(math.pi * step / total))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: dict[str, Tensor],
    state: OptimizerState,
    lr: float,
    cfg: TrainConfig,
    grads: dict[str, np.ndarray] | None = None,
) -> OptimizerState:
    """Decoupled-weight-decay Adam update, in place on ``params``.

    ``grads`` defaults to each tensor's ``.grad`` (missing grads count as zero).
    """
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    bc1, bc2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if cfg.weight_decay and not decay_exempt(name):
            p.data *= 1 - lr * cfg.weight_decay
        p.data -= (lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)).astype(p.dtype)
    return state


def clip_grad_norm(params: dict[str, Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params.values() if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


# -- data -------------------------------------------------------------------


@dataclass
class Dataset:
    clean: np.ndarray  # n x C x H x W
    degraded: np.ndarray
    val_clean: np.ndarray
    val_degraded: np.ndarray


def make_dataset(cfg: TrainConfig, channels: int = 3, data_dir=None) -> Dataset:
    """Fixed clean/degraded training patches plus a held-out validation set."""
    rng = np.random.default_rng(cfg.seed)
    n, nv, size = cfg.num_patches, cfg.val_patches, cfg.patch_size
    if data_dir:
        clean = load_png_dir(data_dir, size, n + nv, rng)
    else:
        clean = synthetic_images(n + nv, size, rng, channels)
    noise_rng = np.random.default_rng([cfg.seed, 1])
    degraded = np.stack([synth_degrade(c, cfg.degradation, noise_rng) for c in clean])
    return Dataset(clean[:n], degraded[:n], clean[n:], degraded[n:])


# -- loop -------------------------------------------------------------------


@dataclass
class TrainResult:
    params: UformerParams
    state: OptimizerState
    rows: list[tuple]
    train_psnr: float = float("nan")
    val_psnr: float = float("nan")
    input_val_psnr: float = float("nan")
    start_loss: float = float("nan")  # whole training set, no augmentation
    end_loss: float = float("nan")

    def summary(self) -> dict[str, float]:
        return {
            "steps": self.state.step,
            "start_loss": self.start_loss,
            "end_loss": self.end_loss,
            "train_psnr": self.train_psnr,
            "val_psnr": self.val_psnr,
            "input_val_psnr": self.input_val_psnr,
        }


def evaluate(params: UformerParams, degraded: np.ndarray, clean: np.ndarray, batch: int = 16) -> float:
    """Mean per-image PSNR of the restored batch against ``clean``."""
    if len(clean) == 0:
        return float("nan")
    dtype = params.input_proj.w.dtype
    scores = []
    with T.no_grad():
        for i in range(0, len(clean), batch):
            out = forward(Tensor(degraded[i : i + batch].astype(dtype)), params).data
            scores += [psnr(np.clip(o, 0, 1), c) for o, c in zip(out, clean[i : i + batch])]
    return float(np.mean(scores))


def dataset_loss(params: UformerParams, degraded: np.ndarray, clean: np.ndarray, epsilon: float, batch: int = 16) -> float:
    """Charbonnier loss over a whole patch set (weighted by patch count)."""
    dtype = params.input_proj.w.dtype
    total = 0.0
    with T.no_grad():
        for i in range(0, len(clean), batch):
            out = forward(Tensor(degraded[i : i + batch].astype(dtype)), params)
            part = clean[i : i + batch].astype(dtype)
            total += charbonnier_loss(out, part, epsilon).item() * len(part)
    return total / len(clean)


def write_log(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for step, lr, loss, val in rows:
            w.writerow([step, repr(lr), repr(loss), "" if val is None else repr(val)])


def train_loop(
    params: UformerParams,
    cfg: TrainConfig,
    data: Dataset | None = None,
    state: OptimizerState | None = None,
    save: Callable[[UformerParams, OptimizerState], None] | None = None,
    log_path=None,
) -> TrainResult:
    """Run ``cfg.total_steps`` optimisation steps starting at ``state.step``.

    Each step samples a batch of fixed patches, augments, restores, takes the
    Charbonnier loss and applies AdamW at the cosine learning rate.  ``save``
    is called every ``checkpoint_every`` steps and at the end; on a
    non-finite loss the last saved checkpoint is left in place.
    """
    cfg.validate()
    data = data if data is not None else make_dataset(cfg, params.config.in_channels)
    state = state or OptimizerState()
    named = params.named_parameters()
    dtype = params.input_proj.w.dtype
    rng = np.random.default_rng([cfg.seed, 2, state.step])
    n = len(data.clean)
    rows: list[tuple] = []
    start_loss = dataset_loss(params, data.degraded, data.clean, cfg.epsilon)

    for step in range(state.step, cfg.total_steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        pairs = [
            augment(data.clean[i], data.degraded[i], rng) if cfg.augment else (data.clean[i], data.degraded[i])
            for i in idx
        ]
        clean = np.stack([p[0] for p in pairs]).astype(dtype)
        noisy = np.stack([p[1] for p in pairs]).astype(dtype)
        lr = cosine_lr(step, cfg)
        params.zero_grad()
        loss = charbonnier_loss(forward(Tensor(noisy), params), clean, cfg.epsilon)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {step}")
        loss.backward()
        if cfg.grad_clip > 0:
            clip_grad_norm(named, cfg.grad_clip)
        adamw_step(named, state, lr, cfg)
        val = None
        if cfg.val_every and (step + 1) % cfg.val_every == 0:
            val = evaluate(params, data.val_degraded, data.val_clean)
        rows.append((step, lr, value, val))
        if val is not None:
            log.info("step %d lr %.3g loss %.5f val_psnr %.2f", step, lr, value, val)
        if save and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save(params, state)
        if log_path is not None and val is not None:
            write_log(log_path, rows)

    if save:
        save(params, state)
    if log_path is not None:
        write_log(log_path, rows)
    return TrainResult(
        params,
        state,
        rows,
        train_psnr=evaluate(params, data.degraded, data.clean),
        val_psnr=evaluate(params, data.val_degraded, data.val_clean),
        input_val_psnr=float(np.mean([psnr(d, c) for d, c in zip(data.val_degraded, data.val_clean)]))
        if len(data.val_clean)
        else float("nan"),
        start_loss=start_loss,
        end_loss=dataset_loss(params, data.degraded, data.clean, cfg.epsilon),
    )
