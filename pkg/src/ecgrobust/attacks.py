"""L-infinity bounded perturbations: K-step PGD, smoothed PGD (SAP variant), white noise.

All attacks work on batches but treat samples independently: the PGD objective
is the summed per-sample cross-entropy, so each sample's gradient only depends
on its own logits. Perturbations are zeroed wherever a validity mask is 0.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

logger = logging.getLogger(__name__)

FAMILIES = ("pgd", "sap", "white_noise")


class AttackError(RuntimeError):
    """An attack produced a non-finite gradient or could not run."""

    def __init__(self, message, samples=()):
        super().__init__(message)
        self.samples = list(samples)


class AttackConfigError(ValueError):
    pass


@dataclass
class AttackConfig:
    family: str = "pgd"
    eps: float = 0.01
    alpha: float = 0.01
    iters: int = 100
    rand_init: bool = False
    clip_range: tuple | None = None
    # SAP only; width 1 degenerates to plain PGD
    smooth_width: int = 15
    smooth_sigma: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise AttackConfigError(f"unknown attack family {self.family!r}")
        if self.eps < 0:
            raise AttackConfigError("eps must be >= 0")
        if self.alpha <= 0:
            raise AttackConfigError("alpha must be > 0")
        if self.iters < 0:
            raise AttackConfigError("iters must be >= 0")
        if self.smooth_width < 1 or self.smooth_width % 2 == 0:
            raise AttackConfigError("smooth_width must be a positive odd integer")

    def with_eps(self, eps):
        return AttackConfig(**{**self.__dict__, "eps": float(eps)})

    @property
    def name(self):
        if self.family == "white_noise":
            return "white_noise"
        return f"{self.iters}-{self.family.upper()}"


def gaussian_kernel(width: int, sigma: float) -> torch.Tensor:
    if width == 1:
        return torch.ones(1, dtype=torch.float64)
    t = torch.arange(width, dtype=torch.float64) - (width - 1) / 2
    k = torch.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def smooth_time(g: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Convolve along the last axis, independently per lead, zero-padded 'same' output."""
    if kernel.numel() == 1:
        return g * kernel.to(g.dtype)
    shape = g.shape
    flat = g.reshape(-1, 1, shape[-1])
    out = F.conv1d(flat, kernel.to(g.dtype).reshape(1, 1, -1), padding=kernel.numel() // 2)
    return out.reshape(shape)


def _as_batch(model, x, y, mask):
    p = next(model.parameters())
    x = torch.as_tensor(x, dtype=p.dtype, device=p.device)
    y = torch.as_tensor(y, dtype=torch.long, device=p.device)
    if mask is not None:
        mask = torch.as_tensor(mask, dtype=p.dtype, device=p.device)
    return x, y, mask


def _project(x_adv, x, eps, clip_range):
    x_adv = torch.max(torch.min(x_adv, x + eps), x - eps)
    if clip_range is not None:
        x_adv = x_adv.clamp(clip_range[0], clip_range[1])
    return x_adv


def _iterate(model, x, y, cfg: AttackConfig, mask, kernel):
    x, y, mask = _as_batch(model, x, y, mask)
    if cfg.eps == 0 or cfg.iters == 0:
        return x.clone()
    if kernel is not None and kernel.numel() > x.shape[-1]:
        raise AttackConfigError(
            f"smoothing kernel width {kernel.numel()} exceeds signal length {x.shape[-1]}")
    x_adv = x.clone()
    if cfg.rand_init:
        gen = torch.Generator().manual_seed(cfg.seed)
        u = torch.rand(x.shape, generator=gen, dtype=torch.float64).to(x)
        x_adv = x + (2 * u - 1) * cfg.eps
        if mask is not None:
            x_adv = x + (x_adv - x) * mask
        x_adv = _project(x_adv, x, cfg.eps, cfg.clip_range)
    for k in range(cfg.iters):
        x_adv.requires_grad_(True)
        loss = F.cross_entropy(model(x_adv, mask), y, reduction="sum")
        (grad,) = torch.autograd.grad(loss, x_adv)
        bad = ~torch.isfinite(grad.reshape(grad.shape[0], -1)).all(dim=1)
        if bad.any():
            idx = bad.nonzero().flatten().tolist()
            raise AttackError(f"non-finite gradient at iteration {k} for samples {idx}", idx)
        step = grad.sign()
        if kernel is not None:
            step = smooth_time(step, kernel)
        if mask is not None:
            step = step * mask
        x_adv = _project(x_adv.detach() + cfg.alpha * step, x, cfg.eps, cfg.clip_range)
    return x_adv.detach()


def pgd_attack(model, x, y, cfg: AttackConfig, mask=None) -> torch.Tensor:
    return _iterate(model, x, y, cfg, mask, None)


def sap_attack(model, x, y, cfg: AttackConfig, mask=None) -> torch.Tensor:
    """PGD whose signed gradient is Gaussian-smoothed along time before each step."""
    return _iterate(model, x, y, cfg, mask, gaussian_kernel(cfg.smooth_width, cfg.smooth_sigma))


def white_noise_attack(x, eps: float, seed: int = 0, mask=None) -> torch.Tensor:
    """Add i.i.d. Uniform(-eps, eps) noise (PCG64 stream seeded by ``seed``)."""
    x = torch.as_tensor(x)
    if eps == 0:
        return x.clone()
    u = np.random.default_rng(seed).uniform(-eps, eps, size=tuple(x.shape))
    noise = torch.from_numpy(u).to(x.dtype)
    if mask is not None:
        noise = noise * torch.as_tensor(mask, dtype=x.dtype)
    return x + noise


def run_attack(model, x, y, cfg: AttackConfig, mask=None) -> torch.Tensor:
    if cfg.family == "pgd":
        return pgd_attack(model, x, y, cfg, mask)
    if cfg.family == "sap":
        return sap_attack(model, x, y, cfg, mask)
    p = next(model.parameters())
    return white_noise_attack(torch.as_tensor(x, dtype=p.dtype), cfg.eps, cfg.seed, mask)


def attack_batch(model, x, y, cfg: AttackConfig, mask=None, batch_size=256, ids=None) -> torch.Tensor:
    """Attack a dataset in chunks; white noise is drawn per sample so results
    do not depend on chunking or order (sample ``i`` uses seed ``(cfg.seed, id_i)``)."""
    p = next(model.parameters())
    x = torch.as_tensor(x, dtype=p.dtype)
    y = torch.as_tensor(y, dtype=torch.long)
    n = x.shape[0]
    ids = list(range(n)) if ids is None else list(ids)
    was_training = model.training
    model.eval()
    outs = []
    try:
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            m = None if mask is None else torch.as_tensor(mask, dtype=p.dtype)[sl]
            if cfg.family == "white_noise":
                chunk = torch.stack([
                    white_noise_attack(x[i], cfg.eps, [cfg.seed, int(ids[i])],
                                       None if m is None else m[i - start])
                    for i in range(start, min(start + batch_size, n))])
            else:
                try:
                    chunk = run_attack(model, x[sl], y[sl], cfg, m)
                except AttackError as exc:
                    bad = [ids[start + i] for i in exc.samples]
                    raise AttackError(f"non-finite attack gradient for sample ids {bad}", bad) from exc
            outs.append(chunk)
    finally:
        model.train(was_training)
    return torch.cat(outs) if outs else x.clone()
