"""Training losses: cross-entropy, NSR-regularized, Jacobian-regularized, adversarial.

Epoch indices are 1-based. A warmup of ``w`` epochs means the gated terms
are first active at epoch ``w + 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass
class NsrConfig:
    beta: float = 0.4
    eps_delta: float = 1.0
    warmup_epochs: int = 0
    denom_floor: float = 1e-8

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.eps_delta <= 0 or self.denom_floor <= 0:
            raise ValueError("eps_delta and denom_floor must be > 0")


@dataclass
class JacobConfig:
    lam: float = 0.9
    normalized: bool = False
    warmup_epochs: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


@dataclass
class AdvConfig:
    eps: float = 0.1
    attack_iters: int = 10
    alpha: float = 0.01
    warmup_epochs: int = 0
    schedule: str = "none"

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.schedule not in ("none", "linear_after_warmup"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def gated(epoch: int, warmup_epochs: int) -> bool:
    """True once the warmup is over (1-based epochs)."""
    return epoch > warmup_epochs


def _logits_and_input(model, x, mask):
    x = x.detach().clone().requires_grad_(True)
    return model(x, mask), x


def true_logit_gradient(model, x, y, mask=None, create_graph=True):
    """Per-sample ``(z_y, d z_y / d x)``; differentiable w.r.t. parameters."""
    z, xg = _logits_and_input(model, x, mask)
    zy = z.gather(1, y[:, None]).squeeze(1)
    (g,) = torch.autograd.grad(zy.sum(), xg, create_graph=create_graph)
    return z, zy, g


def nsr_regularizer(model, x, y, cfg: NsrConfig, mask=None, _cache=None):
    """Per-sample ``R = ||d z_y/d x||_1 * eps_delta / max(|z_y|, floor)``."""
    if _cache is None:
        _, zy, g = true_logit_gradient(model, x, y, mask)
    else:
        zy, g = _cache
    l1 = g.abs().reshape(g.shape[0], -1).sum(dim=1)
    return l1 * cfg.eps_delta / zy.abs().clamp_min(cfg.denom_floor)


def nsr_loss(model, x, y, epoch: int, cfg: NsrConfig, mask=None, reduction="mean"):
    active = gated(epoch, cfg.warmup_epochs)
    if active and cfg.beta > 0:
        z, zy, g = true_logit_gradient(model, x, y, mask)
    else:
        z = model(x, mask)
        zy = z.gather(1, y[:, None]).squeeze(1)
        g = None
    onehot = F.one_hot(y, z.shape[1]).to(z.dtype)
    others = (1 - onehot) * z
    correct = (z.argmax(dim=1) == y).to(z.dtype)
    mse_true = (zy - 1) ** 2
    mse_others = (others ** 2).sum(dim=1)
    per = mse_true + correct * mse_others
    if active:
        margin = ((1 - onehot) * F.relu(1 - zy[:, None] + z)).sum(dim=1)
        per = per + correct * margin
        if g is not None:
            R = nsr_regularizer(model, x, y, cfg, _cache=(zy, g))
            per = per + correct * cfg.beta * torch.log(R + 1)
    return per.mean() if reduction == "mean" else per


def jacobian_regularizer(model, x, mask=None):
    """Frobenius norm of the batch Jacobian ``d z_k(x_n) / d x_d``."""
    z, xg = _logits_and_input(model, x, mask)
    total = z.new_zeros(())
    for k in range(z.shape[1]):
        (g,) = torch.autograd.grad(z[:, k].sum(), xg, create_graph=True)
        total = total + (g ** 2).sum()
    return torch.sqrt(total)


def jacob_loss(model, x, y, epoch: int, cfg: JacobConfig, mask=None):
    z = model(x, mask)
    if cfg.normalized:
        loss = F.cross_entropy(z, y, reduction="mean")
    else:
        loss = F.cross_entropy(z, y, reduction="sum")
    if cfg.lam > 0 and gated(epoch, cfg.warmup_epochs):
        reg = jacobian_regularizer(model, x, mask)
        if cfg.normalized:
            reg = reg / (x.shape[0] * z.shape[1])
        loss = loss + cfg.lam * reg
    return loss


def epsilon_schedule(t: int, t_max: int, eps: float, warmup: int = 10) -> float:
    """Noise level ramped linearly from 0 after ``warmup`` to ``eps`` at ``t_max``."""
    if t_max <= warmup:
        raise ValueError(f"t_max must exceed {warmup}")
    if t <= warmup:
        return 0.0
    return eps * (t - warmup) / (t_max - warmup)


def ce_loss(model, x, y, mask=None):
    return F.cross_entropy(model(x, mask), y)


def adv_loss(model, x, y, epoch: int, cfg: AdvConfig, attacker, t_max: int | None = None, mask=None):
    """``0.5 CE(x) + 0.5 CE(x_adv)``; plain CE while the warmup is running.

    ``attacker(model, x, y, eps, mask)`` returns the adversarial batch.
    """
    clean = F.cross_entropy(model(x, mask), y)
    if not gated(epoch, cfg.warmup_epochs):
        return clean
    eps = cfg.eps
    if cfg.schedule == "linear_after_warmup":
        if t_max is None:
            raise ValueError("linear_after_warmup needs t_max")
        eps = epsilon_schedule(epoch, t_max, cfg.eps, cfg.warmup_epochs)
    was_training = model.training
    model.eval()
    try:
        x_adv = attacker(model, x, y, eps, mask)
    finally:
        model.train(was_training)
    return 0.5 * clean + 0.5 * F.cross_entropy(model(x_adv.detach(), mask), y)
