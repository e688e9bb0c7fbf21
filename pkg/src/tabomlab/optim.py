"""AdamW with linear warmup and cosine decay."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    warmup: int = 20
    epochs: int = 5
    batch_size: int = 16
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    min_lr_ratio: float = 0.1


def lr_at(cfg: OptimConfig, step: int, total: int) -> float:
    if step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    span = max(1, total - cfg.warmup)
    progress = min(1.0, (step - cfg.warmup) / span)
    floor = cfg.min_lr_ratio
    return cfg.lr * (floor + (1 - floor) * 0.5 * (1 + math.cos(math.pi * progress)))


class AdamW:
    def __init__(self, params: list[Tensor], cfg: OptimConfig, total_steps: int):
        self.params = params
        self.cfg = cfg
        self.total = total_steps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        cfg = self.cfg
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
        clip = cfg.grad_clip / norm if cfg.grad_clip and norm > cfg.grad_clip else 1.0
        lr = lr_at(cfg, self.t, self.total)
        self.t += 1
        b1c = 1 - cfg.beta1 ** self.t
        b2c = 1 - cfg.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * clip
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            if p.data.ndim >= 2 and cfg.weight_decay:
                p.data *= 1 - lr * cfg.weight_decay
            p.data -= lr * (m / b1c) / (np.sqrt(v / b2c) + cfg.eps)
        return norm
