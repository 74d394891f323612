"""LoRA fine-tuning loop: Adam on the adapter matrices only, cross-entropy
over the discrete action classes, deterministic given the seed."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .policy import VisuomotorPolicy


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 2
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.epochs <= 0:
            raise ValueError("epochs must be > 0")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be > 0")


@dataclass
class TrainResult:
    train_loss: list = field(default_factory=list)     # one entry per epoch
    val_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    steps: int = 0


class TrainingDiverged(RuntimeError):
    pass


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean CE loss plus dlogits, numerically stable."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = float(-logp[np.arange(n), labels].mean(dtype=np.float64))
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= np.float32(n)
    return loss, dlogits.astype(np.float32)


class Adam:
    """Adam over the adapter matrices, state keyed by parameter name."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params: dict, grads: dict):
        cfg = self.cfg
        self.t += 1
        b1t = 1.0 - cfg.beta1 ** self.t
        b2t = 1.0 - cfg.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m += (1.0 - cfg.beta1) * (g - m)
            v += (1.0 - cfg.beta2) * (g * g - v)
            update = (m / b1t) / (np.sqrt(v / b2t) + cfg.eps)
            p -= np.float32(cfg.learning_rate) * update


def evaluate(policy: VisuomotorPolicy, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 256):
    """(mean CE loss, accuracy) over a dataset, inference mode."""
    total_loss, correct = 0.0, 0
    n = images.shape[0]
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        logits = policy.forward(images[lo:hi])
        loss, _ = cross_entropy(logits, labels[lo:hi])
        total_loss += loss * (hi - lo)
        correct += int((logits.argmax(axis=1) == labels[lo:hi]).sum())
    return total_loss / n, correct / n


def train(policy: VisuomotorPolicy, train_set, val_set, cfg: TrainConfig) -> TrainResult:
    """Fit the LoRA adapters; frozen parameters are never written.

    train_set / val_set are (images, labels) pairs of normalized float32
    images (N, H, W, C) and integer class labels (N,).
    """
    x_train, y_train = train_set
    x_val, y_val = val_set
    if x_train.shape[0] == 0:
        raise ValueError("empty training set")
    adapters = policy.adapters()
    if not adapters:
        raise ValueError("policy has no adapted layers to train")
    params = {}
    for name, layer in adapters.items():
        params[f"{name}.lora_A"] = layer.adapter.a
        params[f"{name}.lora_B"] = layer.adapter.b

    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg)
    result = TrainResult()
    n = x_train.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            logits, cache = policy.forward(x_train[idx], training=True, rng=rng,
                                           want_cache=True)
            loss, dlogits = cross_entropy(logits, y_train[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became non-finite at step {result.steps} "
                    f"(epoch {epoch}); try lowering learning_rate below "
                    f"{cfg.learning_rate}")
            grads = policy.backward(cache, dlogits)
            flat = {}
            for site, (da, db) in grads.items():
                flat[f"{site}.lora_A"] = da
                flat[f"{site}.lora_B"] = db
            opt.step(params, flat)
            epoch_loss += loss * len(idx)
            result.steps += 1
        result.train_loss.append(epoch_loss / n)
        vloss, vacc = evaluate(policy, x_val, y_val)
        result.val_loss.append(vloss)
        result.val_accuracy.append(vacc)
    return result
