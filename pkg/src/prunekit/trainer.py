"""Mini-batch SGD with momentum, L2 penalty, and the three-plateau LR schedule.

The update is ``v_t = momentum * v_{t-1} - lr * g_t; w += v_t`` with the
velocity starting at zero, where ``g_t`` is the mini-batch mean gradient of
the penalized loss.  The learning rate drops by 10x at 50% and again at 75%
of the epoch budget.  Training is deterministic under a fixed seed and data
order; the checkpoint with the best eval accuracy is returned.

Two data-term variants are provided: standard softmax cross-entropy, and a
per-class binary form that also charges the complement probabilities
(``-sum[y log p + (1-y) log(1-p)]``).  The binary form treats each softmax
output as an independent probability; both are exposed because either
reading is defensible, with softmax-ce the default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .bundle import ModelBundle
from .errors import TrainingDiverged
from .network import GradTape, Network

PROB_EPS = 1e-12   # probability clamp; keeps log() finite
LOSS_VARIANTS = ("softmax-ce", "binary-ce")


@dataclass
class TrainConfig:
    epochs: int = 160
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    loss_variant: str = "softmax-ce"
    lr_milestones: tuple[float, float] = (0.5, 0.75)
    lr_gamma: float = 0.1
    augment: bool = False   # pad-4 random crop + horizontal flip on train batches

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lr_milestones" in d:
            d["lr_milestones"] = tuple(d["lr_milestones"])
        return cls(**d)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Plateau schedule: lr, then lr*gamma, then lr*gamma^2."""
    lr = config.lr
    for frac in config.lr_milestones:
        if epoch >= int(config.epochs * frac):
            lr *= config.lr_gamma
    return lr


# ---------------------------------------------------------------------------
# loss

def data_loss_and_grad(probs: np.ndarray, onehot: np.ndarray, variant: str):
    """Mean per-sample data loss over the batch and its gradient w.r.t. probs.

    Always evaluated in float64: the probability clamp is not representable
    next to 1 in float32, and the complement term of the binary form needs
    it there.
    """
    n = probs.shape[0]
    p = np.clip(probs.astype(np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = onehot.astype(np.float64)
    if variant == "softmax-ce":
        loss = -(y * np.log(p)).sum() / n
        dprobs = -(y / p) / n
    else:
        loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum() / n
        dprobs = (-(y / p) + (1.0 - y) / (1.0 - p)) / n
    return float(loss), dprobs.astype(probs.dtype, copy=False)


def penalty_value(weights, weight_decay: float):
    """L2 penalty (weight_decay / 2n) * sum(w^2); n is the total weight count."""
    n = sum(int(w.size) for w in weights)
    if n == 0 or weight_decay == 0.0:
        return 0.0, max(n, 1)
    sq = math.fsum(float(np.vdot(w, w)) for w in weights)
    return weight_decay / (2.0 * n) * sq, n


def loss(predictions: np.ndarray, labels_onehot: np.ndarray, weights=(),
         weight_decay: float = 0.0, variant: str = "softmax-ce") -> float:
    """Penalized loss on probability vectors, as a single scalar."""
    if not np.allclose(predictions.sum(axis=1), 1.0, atol=1e-5):
        raise ValueError("predictions must sum to 1 per sample")
    value, _ = data_loss_and_grad(predictions, labels_onehot, variant)
    pen, _ = penalty_value(list(weights), weight_decay)
    return value + pen


# ---------------------------------------------------------------------------
# optimizer

class OptimizerState:
    """Per-parameter velocity buffers, zero-initialized."""

    def __init__(self):
        self.velocity: dict[tuple[str, str], np.ndarray] = {}

    def step(self, params, grads: dict, lr: float, momentum: float) -> None:
        for node_id, pname, w in params:
            key = (node_id, pname)
            g = grads.get(key)
            if g is None:
                continue
            v = self.velocity.get(key)
            if v is None:
                v = np.zeros_like(w)
            v = momentum * v - lr * g.astype(w.dtype, copy=False)
            self.velocity[key] = v
            w += v


def sgd_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float):
    """One update on a single tensor; returns (new_param, new_velocity)."""
    v = momentum * velocity - lr * grad
    return param + v, v


# ---------------------------------------------------------------------------
# training loop

def _onehot(y: np.ndarray, classes: int, dtype) -> np.ndarray:
    out = np.zeros((y.shape[0], classes), dtype=dtype)
    out[np.arange(y.shape[0]), y] = 1
    return out


def augment_batch(x: np.ndarray, rng, pad: int = 4) -> np.ndarray:
    """Standard crop/flip augmentation: zero-pad, random crop, random h-flip."""
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(x)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.integers(0, 2, size=n)
    for i in range(n):
        oy, ox = offs[i]
        crop = padded[i, :, oy:oy + h, ox:ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def evaluate(bundle: ModelBundle, dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy in eval mode."""
    net = Network(bundle.graph)
    correct = 0
    for x, y in dataset.batches(batch_size):
        probs = net.forward(x, training=False)
        correct += int((probs.argmax(axis=1) == y).sum())
    return correct / dataset.size


def train(bundle: ModelBundle, train_data, eval_data, config: TrainConfig):
    """Run the epoch loop; returns (best checkpoint bundle, history rows)."""
    work = bundle.copy()
    net = Network(work.graph)
    opt = OptimizerState()
    classes = work.graph.nodes_of_kind("fullyconnected")[-1].attrs["out_features"]
    rng = np.random.default_rng(config.seed)
    history = []
    best_acc, best_params, best_epoch = -1.0, None, -1

    for epoch in range(config.epochs):
        lr = lr_at(epoch, config)
        epoch_loss, epoch_correct, seen = 0.0, 0, 0
        for bi, (x, y) in enumerate(train_data.batches(config.batch_size,
                                                       shuffle=True, rng=rng)):
            if config.augment:
                x = augment_batch(x, rng)
            tape = GradTape()
            probs = net.forward(x, training=True, tape=tape)
            onehot = _onehot(y, classes, probs.dtype)
            data_loss, dprobs = data_loss_and_grad(probs, onehot, config.loss_variant)
            pen, n_weights = penalty_value(
                [w for _, _, w in net.weight_parameters()], config.weight_decay)
            batch_loss = data_loss + pen
            if not math.isfinite(batch_loss):
                raise TrainingDiverged(epoch, bi)
            net.backward(dprobs, tape)
            if config.weight_decay > 0.0:
                scale = config.weight_decay / n_weights
                for node_id, pname, w in net.weight_parameters():
                    tape.accumulate(node_id, pname, scale * w)
            opt.step(net.trainable_parameters(), tape.grads, lr, config.momentum)

            epoch_loss += batch_loss * x.shape[0]
            epoch_correct += int((probs.argmax(axis=1) == y).sum())
            seen += x.shape[0]

        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": epoch_loss / seen,
            "train_acc": epoch_correct / seen,
        }
        if eval_data is not None:
            row["eval_acc"] = evaluate(work, eval_data)
            # ties go to the later epoch: of equally accurate checkpoints,
            # keep the most converged one
            if row["eval_acc"] >= best_acc:
                best_acc = row["eval_acc"]
                best_epoch = epoch
                best_params = {(n.id, p): a.copy()
                               for n in work.graph.nodes for p, a in n.params.items()}
        history.append(row)

    if best_params is not None:
        for node in work.graph.nodes:
            for pname in node.params:
                node.params[pname] = best_params[(node.id, pname)]
    work.metadata = dict(work.metadata)
    work.metadata.update({
        "epochs_seen": config.epochs,
        "best_epoch": best_epoch if best_params is not None else config.epochs - 1,
        "seed": config.seed,
        "train_config": config.to_dict(),
    })
    return work, history


def retrain_scratch(compact: ModelBundle, train_data, eval_data,
                    base_config: TrainConfig, compression_report):
    """Train a freshly initialized compact model for the FLOP-matched budget."""
    if compact.metadata.get("rewrite_mode") not in (None, "architecture-only"):
        raise ValueError("retrain_scratch expects an architecture-only (fresh) model")
    epochs = compression_report.epoch_recommendation
    if epochs is None:
        raise ValueError("compression report carries no epoch budget")
    cfg = TrainConfig.from_dict({**base_config.to_dict(), "epochs": epochs})
    return train(compact, train_data, eval_data, cfg)
