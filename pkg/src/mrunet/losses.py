"""Training losses: per-class soft Dice plus voxelwise cross-entropy.

Each network head contributes ``dice + xent``; the total is the unweighted,
left-to-right sum over the target head and every context head that exists.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ops import log_softmax_np
from .tensor import Tensor, add, add_n, make_node

DICE_EPS = 1e-5


def one_hot(labels: np.ndarray, classes: int, axis: int = 1, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    oh = (labels[..., None] == np.arange(classes)).astype(dtype)
    return np.moveaxis(oh, -1, axis)


def soft_dice_loss(logits: Tensor, labels_onehot: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """Mean over classes of ``1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps)``.

    ``p`` is the channel softmax of ``logits``. Sums run over the batch and
    all spatial voxels. The channel axis is 1 for batched input, else 0.
    """
    g = np.asarray(labels_onehot, dtype=logits.dtype)
    if g.shape != logits.shape:
        raise ValueError(f"soft_dice_loss: logits {logits.shape} vs labels {g.shape}")
    caxis = 1 if logits.ndim == 5 else 0
    C = logits.shape[caxis]
    red = tuple(i for i in range(logits.ndim) if i != caxis)
    z = logits.data - logits.data.max(axis=caxis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=caxis, keepdims=True)
    inter = (p * g).sum(axis=red)
    denom = (p * p).sum(axis=red) + (g * g).sum(axis=red) + eps
    ratio = (2.0 * inter + eps) / denom
    loss = np.asarray((1.0 - ratio).sum() / C, dtype=logits.dtype)

    def backward(up):
        shape = [1] * logits.ndim
        shape[caxis] = C
        d = denom.reshape(shape)
        r = ratio.reshape(shape)
        dp = (-float(up) / C) * (2.0 * g / d - r * 2.0 * p / d)
        dz = p * (dp - (dp * p).sum(axis=caxis, keepdims=True))
        return (dz.astype(logits.dtype, copy=False),)

    return make_node(loss, (logits,), backward)


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over voxels of ``-log softmax(logits)[label]``."""
    caxis = 1 if logits.ndim == 5 else 0
    labels = np.asarray(labels)
    C = logits.shape[caxis]
    expected = logits.shape[:caxis] + logits.shape[caxis + 1 :]
    if labels.shape != expected:
        raise ValueError(f"cross_entropy_loss: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    logp = log_softmax_np(logits.data, axis=caxis)
    picked = np.take_along_axis(logp, np.expand_dims(labels.astype(np.int64), caxis), axis=caxis)
    nvox = labels.size
    loss = np.asarray(-picked.sum() / nvox, dtype=logits.dtype)

    def backward(up):
        p = np.exp(logp)
        p -= one_hot(labels, C, axis=caxis, dtype=p.dtype)
        return ((p * (float(up) / nvox)).astype(logits.dtype, copy=False),)

    return make_node(loss, (logits,), backward)


@dataclass
class HeadLoss:
    loss: Tensor
    dice: float
    xent: float


@dataclass
class LossReport:
    total: Tensor
    target: HeadLoss
    contexts: list[HeadLoss] = field(default_factory=list)

    @property
    def target_loss(self) -> float:
        return float(self.target.loss.data)

    @property
    def context_losses(self) -> list[float]:
        return [float(h.loss.data) for h in self.contexts]

    def parts(self) -> list[np.ndarray]:
        return [self.target.loss.data] + [h.loss.data for h in self.contexts]


def head_loss(logits: Tensor, labels: np.ndarray, classes: int) -> HeadLoss:
    caxis = 1 if logits.ndim == 5 else 0
    dice = soft_dice_loss(logits, one_hot(labels, classes, axis=caxis, dtype=logits.dtype))
    xent = cross_entropy_loss(logits, labels)
    return HeadLoss(add(dice, xent), float(dice.data), float(xent.data))


def combined_loss(outputs: dict, target_labels: np.ndarray, context_labels, config) -> LossReport:
    """Sum of ``dice + xent`` over the target head and every existing context head.

    Configurations without context decoders (A, C) contribute no context terms.
    """
    classes = config.class_count
    target = head_loss(outputs["target"], target_labels, classes)
    heads = []
    if config.context_decoder_and_loss:
        ctx_out = outputs["contexts"]
        if len(ctx_out) != len(context_labels):
            raise ValueError(f"{len(ctx_out)} context heads but {len(context_labels)} context label patches")
        heads = [head_loss(o, lab, classes) for o, lab in zip(ctx_out, context_labels)]
    total = add_n([target.loss] + [h.loss for h in heads])
    return LossReport(total, target, heads)
