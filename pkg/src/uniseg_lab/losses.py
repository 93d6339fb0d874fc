"""The three training losses (CE, Null BCE, class-relational BCE) and their
analytic gradients with respect to the logits.

Every kernel works in float64 and reduces with a MEAN over the counted terms.
Channels that are not counted (Null channels, IGNORE pixels) get a gradient of
exactly +0.0, not merely a small number.
"""
import logging
from typing import Optional, Tuple

import numpy as np

from .errors import ConfigError, EmptyLossError, LabelOutsideSpaceError, LabelSpaceError, ShapeMismatchError
from .uniseg_types import (IGNORE, NULL, POSITIVE, ConflictReport, LabelMap, LogitMap, LossKind,
                           ProbMap, TriStateLabelMap)

logger = logging.getLogger(__name__)

LossGrad = Tuple[float, LogitMap]


def softmax(logits: LogitMap) -> ProbMap:
    """Softmax over the last (channel) axis, with max-subtraction for stability.

    Args:
        logits (LogitMap): (..., K) logits

    Returns:
        ProbMap: The normalized probabilities P
    """
    o = np.asarray(logits, dtype=np.float64)
    z = o - np.max(o, axis=-1, keepdims=True)
    e = np.exp(z)
    return ProbMap(e / np.sum(e, axis=-1, keepdims=True), True)


def _sigmoid(o: np.ndarray) -> np.ndarray:
    # exp(-|o|) never overflows; both branches share it.
    e = np.exp(-np.abs(o))
    return np.where(o >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(logits: LogitMap) -> ProbMap:
    """Elementwise logistic function 1 / (1 + exp(-o)), stable for large |o|.\n
    NOTE: In float64 the result saturates to exactly 1.0 for o above ~37.

    Args:
        logits (LogitMap): (..., K) logits

    Returns:
        ProbMap: The independent probabilities Q
    """
    return ProbMap(_sigmoid(np.asarray(logits, dtype=np.float64)), False)


def softplus(o: np.ndarray) -> np.ndarray:
    """log(1 + exp(o)) without overflow."""
    return np.maximum(o, 0.0) + np.log1p(np.exp(-np.abs(o)))


def log_sigmoid(logits: LogitMap) -> np.ndarray:
    """log(sigmoid(o)) = -softplus(-o), computed directly to avoid log(0)."""
    return -softplus(-np.asarray(logits, dtype=np.float64))


def logsumexp(o: np.ndarray) -> np.ndarray:
    m = np.max(o, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(o - m), axis=-1, keepdims=True)))[..., 0]


def _valid_pixels(labels: np.ndarray, ignore_mask: Optional[np.ndarray]) -> np.ndarray:
    valid = labels != IGNORE
    if ignore_mask is not None:
        valid = valid & ~np.asarray(ignore_mask, dtype=bool)
    return valid


def _check_labels(logits: np.ndarray, labels: np.ndarray, valid: np.ndarray) -> None:
    if logits.shape[:-1] != labels.shape:
        raise ShapeMismatchError(f'Error! logits {logits.shape} and labels {labels.shape} do not match')
    k = logits.shape[-1]
    bad = valid & ((labels < 0) | (labels >= k))
    if np.any(bad):
        raise LabelSpaceError(f'Error! Label values {sorted(set(labels[bad].tolist()))} are not in [0, {k})')


def ce_loss_grad(logits: LogitMap, labels: LabelMap, ignore_mask: Optional[np.ndarray] = None) -> LossGrad:
    """Softmax cross-entropy over the unified space.

    Args:
        logits (LogitMap): (..., K_u) logits
        labels (LabelMap): (...) unified class indices or IGNORE
        ignore_mask (Optional[np.ndarray], optional): Extra pixels to exclude. Defaults to None.

    Raises:
        EmptyLossError: If no pixel survives masking

    Returns:
        LossGrad: The mean of -log P^(y) over valid pixels, and (P - onehot(y)) / N_valid
    """
    o = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    valid = _valid_pixels(y, ignore_mask)
    _check_labels(o, y, valid)
    n_valid = int(np.count_nonzero(valid))
    if n_valid == 0:
        raise EmptyLossError('Error! empty loss: every pixel is IGNORE')

    y_safe = np.where(valid, y, 0)
    onehot = np.arange(o.shape[-1]) == y_safe[..., None]
    o_y = np.take_along_axis(o, y_safe[..., None], axis=-1)[..., 0]
    per_pixel = logsumexp(o) - o_y
    loss = float(np.sum(np.where(valid, per_pixel, 0.0)) / n_valid)
    p = softmax(o).values
    grad = np.where(valid[..., None], (p - onehot) / n_valid, 0.0)
    return loss, grad


def masked_bce_loss_grad(logits: LogitMap, targets: np.ndarray, counted: np.ndarray) -> LossGrad:
    """The BCE kernel shared by Null BCE and class-relational BCE.\n
    Both losses call this with the same (targets, counted) when no multi-labels
    are active, so they agree bit for bit.

    Args:
        logits (LogitMap): (..., K_u) logits
        targets (np.ndarray): (..., K_u) float64 in {0, 1}
        counted (np.ndarray): (..., K_u) bool, True for every term in the loss

    Raises:
        EmptyLossError: If no term is counted

    Returns:
        LossGrad: The mean BCE over counted terms, and (Q - Y) / N_terms on counted terms (0.0 elsewhere)
    """
    o = np.asarray(logits, dtype=np.float64)
    n_terms = int(np.count_nonzero(counted))
    if n_terms == 0:
        raise EmptyLossError('Error! empty loss: no (pixel, channel) term is counted')
    # -[y log q + (1-y) log(1-q)] == softplus(o) - y*o
    terms = softplus(o) - targets * o
    loss = float(np.sum(np.where(counted, terms, 0.0)) / n_terms)
    grad = np.where(counted, (_sigmoid(o) - targets) / n_terms, 0.0)
    return loss, grad


def null_bce_loss_grad(logits: LogitMap, labels: LabelMap, membership: np.ndarray,
                       ignore_mask: Optional[np.ndarray] = None) -> LossGrad:
    """Null BCE: binary cross-entropy on the channels of the sample's own dataset only.\n
    Channels outside the dataset's label space are Null: no loss and a gradient of exactly 0.0.

    Args:
        logits (LogitMap): (..., K_u) logits
        labels (LabelMap): (...) unified class indices or IGNORE
        membership (np.ndarray): bool, either (K_u,) for one dataset or broadcastable to
        logits.shape when a batch mixes datasets
        ignore_mask (Optional[np.ndarray], optional): Extra pixels to exclude. Defaults to None.

    Raises:
        LabelOutsideSpaceError: If a valid pixel is labeled with a non-member class
        EmptyLossError: If no term survives masking

    Returns:
        LossGrad: The loss and its gradient
    """
    o = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    valid = _valid_pixels(y, ignore_mask)
    _check_labels(o, y, valid)
    member = np.broadcast_to(np.asarray(membership, dtype=bool), o.shape)

    positive = (np.arange(o.shape[-1]) == y[..., None]) & valid[..., None]
    if np.any(positive & ~member):
        raise LabelOutsideSpaceError("Error! label outside dataset space: a pixel's class "
                                     "is not a member of its dataset's taxonomy")
    counted = member & valid[..., None]
    return masked_bce_loss_grad(o, positive.astype(np.float64), counted)


def cr_bce_loss_grad(logits: LogitMap, tristate: TriStateLabelMap) -> LossGrad:
    """Class-relational BCE: BCE against tri-state multi-class labels.\n
    POSITIVE channels are targets of 1, NEGATIVE channels targets of 0, NULL channels are skipped.

    Args:
        logits (LogitMap): (..., K_u) logits
        tristate (TriStateLabelMap): The expanded labels (see relations.expand_pixel_labels)

    Raises:
        EmptyLossError: If every channel is NULL at every valid pixel

    Returns:
        LossGrad: The loss and its gradient
    """
    o = np.asarray(logits, dtype=np.float64)
    if tristate.states.shape != o.shape:
        raise ShapeMismatchError(f'Error! logits {o.shape} and tri-state labels '
                                 f'{tristate.states.shape} do not match')
    counted = (tristate.states != NULL) & ~np.asarray(tristate.ignore, dtype=bool)[..., None]
    targets = (tristate.states == POSITIVE).astype(np.float64)
    return masked_bce_loss_grad(o, targets, counted)


def conflict_probe(grad_1: float, grad_2: float) -> ConflictReport:
    """Compares two per-sample gradient contributions on the same logit channel.

    Args:
        grad_1 (float): dL/dO from the first sample
        grad_2 (float): dL/dO from the second sample

    Returns:
        ConflictReport: The signs, their product, and whether they pull in opposite directions
    """
    product = float(grad_1) * float(grad_2)
    signs = (int(np.sign(grad_1)), int(np.sign(grad_2)))
    return ConflictReport(signs, product, product < 0)


def loss_grad(kind: LossKind, logits: LogitMap, labels: LabelMap, membership: np.ndarray,
              tristate: Optional[TriStateLabelMap] = None) -> LossGrad:
    """Dispatches on the loss kind. CR_BCE requires the expanded tristate labels."""
    if kind == LossKind.CE:
        return ce_loss_grad(logits, labels)
    if kind == LossKind.NULL_BCE:
        return null_bce_loss_grad(logits, labels, membership)
    if tristate is None:
        raise ConfigError('Error! CR_BCE requires tri-state labels')
    return cr_bce_loss_grad(logits, tristate)
