"""Full-chain gradient check (loss o forward) against central finite differences."""
import logging
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .losses import loss_grad
from .model import backward, forward, init_model, num_parameters
from .uniseg_types import (IGNORE, NEGATIVE, NULL, POSITIVE, GradCheckReport, HeadKind, LossKind, SegModel,
                           TriStateLabelMap)

logger = logging.getLogger(__name__)

TOLERANCE = 1e-5
STEP = 1e-6
# Relative errors are measured against max(|analytic|, |numeric|, FLOOR), so a
# true gradient of ~0 is compared on an absolute scale.
FLOOR = 1e-3

IN_DIM, HIDDEN_DIM, NUM_CLASSES, SIDE = 3, 4, 5, 3
MEMBER_CLASSES = 3


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = FLOOR) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_gradient(loss_fn: Callable[[SegModel], float], model: SegModel,
                     step: float = STEP) -> Dict[str, np.ndarray]:
    """Central differences (L(theta + h) - L(theta - h)) / 2h over every parameter entry.

    Args:
        loss_fn (Callable[[SegModel], float]): Maps a model to a scalar loss
        model (SegModel): The point at which to differentiate
        step (float, optional): h. Defaults to 1e-6.

    Returns:
        Dict[str, np.ndarray]: One block per parameter block
    """
    numeric: Dict[str, np.ndarray] = {}
    for key, block in model.params.items():
        out = np.zeros_like(block)
        for idx in np.ndindex(block.shape):
            shifted = {k: v.copy() for k, v in model.params.items()}
            shifted[key][idx] = block[idx] + step
            plus = loss_fn(model._replace(params=shifted))
            shifted[key][idx] = block[idx] - step
            minus = loss_fn(model._replace(params=shifted))
            out[idx] = (plus - minus) / (2.0 * step)
        numeric[key] = out
    return numeric


def tiny_problem(seed: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, TriStateLabelMap]:
    """A 3x3 image with 3 input channels over a 5-class unified space, of which the
    sample's dataset owns the first 3. One pixel is IGNORE, and pixels of class 0
    carry an activated secondary on channel 3."""
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((SIDE, SIDE, IN_DIM))
    labels = rng.integers(0, MEMBER_CLASSES, size=(SIDE, SIDE))
    labels[0, 0] = IGNORE
    membership = np.arange(NUM_CLASSES) < MEMBER_CLASSES

    states = np.broadcast_to(np.where(membership, NEGATIVE, NULL).astype(np.int8),
                             (SIDE, SIDE, NUM_CLASSES)).copy()
    valid = labels != IGNORE
    rows, cols = np.nonzero(valid)
    states[rows, cols, labels[rows, cols]] = POSITIVE
    states[labels == 0, MEMBER_CLASSES] = POSITIVE
    return features, labels, membership, TriStateLabelMap(states, ~valid)


def check_gradients(loss_kind: LossKind, head_kind: HeadKind, seed: int = 0, corrupt: bool = False,
                    tolerance: float = TOLERANCE) -> GradCheckReport:
    """Compares backward() o loss gradients with central finite differences on a tiny model.

    Args:
        loss_kind (LossKind): The loss
        head_kind (HeadKind): The classifier head
        seed (int, optional): Seeds both the model and the problem. Defaults to 0.
        corrupt (bool, optional): Perturb the analytic gradient, as a negative control. Defaults to False.
        tolerance (float, optional): The pass threshold on the max relative error. Defaults to 1e-5.

    Returns:
        GradCheckReport: The worst relative error per parameter block
    """
    features, labels, membership, tristate = tiny_problem(seed)
    model = init_model(IN_DIM, HIDDEN_DIM, NUM_CLASSES, head_kind, seed)
    # Nonzero biases, so their gradients are exercised away from the init point.
    rng = np.random.default_rng(seed + 1)
    params = {k: (v + 0.1 * rng.standard_normal(v.shape) if k.startswith('b') else v) for k, v in model.params.items()}
    model = model._replace(params=params)

    def loss_fn(m: SegModel) -> float:
        return loss_grad(loss_kind, forward(m, features), labels, membership, tristate)[0]

    _, dlogits = loss_grad(loss_kind, forward(model, features), labels, membership, tristate)
    analytic = {k: v.copy() for k, v in backward(model, features, dlogits).blocks.items()}
    if corrupt:
        analytic['w1'].flat[0] += 1e-2
    numeric = numeric_gradient(loss_fn, model)

    block_errors = {k: float(np.max(relative_error(analytic[k], numeric[k]))) for k in model.params}
    worst = max(block_errors.values())
    logger.debug('gradcheck %s/%s over %d parameters: max relative error %.3e', loss_kind.value,
                 head_kind.value, num_parameters(model), worst)
    return GradCheckReport(loss_kind, head_kind, block_errors, worst, tolerance)


def run_all(seed: int = 0, corrupt: bool = False, losses: Optional[List[LossKind]] = None,
            heads: Optional[List[HeadKind]] = None) -> List[GradCheckReport]:
    losses = losses or list(LossKind)
    heads = heads or list(HeadKind)
    return [check_gradients(loss, head, seed, corrupt) for loss in losses for head in heads]


def format_report(report: GradCheckReport) -> str:
    blocks = ' '.join(f'{k}={v:.2e}' for k, v in report.block_errors.items())
    status = 'PASS' if report.passed else 'FAIL'
    return (f'{status} {report.loss_kind.value:8s} {report.head_kind.value:6s} '
            f'max_rel_err={report.max_error:.2e} [{blocks}]')
