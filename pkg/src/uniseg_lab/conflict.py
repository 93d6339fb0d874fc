"""Gradient-conflict demonstration: two samples with identical features but
conflicting labels from two datasets, and the per-sample gradient each loss
sends to the shared "rider" logit."""
import logging
from pathlib import Path
from typing import List, NamedTuple, Sequence

import numpy as np

from . import utils
from .labelspace import make_taxonomy, unify
from .losses import ce_loss_grad, conflict_probe, cr_bce_loss_grad, null_bce_loss_grad
from .relations import expand_pixel_labels
from .uniseg_types import LossKind, MultiLabelTable, UnifiedLabelSpace

logger = logging.getLogger(__name__)

OVERLAP_FRACTIONS = (0.0, 0.25, 0.5, 0.75, 1.0)
SHARED_CLASS = 'rider'


class ConflictRow(NamedTuple):
    loss: str
    channel: str
    grad_1: float
    grad_2: float
    product: float
    conflict: bool


class SweepRow(NamedTuple):
    overlap_fraction: float
    loss: str
    pairs: int
    conflicting_pairs: int
    conflict_rate: float


def demo_space() -> UnifiedLabelSpace:
    """Dataset A knows only "rider"; dataset B splits it into "motorcyclist"."""
    return unify([make_taxonomy('A', ['road', 'rider']), make_taxonomy('B', ['road', 'motorcyclist'])])


def demo_table(space: UnifiedLabelSpace) -> MultiLabelTable:
    """The table relation discovery produces here: (B, motorcyclist) -> rider."""
    entries = {(d, int(c)): frozenset([int(c)]) for d in space.dataset_ids for c in space.remap[d]}
    moto = space.index('motorcyclist')
    entries[('B', moto)] = frozenset([moto, space.index(SHARED_CLASS)])
    return MultiLabelTable(entries, None, ('hand-built demo table',))


def per_sample_grad(loss: LossKind, logits: np.ndarray, label: str, dataset_id: str,
                    space: UnifiedLabelSpace, table: MultiLabelTable) -> np.ndarray:
    """dL/dO of a single pixel labeled `label` in `dataset_id`."""
    y = np.array([space.index(label)])
    o = logits[None, :]
    if loss == LossKind.CE:
        return ce_loss_grad(o, y)[1][0]
    if loss == LossKind.NULL_BCE:
        return null_bce_loss_grad(o, y, space.membership[dataset_id])[1][0]
    return cr_bce_loss_grad(o, expand_pixel_labels(y, dataset_id, table, space))[1][0]


def conflict_rows(seed: int = 0) -> List[ConflictRow]:
    """Identical logits; A labels the pixel rider, B labels it motorcyclist.

    Args:
        seed (int, optional): Seeds the shared logits. Defaults to 0.

    Returns:
        List[ConflictRow]: One row per loss, for the shared rider channel
    """
    space = demo_space()
    table = demo_table(space)
    logits = np.random.default_rng(seed).standard_normal(space.num_classes)
    k = space.index(SHARED_CLASS)
    rows = []
    for loss in LossKind:
        g1 = per_sample_grad(loss, logits, SHARED_CLASS, 'A', space, table)[k]
        g2 = per_sample_grad(loss, logits, 'motorcyclist', 'B', space, table)[k]
        report = conflict_probe(g1, g2)
        rows.append(ConflictRow(loss.value, SHARED_CLASS, float(g1), float(g2), report.product, report.conflict))
    return rows


def overlap_sweep(seed: int = 0, pairs: int = 20,
                  fractions: Sequence[float] = OVERLAP_FRACTIONS) -> List[SweepRow]:
    """Pairs of pixels with identical logits, labeled once by A and once by B.
    A fraction f of the pairs agree (both "road"); the rest conflict (rider vs motorcyclist).

    Args:
        seed (int, optional): Seeds the logits. Defaults to 0.
        pairs (int, optional): Pixel pairs per fraction. Defaults to 20.
        fractions (Sequence[float], optional): The overlap fractions. Defaults to (0, .25, .5, .75, 1).

    Returns:
        List[SweepRow]: One row per (fraction, loss)
    """
    space = demo_space()
    table = demo_table(space)
    k = space.index(SHARED_CLASS)
    rng = np.random.default_rng(seed)
    rows = []
    for fraction in fractions:
        logits = rng.standard_normal((pairs, space.num_classes))
        n_agree = int(round(fraction * pairs))
        for loss in LossKind:
            conflicting = 0
            for p in range(pairs):
                label_a, label_b = ('road', 'road') if p < n_agree else (SHARED_CLASS, 'motorcyclist')
                g1 = per_sample_grad(loss, logits[p], label_a, 'A', space, table)[k]
                g2 = per_sample_grad(loss, logits[p], label_b, 'B', space, table)[k]
                conflicting += int(conflict_probe(g1, g2).conflict)
            rows.append(SweepRow(fraction, loss.value, pairs, conflicting, conflicting / pairs))
    return rows


def write_conflict_demo(out_dir: Path, seed: int = 0) -> List[Path]:
    rows = conflict_rows(seed)
    sweep = overlap_sweep(seed)
    conflict_csv = out_dir / 'conflict.csv'
    sweep_csv = out_dir / 'conflict_sweep.csv'
    utils.write_csv(conflict_csv, ConflictRow._fields, rows)
    utils.write_csv(sweep_csv, SweepRow._fields, sweep)
    logger.info('wrote %s and %s', conflict_csv, sweep_csv)
    return [conflict_csv, sweep_csv]
