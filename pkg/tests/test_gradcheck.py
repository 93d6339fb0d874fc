import numpy as np
import pytest

from uniseg_lab import conflict, gradcheck
from uniseg_lab.model import init_model, num_parameters
from uniseg_lab.uniseg_types import HeadKind, LossKind

loss_heads = [(loss, head) for loss in LossKind for head in HeadKind]


@pytest.mark.fast
@pytest.mark.parametrize("loss, head", loss_heads)
def test_full_chain_gradients(loss: LossKind, head: HeadKind) -> None:
    report = gradcheck.check_gradients(loss, head, seed=0)
    assert report.passed, gradcheck.format_report(report)
    assert report.max_error < gradcheck.TOLERANCE
    assert gradcheck.format_report(report).startswith('PASS')


@pytest.mark.fast
@pytest.mark.parametrize("loss, head", loss_heads)
def test_corrupted_gradients_fail(loss: LossKind, head: HeadKind) -> None:
    report = gradcheck.check_gradients(loss, head, seed=0, corrupt=True)
    assert not report.passed
    assert report.block_errors['w1'] > gradcheck.TOLERANCE
    assert gradcheck.format_report(report).startswith('FAIL')


@pytest.mark.fast
def test_tiny_model_is_tiny() -> None:
    for head in HeadKind:
        model = init_model(gradcheck.IN_DIM, gradcheck.HIDDEN_DIM, gradcheck.NUM_CLASSES, head, 0)
        assert num_parameters(model) <= 500


@pytest.mark.fast
def test_run_all_filters() -> None:
    reports = gradcheck.run_all(losses=[LossKind.CE], heads=[HeadKind.COSINE])
    assert [(r.loss_kind, r.head_kind) for r in reports] == [(LossKind.CE, HeadKind.COSINE)]
    assert len(gradcheck.run_all()) == 6


@pytest.mark.fast
def test_relative_error_floor() -> None:
    err = gradcheck.relative_error(np.array([1e-9, 2.0]), np.array([0.0, 2.0 + 2e-6]))
    assert err[0] == pytest.approx(1e-6)
    assert err[1] == pytest.approx(1e-6, rel=1e-3)


@pytest.mark.fast
def test_conflict_rows() -> None:
    rows = {row.loss: row for row in conflict.conflict_rows(seed=0)}
    ce = rows[LossKind.CE.value]
    assert ce.conflict and ce.grad_1 < 0 < ce.grad_2

    null = rows[LossKind.NULL_BCE.value]
    assert null.grad_2 == 0.0 and not np.signbit(null.grad_2)
    assert not null.conflict

    # the multi-label turns the second sample's rider channel into a positive
    cr = rows[LossKind.CR_BCE.value]
    assert cr.grad_1 < 0 and cr.grad_2 < 0
    assert not cr.conflict


@pytest.mark.fast
def test_overlap_sweep() -> None:
    sweep = conflict.overlap_sweep(seed=0, pairs=8)
    ce = {row.overlap_fraction: row for row in sweep if row.loss == LossKind.CE.value}
    assert ce[0.0].conflict_rate == 1.0
    assert ce[1.0].conflict_rate == 0.0
    assert all(row.conflicting_pairs == 0 for row in sweep if row.loss != LossKind.CE.value)
