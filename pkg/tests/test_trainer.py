import numpy as np
import pytest

from uniseg_lab import relations, synth, trainer
from uniseg_lab.errors import ConfigError, NonFiniteGradientError, ShapeMismatchError
from uniseg_lab.labelspace import unify
from uniseg_lab.losses import loss_grad
from uniseg_lab.model import backward, forward_cached, init_model
from uniseg_lab.uniseg_types import HeadKind, LossKind, TauRule

spec, taxonomies = synth.default_fixture(seed=0)
space = unify(taxonomies)
small = synth.generate_bundle(spec, taxonomies, 3, 1, 8, 8)
quick = {'max_iters': 12, 'batch_size': 2}


@pytest.mark.fast
def test_default_config() -> None:
    config = trainer.build_train_config()
    assert config.loss_kind == LossKind.NULL_BCE and config.head_kind == HeadKind.LINEAR
    assert config.lr0 == 0.05
    assert (config.momentum, config.poly_power, config.max_iters, config.batch_size) == (0.9, 0.9, 2000, 8)
    assert trainer.build_train_config({'head_kind': 'COSINE'}).lr0 == 0.1
    assert trainer.build_train_config({'lr0': 0.3, 'data': 'fixture:default'}).lr0 == 0.3
    assert config.tau_rule == TauRule.ARGMAX
    wide = trainer.build_train_config({'tau_rule': 'STRONGEST_OTHER'})
    assert wide.tau_rule == TauRule.STRONGEST_OTHER
    assert trainer.config_to_doc(wide)['tau_rule'] == 'STRONGEST_OTHER'


@pytest.mark.fast
@pytest.mark.parametrize("overrides", [{'loss_kind': 'FOCAL'}, {'lr0': -1.0}, {'momentum': 1.0},
                                       {'max_iters': 0}, {'stage1': {'bogus': 1}},
                                       {'tau_rule': 'MEDIAN'}])
def test_invalid_config(overrides: dict) -> None:
    with pytest.raises(ConfigError):
        trainer.build_train_config(overrides)


@pytest.mark.fast
def test_stage1_config() -> None:
    base = trainer.build_train_config({'loss_kind': 'CR_BCE', 'stage1': {'max_iters': 7}})
    stage1 = trainer.stage1_config(base)
    assert stage1.loss_kind == LossKind.NULL_BCE and stage1.head_kind == HeadKind.COSINE
    assert stage1.lr0 == 0.1
    assert stage1.max_iters == 7 and stage1.seed == base.seed
    cosine = trainer.build_train_config({'head_kind': 'COSINE', 'lr0': 0.2})
    assert trainer.stage1_config(cosine).lr0 == 0.2


@pytest.mark.fast
def test_poly_lr() -> None:
    assert trainer.poly_lr(0.1, 0, 10, 0.9) == 0.1
    assert trainer.poly_lr(0.1, 10, 10, 0.9) == 0.0
    assert trainer.poly_lr(0.1, 5, 10, 1.0) == pytest.approx(0.05)
    assert trainer.poly_lr(0.01, 1000, 2000, 0.9) == pytest.approx(0.005359, abs=5e-7)
    schedule = [trainer.poly_lr(0.05, i, 2000, 0.9) for i in range(2001)]
    assert all(later <= earlier for earlier, later in zip(schedule, schedule[1:]))


@pytest.mark.fast
def test_sgd_step_matches_unrolled_recurrence() -> None:
    rng = np.random.default_rng(0)
    theta0 = {'w': rng.standard_normal((3, 2))}
    g1 = {'w': rng.standard_normal((3, 2))}
    g2 = {'w': rng.standard_normal((3, 2))}
    params, velocity = trainer.sgd_step(theta0, g1, {'w': np.zeros((3, 2))}, 0.1, 0.9)
    params, velocity = trainer.sgd_step(params, g2, velocity, 0.05, 0.9)

    v1 = 0.9 * np.zeros((3, 2)) + g1['w']
    theta1 = theta0['w'] - 0.1 * v1
    v2 = 0.9 * v1 + g2['w']
    theta2 = theta1 - 0.05 * v2
    assert np.array_equal(params['w'], theta2)
    assert np.array_equal(velocity['w'], v2)


@pytest.mark.fast
def test_sgd_step_errors() -> None:
    theta = {'w': np.zeros(2)}
    with pytest.raises(NonFiniteGradientError):
        trainer.sgd_step(theta, {'w': np.array([1.0, np.nan])}, {'w': np.zeros(2)}, 0.1, 0.9)
    with pytest.raises(ShapeMismatchError):
        trainer.sgd_step(theta, {'w': np.zeros(3)}, {'w': np.zeros(2)}, 0.1, 0.9)


@pytest.mark.fast
@pytest.mark.parametrize("head", [HeadKind.LINEAR, HeadKind.COSINE])
def test_null_bce_leaves_out_of_space_rows_untouched(head: HeadKind) -> None:
    """A batch from one dataset moves no classifier row of a class that dataset lacks."""
    pool = [p for p in trainer.concatenate(small.train, space) if p.dataset_id == 'COARSE']
    batch = trainer.make_batch(pool, [False] * len(pool), space, None)
    model = init_model(spec.feature_dim, 6, space.num_classes, head, seed=5)
    logits, cache = forward_cached(model, batch.features)
    _, dlogits = loss_grad(LossKind.NULL_BCE, logits, batch.labels, batch.membership)
    grads = backward(model, batch.features, dlogits, cache).blocks
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    params, _ = trainer.sgd_step(model.params, grads, velocity, 0.1, 0.9)

    outside = np.flatnonzero(~space.membership['COARSE'])
    assert outside.size > 0
    rows = ['phi'] if head == HeadKind.COSINE else ['w2', 'b2']
    for key in rows:
        assert not np.any(grads[key][outside])
        assert np.array_equal(params[key][outside], model.params[key][outside])
        assert not np.array_equal(params[key], model.params[key])


@pytest.mark.fast
def test_batches_cover_every_image_each_epoch() -> None:
    pool = trainer.concatenate(small.train, space)
    assert [p.dataset_id for p in pool] == ['COARSE'] * 3 + ['FINE'] * 3
    config = trainer.build_train_config({'batch_size': 2, 'hflip': False})
    stream = trainer.batches(pool, config, np.random.default_rng(0))
    seen = []
    for _ in range(3):
        items, flips = next(stream)
        assert not any(flips)
        seen.extend(id(item) for item in items)
    assert sorted(seen) == sorted(id(item) for item in pool)


@pytest.mark.fast
def test_make_batch_flips_labels_with_features() -> None:
    pool = trainer.concatenate(small.train, space)
    batch = trainer.make_batch(pool[:1], [True], space, None)
    assert np.array_equal(batch.features.reshape(8, 8, -1), pool[0].features[:, ::-1])
    assert np.array_equal(batch.labels.reshape(8, 8), pool[0].labels[:, ::-1])
    assert batch.membership.shape == (64, space.num_classes)
    assert batch.tristate is None


@pytest.mark.fast
@pytest.mark.parametrize("loss", [LossKind.CE, LossKind.NULL_BCE])
def test_train_is_deterministic(loss: LossKind) -> None:
    config = trainer.build_train_config({**quick, 'loss_kind': loss.value})
    a = trainer.train(small.train, space, config)
    b = trainer.train(small.train, space, config)
    assert a.losses == b.losses and a.lrs == b.lrs
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.model.params)
    assert len(a.losses) == 12 and a.lrs[0] == config.lr0
    assert a.config['loss_kind'] == loss.value


@pytest.mark.fast
def test_zero_learning_rate_keeps_the_model() -> None:
    config = trainer.build_train_config({**quick, 'lr0': 0.0})
    start = init_model(spec.feature_dim, 16, space.num_classes, HeadKind.LINEAR, 4)
    record = trainer.train(small.train, space, config, model=start)
    assert all(np.array_equal(record.model.params[k], start.params[k]) for k in start.params)


@pytest.mark.fast
def test_train_errors() -> None:
    with pytest.raises(ConfigError):
        trainer.train({}, space, trainer.build_train_config(quick))
    with pytest.raises(ConfigError):
        trainer.train(small.train, space, trainer.build_train_config({**quick, 'loss_kind': 'CR_BCE'}))


@pytest.mark.fast
def test_self_only_cr_bce_equals_null_bce() -> None:
    """With no multi-labels the class-relational run is the Null BCE run, bit for bit."""
    table = relations.self_only_table(space)
    null = trainer.build_train_config({**quick, 'loss_kind': 'NULL_BCE'})
    cr = null._replace(loss_kind=LossKind.CR_BCE)
    run_null = trainer.train(small.train, space, null)
    run_cr = trainer.train(small.train, space, cr, table)
    assert run_null.losses == run_cr.losses
    assert all(np.array_equal(run_null.model.params[k], run_cr.model.params[k]) for k in run_null.model.params)

    pool = trainer.concatenate(small.train, space)
    batch = trainer.make_batch(pool[2:5], [False, True, False], space, table)
    logits = np.random.default_rng(1).standard_normal((batch.labels.size, space.num_classes))
    loss_n, grad_n = loss_grad(LossKind.NULL_BCE, logits, batch.labels, batch.membership)
    loss_c, grad_c = loss_grad(LossKind.CR_BCE, logits, batch.labels, batch.membership, batch.tristate)
    assert loss_n == loss_c
    assert np.array_equal(grad_n, grad_c)


@pytest.mark.fast
def test_cr_pipeline_runs_both_stages() -> None:
    config = trainer.build_train_config({**quick, 'loss_kind': 'CR_BCE', 'stage1': {'max_iters': 5}})
    result = trainer.run_cr_pipeline(small.train, space, config)
    assert len(result.stage1.losses) == 5
    assert result.stage1.model.head == HeadKind.COSINE
    assert result.stage2.config['loss_kind'] == LossKind.CR_BCE.value
    assert result.stage2.model.head == HeadKind.LINEAR
    assert set(result.table.entries) == set(result.similarity.counts)
    assert result.tau is None or 0.0 < result.tau < 1.0


@pytest.mark.slow
def test_training_reduces_the_loss() -> None:
    """NULL_BCE on the default fixture (seed 0, default budget) ends below 10% of its initial loss."""
    data = synth.load_data('fixture:default')
    record = trainer.train(data.train, unify(data.taxonomies), trainer.build_train_config())
    assert len(record.losses) == 2000
    assert np.mean(record.losses[-20:]) < 0.1 * record.losses[0]
