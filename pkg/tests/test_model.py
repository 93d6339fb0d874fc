from pathlib import Path

import numpy as np
import pytest

from uniseg_lab.errors import ConfigError, DegenerateNormError, ShapeMismatchError
from uniseg_lab.labelspace import make_taxonomy
from uniseg_lab.model import (backward, cosine_scores, forward, forward_cached, init_model, load_checkpoint,
                              num_parameters, save_checkpoint)
from uniseg_lab.uniseg_types import HeadKind

rng = np.random.default_rng(7)
features = rng.standard_normal((4, 5, 3))


@pytest.mark.fast
@pytest.mark.parametrize("head", list(HeadKind))
def test_init_is_deterministic(head: HeadKind) -> None:
    a = init_model(3, 4, 6, head, seed=11)
    b = init_model(3, 4, 6, head, seed=11)
    c = init_model(3, 4, 6, head, seed=12)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not np.array_equal(a.params['w1'], c.params['w1'])
    assert (a.in_dim, a.hidden_dim, a.num_classes) == (3, 4, 6)
    assert np.all(a.params['b1'] == 0.0)


@pytest.mark.fast
def test_param_counts() -> None:
    assert num_parameters(init_model(3, 4, 5, HeadKind.LINEAR, 0)) == 3 * 4 + 4 + 5 * 4 + 5
    assert num_parameters(init_model(3, 4, 5, HeadKind.COSINE, 0)) == 3 * 4 + 4 + 5 * 4


@pytest.mark.fast
def test_init_rejects_bad_dims() -> None:
    with pytest.raises(ConfigError):
        init_model(3, 0, 5, HeadKind.LINEAR, 0)
    with pytest.raises(ConfigError):
        init_model(3, 4, 5, HeadKind.COSINE, 0, scale=0.0)


@pytest.mark.fast
@pytest.mark.parametrize("head", list(HeadKind))
def test_forward_shapes(head: HeadKind) -> None:
    model = init_model(3, 4, 6, head, 0)
    assert forward(model, features).shape == (4, 5, 6)
    assert forward(model, features.reshape(-1, 3)).shape == (20, 6)
    with pytest.raises(ShapeMismatchError):
        forward(model, rng.standard_normal((4, 5, 2)))


@pytest.mark.fast
def test_cosine_scores_are_bounded() -> None:
    phi = rng.standard_normal((6, 4))
    h = rng.standard_normal((10, 4))
    s = cosine_scores(phi, h, 20.0)
    assert s.shape == (10, 6)
    assert np.all(np.abs(s) <= 20.0 + 1e-12)
    # a feature parallel to phi_0 scores t on class 0
    assert cosine_scores(phi, 3.0 * phi[0], 20.0)[0] == pytest.approx(20.0)


@pytest.mark.fast
def test_cosine_scores_ignore_feature_scale() -> None:
    phi = rng.standard_normal((6, 4))
    h = rng.standard_normal((10, 4))
    assert np.max(np.abs(cosine_scores(phi, 2.0 * h) - cosine_scores(phi, h))) < 1e-12


@pytest.mark.fast
def test_orthogonal_feature_scores_zero() -> None:
    phi = np.array([[1.0, 0.0, 0.0], [0.0, -2.0, 0.0]])
    assert np.array_equal(cosine_scores(phi, np.array([0.0, 0.0, 2.5])), np.zeros(2))
    phi = rng.standard_normal((3, 5))
    h = np.linalg.svd(phi)[2][-1]  # spans the null space of phi
    assert np.max(np.abs(cosine_scores(phi, h))) < 1e-12


@pytest.mark.fast
def test_cosine_scores_degenerate_norm() -> None:
    phi = rng.standard_normal((6, 4))
    with pytest.raises(DegenerateNormError):
        cosine_scores(phi, np.zeros(4))
    phi[2] = 0.0
    with pytest.raises(DegenerateNormError):
        cosine_scores(phi, np.ones(4))


@pytest.mark.fast
def test_cosine_forward_matches_cosine_scores() -> None:
    model = init_model(3, 4, 6, HeadKind.COSINE, 3)
    _, cache = forward_cached(model, features)
    expected = cosine_scores(model.params['phi'], cache.h, model.scale)
    assert np.allclose(forward(model, features).reshape(-1, 6), expected, atol=1e-9)


@pytest.mark.fast
def test_linear_w2_gradient_against_loop() -> None:
    model = init_model(3, 4, 6, HeadKind.LINEAR, 5)
    dlogits = rng.standard_normal((4, 5, 6))
    grads = backward(model, features, dlogits).blocks
    p = model.params
    expected = np.zeros_like(p['w2'])
    for r in range(4):
        for c in range(5):
            h = np.tanh(features[r, c] @ p['w1'] + p['b1'])
            expected += np.outer(dlogits[r, c], h)
    np.testing.assert_allclose(grads['w2'], expected, rtol=1e-12, atol=1e-12)
    assert set(grads) == set(p)
    assert all(grads[k].shape == p[k].shape for k in p)


@pytest.mark.fast
def test_backward_shape_mismatch() -> None:
    model = init_model(3, 4, 6, HeadKind.LINEAR, 5)
    with pytest.raises(ShapeMismatchError):
        backward(model, features, np.zeros((4, 5, 5)))


@pytest.mark.fast
@pytest.mark.parametrize("head", list(HeadKind))
def test_checkpoint_is_bitwise(tmp_path: Path, head: HeadKind) -> None:
    model = init_model(3, 4, 6, head, 9)
    model = model._replace(params={k: v + rng.standard_normal(v.shape) for k, v in model.params.items()})
    taxonomies = [make_taxonomy('A', ['road', 'rider'])]
    path = tmp_path / 'checkpoint.json'
    save_checkpoint(model, path, taxonomies)
    loaded, loaded_taxonomies = load_checkpoint(path)
    assert loaded.head == model.head and loaded.scale == model.scale
    assert all(np.array_equal(loaded.params[k], model.params[k]) for k in model.params)
    assert list(loaded_taxonomies) == taxonomies


@pytest.mark.fast
def test_load_checkpoint_errors(tmp_path: Path) -> None:
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / 'missing.json')
    bad = tmp_path / 'bad.json'
    bad.write_text('{"format": 99}', encoding='utf-8')
    with pytest.raises(ConfigError):
        load_checkpoint(bad)
