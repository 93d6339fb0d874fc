"""The toy segmentation network: a per-pixel tanh MLP feature head followed by
either a linear or a cosine classifier, with explicit forward and backward passes."""
import logging
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from . import __version__, utils
from .errors import ConfigError, DegenerateNormError, ShapeMismatchError
from .uniseg_types import (DatasetTaxonomy, ForwardCache, GradBundle, HeadKind, LogitMap, Params, SegModel)

logger = logging.getLogger(__name__)

DEFAULT_SCALE = 20.0
NORM_EPS = 1e-12
CHECKPOINT_FORMAT = 1


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_model(in_dim: int, hidden_dim: int, num_classes: int, head: HeadKind,
               seed: int, scale: float = DEFAULT_SCALE) -> SegModel:
    """Initializes a model with Glorot-uniform weights and zero biases.

    Args:
        in_dim (int): F_in, the per-pixel feature dimension
        hidden_dim (int): F_h, the width of the hidden layer
        num_classes (int): K_u, the size of the unified label space
        head (HeadKind): LINEAR or COSINE
        seed (int): The seed; the same seed always gives a bitwise-identical model
        scale (float, optional): The cosine scale t. Defaults to 20.

    Raises:
        ConfigError: If a dimension is not positive or t <= 0

    Returns:
        SegModel: The freshly initialized model
    """
    if min(in_dim, hidden_dim, num_classes) < 1:
        raise ConfigError(f'Error! Model dimensions must be positive, not {(in_dim, hidden_dim, num_classes)}')
    if scale <= 0:
        raise ConfigError(f'Error! The cosine scale must be positive, not {scale}')
    rng = np.random.default_rng(seed)
    a1 = glorot_bound(in_dim, hidden_dim)
    a2 = glorot_bound(hidden_dim, num_classes)
    params: Params = {'w1': rng.uniform(-a1, a1, size=(in_dim, hidden_dim)),
                      'b1': np.zeros(hidden_dim)}
    if head == HeadKind.COSINE:
        params['phi'] = rng.uniform(-a2, a2, size=(num_classes, hidden_dim))
    else:
        params['w2'] = rng.uniform(-a2, a2, size=(num_classes, hidden_dim))
        params['b2'] = np.zeros(num_classes)
    return SegModel(HeadKind(head), params, float(scale))


def _norms(v: np.ndarray) -> np.ndarray:
    # Guarded norm; never zero during training.
    return np.sqrt(np.sum(v * v, axis=-1) + NORM_EPS)


def cosine_scores(phi: np.ndarray, h: np.ndarray, scale: float = DEFAULT_SCALE) -> np.ndarray:
    """S^(c) = t * cos(phi_c, h), using exact norms.

    Args:
        phi (np.ndarray): (K_u, F_h) class weight rows
        h (np.ndarray): (..., F_h) features
        scale (float, optional): t. Defaults to 20.

    Raises:
        DegenerateNormError: If h or a row of phi has norm exactly zero

    Returns:
        np.ndarray: (..., K_u) scores, each in [-t, t]
    """
    h = np.asarray(h, dtype=np.float64)
    h_norm = np.linalg.norm(h, axis=-1)
    phi_norm = np.linalg.norm(phi, axis=-1)
    if np.any(h_norm == 0) or np.any(phi_norm == 0):
        raise DegenerateNormError('Error! degenerate norm: cosine_scores was given a zero vector')
    return scale * ((h / h_norm[..., None]) @ (phi / phi_norm[:, None]).T)


def _flatten(model: SegModel, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim < 1 or x.shape[-1] != model.in_dim:
        raise ShapeMismatchError(f'Error! features have shape {x.shape} but the model expects '
                                 f'{model.in_dim} input channels')
    return x.reshape(-1, model.in_dim)


def forward_cached(model: SegModel, features: np.ndarray) -> Tuple[LogitMap, ForwardCache]:
    """Like forward(), but also returns the activations that backward() needs.

    Args:
        model (SegModel): The model
        features (np.ndarray): (..., F_in) features

    Returns:
        Tuple[LogitMap, ForwardCache]: (..., K_u) logits and the cache
    """
    x = _flatten(model, features)
    p = model.params
    h = np.tanh(x @ p['w1'] + p['b1'])
    if model.head == HeadKind.COSINE:
        h_norm = _norms(h)
        phi_norm = _norms(p['phi'])
        o = model.scale * ((h / h_norm[:, None]) @ (p['phi'] / phi_norm[:, None]).T)
        cache = ForwardCache(x, h, h_norm, phi_norm)
    else:
        o = h @ p['w2'].T + p['b2']
        cache = ForwardCache(x, h, None, None)
    shape = np.shape(features)[:-1] + (model.num_classes,)
    return o.reshape(shape), cache


def forward(model: SegModel, features: np.ndarray) -> LogitMap:
    """Per-pixel h = tanh(x W1 + b1), then the classifier head.

    Args:
        model (SegModel): The model
        features (np.ndarray): (..., F_in) features, e.g. an H x W x F_in image

    Raises:
        ShapeMismatchError: If the last axis is not F_in

    Returns:
        LogitMap: (..., K_u) logits
    """
    return forward_cached(model, features)[0]


def backward(model: SegModel, features: np.ndarray, dlogits: LogitMap,
             cache: Optional[ForwardCache] = None) -> GradBundle:
    """Exact parameter gradients given dL/dO, by the chain rule through the head and the tanh layer.\n
    For the cosine head this includes the Jacobian of both normalizations:
    d(v / |v|) maps an upstream g to (g - v_hat (v_hat . g)) / |v|.

    Args:
        model (SegModel): The model
        features (np.ndarray): (..., F_in) the features given to forward
        dlogits (LogitMap): (..., K_u) dL/dO
        cache (Optional[ForwardCache], optional): The cache from forward_cached on the same inputs. Defaults to None.

    Raises:
        ShapeMismatchError: If dlogits does not match the logits of features

    Returns:
        GradBundle: dL/dtheta with the same keys and shapes as model.params
    """
    if cache is None:
        _, cache = forward_cached(model, features)
    g = np.asarray(dlogits, dtype=np.float64)
    if g.shape[-1:] != (model.num_classes,) or g.size // model.num_classes != cache.x.shape[0]:
        raise ShapeMismatchError(f'Error! dL/dO has shape {g.shape}; expected '
                                 f'{np.shape(features)[:-1] + (model.num_classes,)}')
    g = g.reshape(-1, model.num_classes)
    p = model.params
    h = cache.h
    grads: Params = {}

    if model.head == HeadKind.COSINE:
        assert cache.h_norm is not None and cache.phi_norm is not None
        h_hat = h / cache.h_norm[:, None]
        phi_hat = p['phi'] / cache.phi_norm[:, None]
        d_h_hat = model.scale * (g @ phi_hat)
        d_phi_hat = model.scale * (g.T @ h_hat)
        dh = (d_h_hat - h_hat * np.sum(h_hat * d_h_hat, axis=1, keepdims=True)) / cache.h_norm[:, None]
        grads['phi'] = (d_phi_hat - phi_hat * np.sum(phi_hat * d_phi_hat, axis=1, keepdims=True)) \
            / cache.phi_norm[:, None]
    else:
        grads['w2'] = g.T @ h
        grads['b2'] = np.sum(g, axis=0)
        dh = g @ p['w2']

    da = dh * (1.0 - h * h)
    grads['w1'] = cache.x.T @ da
    grads['b1'] = np.sum(da, axis=0)
    return GradBundle({key: grads[key] for key in p})


def num_parameters(model: SegModel) -> int:
    return int(sum(v.size for v in model.params.values()))


def save_checkpoint(model: SegModel, path: Path,
                    taxonomies: Optional[Sequence[DatasetTaxonomy]] = None) -> None:
    """Writes the model as JSON. Python's float repr round-trips float64 exactly,
    so load_checkpoint(save_checkpoint(m)) is bitwise equal to m.

    Args:
        model (SegModel): The model
        path (Path): The output file
        taxonomies (Optional[Sequence[DatasetTaxonomy]], optional): The training taxonomies,
        in registration order, so the unified space can be rebuilt later. Defaults to None.
    """
    doc = {
        'format': CHECKPOINT_FORMAT,
        'uniseg_lab_version': __version__,
        'head': model.head.value,
        'scale': model.scale,
        'dims': {'in_dim': model.in_dim, 'hidden_dim': model.hidden_dim, 'num_classes': model.num_classes},
        'params': {key: {'shape': list(val.shape), 'data': val.ravel(order='C').tolist()}
                   for key, val in model.params.items()},
        'taxonomies': [{'dataset_id': t.dataset_id, 'classes': list(t.classes)} for t in taxonomies or []],
    }
    utils.write_json(path, doc)


def load_checkpoint(path: Path) -> Tuple[SegModel, Sequence[DatasetTaxonomy]]:
    """The inverse function to save_checkpoint()

    Args:
        path (Path): The checkpoint file

    Raises:
        ConfigError: If the file is not a readable checkpoint

    Returns:
        Tuple[SegModel, Sequence[DatasetTaxonomy]]: The model and its training taxonomies
    """
    try:
        doc = utils.read_json(path)
    except (OSError, ValueError) as ex:
        raise ConfigError(f'Error! Cannot read checkpoint {path}: {ex}') from ex
    if doc.get('format') != CHECKPOINT_FORMAT:
        raise ConfigError(f"Error! {path} has checkpoint format {doc.get('format')}; "
                          f'expected {CHECKPOINT_FORMAT}')
    params: Params = {key: np.array(block['data'], dtype=np.float64).reshape(block['shape'])
                      for key, block in doc['params'].items()}
    model = SegModel(HeadKind(doc['head']), params, float(doc['scale']))
    dims = doc['dims']
    if (model.in_dim, model.hidden_dim, model.num_classes) != \
            (dims['in_dim'], dims['hidden_dim'], dims['num_classes']):
        raise ConfigError(f'Error! {path} declares dims {dims} that do not match its parameters')
    taxonomies = [DatasetTaxonomy(t['dataset_id'], tuple(t['classes'])) for t in doc.get('taxonomies', [])]
    return model, taxonomies
