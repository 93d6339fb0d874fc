"""SGD training over the concatenation of several datasets, and the two-stage
class-relational pipeline (Null BCE + cosine pre-training, relation discovery,
then class-relational BCE)."""
import copy
import logging
import time
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from mergedeep import Strategy, merge

from . import relations, utils
from .errors import ConfigError, NonFiniteGradientError, ShapeMismatchError
from .labelspace import remap_labels
from .losses import loss_grad
from .model import backward, forward_cached, init_model, save_checkpoint
from .schemas import config_schema
from .uniseg_types import (CRPipelineResult, DatasetTaxonomy, HeadKind, Json, LossKind, MultiLabelTable, Params,
                           RunRecord, Sample, SegModel, TauRule, TrainConfig, TriStateLabelMap,
                           UnifiedLabelSpace)

logger = logging.getLogger(__name__)

DEFAULT_LR = {HeadKind.LINEAR.value: 0.05, HeadKind.COSINE.value: 0.1}

DEFAULT_TRAIN_CONFIG: Json = {
    'loss_kind': LossKind.NULL_BCE.value,
    'head_kind': HeadKind.LINEAR.value,
    'lr0': None,  # None means DEFAULT_LR of the head
    'momentum': 0.9,
    'poly_power': 0.9,
    'max_iters': 2000,
    'batch_size': 8,
    'hflip': True,
    'seed': 0,
    'hidden_dim': 16,
    'scale': 20.0,
    'tau_rule': TauRule.ARGMAX.value,
    # The relation pre-training stage always uses NULL_BCE and a cosine head.
    'stage1': {},
}


def build_train_config(overrides: Optional[Json] = None) -> TrainConfig:
    """Deep-merges overrides onto DEFAULT_TRAIN_CONFIG and freezes the result.\n
    Keys that do not belong to TrainConfig (e.g. the data options of a train config file) are ignored.

    Args:
        overrides (Optional[Json], optional): Any subset of the TrainConfig fields. Defaults to None.

    Raises:
        ConfigError: If the merged config fails validation

    Returns:
        TrainConfig: The config
    """
    overrides = overrides or {}
    picked = {k: v for k, v in overrides.items() if k in DEFAULT_TRAIN_CONFIG}
    merged: Json = merge({}, copy.deepcopy(DEFAULT_TRAIN_CONFIG), copy.deepcopy(picked), strategy=Strategy.REPLACE)
    schema = config_schema.train_config_schema()
    utils.validate(merged, schema, 'train config')
    lr0 = merged['lr0'] if merged['lr0'] is not None else DEFAULT_LR[merged['head_kind']]
    return TrainConfig(loss_kind=LossKind(merged['loss_kind']),
                       head_kind=HeadKind(merged['head_kind']),
                       lr0=float(lr0),
                       momentum=float(merged['momentum']),
                       poly_power=float(merged['poly_power']),
                       max_iters=int(merged['max_iters']),
                       batch_size=int(merged['batch_size']),
                       hflip=bool(merged['hflip']),
                       seed=int(merged['seed']),
                       hidden_dim=int(merged['hidden_dim']),
                       scale=float(merged['scale']),
                       tau_rule=TauRule(merged['tau_rule']),
                       stage1=dict(merged['stage1']))


def config_to_doc(config: TrainConfig) -> Json:
    doc = config._asdict()
    doc['loss_kind'] = config.loss_kind.value
    doc['head_kind'] = config.head_kind.value
    doc['tau_rule'] = config.tau_rule.value
    return doc


def stage1_config(config: TrainConfig) -> TrainConfig:
    """The config of the relation pre-training stage: config with its stage1
    overrides applied, forced to NULL_BCE with a cosine head."""
    doc = config_to_doc(config)
    doc['lr0'] = None if config.head_kind != HeadKind.COSINE else config.lr0
    merged = merge({}, doc, copy.deepcopy(config.stage1), strategy=Strategy.REPLACE)
    merged.update({'loss_kind': LossKind.NULL_BCE.value, 'head_kind': HeadKind.COSINE.value, 'stage1': {}})
    return build_train_config(merged)


def poly_lr(lr0: float, iteration: int, max_iters: int, power: float) -> float:
    """Polynomial decay lr0 * (1 - iteration / max_iters) ** power.

    Args:
        lr0 (float): The initial learning rate
        iteration (int): The current iteration, 0 <= iteration <= max_iters
        max_iters (int): The total number of iterations
        power (float): The decay power

    Returns:
        float: The learning rate
    """
    return float(lr0 * (1.0 - iteration / max_iters) ** power)


def sgd_step(params: Params, grads: Params, velocity: Params, lr: float,
             momentum: float) -> Tuple[Params, Params]:
    """One step of SGD with momentum: v <- momentum * v + g; theta <- theta - lr * v.

    Args:
        params (Params): theta
        grads (Params): g, same keys and shapes
        velocity (Params): v, same keys and shapes
        lr (float): The learning rate
        momentum (float): The momentum

    Raises:
        ShapeMismatchError: If the blocks do not match
        NonFiniteGradientError: If a gradient contains nan or inf

    Returns:
        Tuple[Params, Params]: The new (theta, v); the inputs are not modified
    """
    new_params: Params = {}
    new_velocity: Params = {}
    for key, theta in params.items():
        g = grads.get(key)
        if g is None or g.shape != theta.shape or velocity[key].shape != theta.shape:
            raise ShapeMismatchError(f'Error! Gradient block {key} does not match its parameter')
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f'Error! Non-finite gradient in block {key}; aborting the run')
        v = momentum * velocity[key] + g
        new_velocity[key] = v
        new_params[key] = theta - lr * v
    return new_params, new_velocity


class PooledSample(NamedTuple):
    dataset_id: str
    features: np.ndarray  # (H, W, F_in)
    labels: np.ndarray  # (H, W) unified


def concatenate(datasets: Mapping[str, Sequence[Sample]], space: UnifiedLabelSpace) -> List[PooledSample]:
    """The concatenated pool, in dataset registration order, with labels remapped once."""
    pool = []
    for dataset_id in space.dataset_ids:
        for sample in datasets.get(dataset_id, []):
            pool.append(PooledSample(dataset_id, sample.features,
                                     remap_labels(sample.labels, dataset_id, space)))
    return pool


class Batch(NamedTuple):
    features: np.ndarray  # (N, F_in) pixels of every image in the batch
    labels: np.ndarray  # (N,) unified
    membership: np.ndarray  # (N, K_u)
    tristate: Optional[TriStateLabelMap]  # CR_BCE only


def make_batch(items: Sequence[PooledSample], flips: Sequence[bool], space: UnifiedLabelSpace,
               table: Optional[MultiLabelTable]) -> Batch:
    feats, labels, members, states, ignores = [], [], [], [], []
    for item, flip in zip(items, flips):
        x, y = item.features, item.labels
        if flip:
            x, y = x[:, ::-1], y[:, ::-1]
        n = y.size
        feats.append(x.reshape(n, -1))
        labels.append(y.reshape(n))
        members.append(np.broadcast_to(space.membership[item.dataset_id], (n, space.num_classes)))
        if table is not None:
            tri = relations.expand_pixel_labels(y.reshape(n), item.dataset_id, table, space)
            states.append(tri.states)
            ignores.append(tri.ignore)
    tristate = TriStateLabelMap(np.concatenate(states), np.concatenate(ignores)) if table is not None else None
    return Batch(np.concatenate(feats), np.concatenate(labels), np.concatenate(members), tristate)


def batches(pool: Sequence[PooledSample], config: TrainConfig,
            rng: np.random.Generator) -> Iterator[Tuple[List[PooledSample], List[bool]]]:
    """Yields (items, flips) forever: a fresh seeded permutation of the pool every epoch."""
    order: List[int] = []
    while True:
        picked = []
        while len(picked) < min(config.batch_size, len(pool)):
            if not order:
                order = rng.permutation(len(pool)).tolist()
            picked.append(order.pop(0))
        flips = rng.random(len(picked)) < 0.5 if config.hflip else np.zeros(len(picked), dtype=bool)
        yield [pool[i] for i in picked], flips.tolist()


def train(datasets: Mapping[str, Sequence[Sample]], space: UnifiedLabelSpace, config: TrainConfig,
          table: Optional[MultiLabelTable] = None, model: Optional[SegModel] = None) -> RunRecord:
    """Trains on the concatenation of datasets with SGD + momentum and polynomial LR decay.\n
    Fully deterministic given (datasets, config): the model is initialized from
    config.seed and the batches are drawn from a separate stream derived from it.

    Args:
        datasets (Mapping[str, Sequence[Sample]]): dataset_id -> training samples (local labels)
        space (UnifiedLabelSpace): The unified space of the training datasets
        config (TrainConfig): The config
        table (Optional[MultiLabelTable], optional): The frozen multi-label table (CR_BCE only). Defaults to None.
        model (Optional[SegModel], optional): A starting model instead of a fresh init. Defaults to None.

    Raises:
        ConfigError: If there are no samples, or CR_BCE is requested without a table

    Returns:
        RunRecord: Per-iteration loss and learning rate, the final model, the config echo, and the wall time
    """
    pool = concatenate(datasets, space)
    if not pool:
        raise ConfigError('Error! Cannot train on an empty dataset')
    if config.loss_kind == LossKind.CR_BCE and table is None:
        raise ConfigError('Error! CR_BCE training needs a multi-label table (see run_cr_pipeline)')
    init_seq, batch_seq = np.random.SeedSequence(config.seed).spawn(2)
    if model is None:
        in_dim = pool[0].features.shape[-1]
        model = init_model(in_dim, config.hidden_dim, space.num_classes, config.head_kind,
                           int(init_seq.generate_state(1)[0]), config.scale)
    rng = np.random.default_rng(batch_seq)
    params = {k: v.copy() for k, v in model.params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    expand = table if config.loss_kind == LossKind.CR_BCE else None

    losses: List[float] = []
    lrs: List[float] = []
    start = time.perf_counter()
    stream = batches(pool, config, rng)
    for iteration in range(config.max_iters):
        items, flips = next(stream)
        batch = make_batch(items, flips, space, expand)
        current = model._replace(params=params)
        logits, cache = forward_cached(current, batch.features)
        loss, dlogits = loss_grad(config.loss_kind, logits, batch.labels, batch.membership, batch.tristate)
        grads = backward(current, batch.features, dlogits, cache).blocks
        lr = poly_lr(config.lr0, iteration, config.max_iters, config.poly_power)
        params, velocity = sgd_step(params, grads, velocity, lr, config.momentum)
        losses.append(loss)
        lrs.append(lr)
        if iteration % 500 == 0 or iteration == config.max_iters - 1:
            logger.debug('%s/%s iter %d loss %.6f lr %.6f', config.loss_kind.value, config.head_kind.value,
                         iteration, loss, lr)
    wall_time = time.perf_counter() - start
    logger.info('trained %s/%s for %d iterations in %.2fs (final loss %.6f)', config.loss_kind.value,
                config.head_kind.value, config.max_iters, wall_time, losses[-1])
    return RunRecord(losses, lrs, model._replace(params=params), config_to_doc(config), wall_time)


def run_cr_pipeline(datasets: Mapping[str, Sequence[Sample]], space: UnifiedLabelSpace,
                    config: TrainConfig, pooled: bool = False) -> CRPipelineResult:
    """The two-stage class-relational pipeline.\n
    Stage 1 trains with NULL_BCE and a cosine head; the similarities, tau and the
    multi-label table are computed once on the frozen stage 1 model; stage 2
    trains a fresh model (same seed) with CR_BCE and the frozen table.

    Args:
        datasets (Mapping[str, Sequence[Sample]]): dataset_id -> training samples
        space (UnifiedLabelSpace): The unified space
        config (TrainConfig): The stage 2 config (its stage1 field tunes stage 1)
        pooled (bool, optional): Use pooled similarities. Defaults to False.

    Returns:
        CRPipelineResult: Both runs, the similarities, tau and the table
    """
    stage1 = train(datasets, space, stage1_config(config))
    similarity = relations.compute_similarity(stage1.model, datasets, space, pooled)
    tau = relations.auto_tau(similarity, space, config.tau_rule)
    table = relations.generate_multilabels(similarity, tau, space)
    logger.info('tau = %s with %d activated relations', 'NONE' if tau is None else f'{tau:.6f}',
                len(relations.multilabel_rows(table, space)))
    stage2 = train(datasets, space, config._replace(loss_kind=LossKind.CR_BCE), table)
    return CRPipelineResult(stage1, similarity, tau, table, stage2)


def write_loss_curve(record: RunRecord, path: Path) -> None:
    utils.write_csv(path, ['iteration', 'loss', 'lr'],
                    ([i, loss, lr] for i, (loss, lr) in enumerate(zip(record.losses, record.lrs))))


def write_run(run_dir: Path, record: RunRecord, space: UnifiedLabelSpace,
              taxonomies: Sequence[DatasetTaxonomy], metrics: Optional[Json] = None,
              prefix: str = '') -> Dict[str, Path]:
    """Persists a run: checkpoint, metrics JSON and loss curve CSV.\n
    The wall time goes to the log only; the metrics JSON is byte-identical across reruns.

    Returns:
        Dict[str, Path]: The files written
    """
    files = {'checkpoint': run_dir / f'{prefix}checkpoint.json',
             'metrics': run_dir / f'{prefix}metrics.json',
             'loss_curve': run_dir / f'{prefix}loss_curve.csv'}
    save_checkpoint(record.model, files['checkpoint'], taxonomies)
    doc = {'config': record.config,
           'classes': list(space.classes),
           'initial_loss': record.losses[0],
           'final_loss': record.losses[-1],
           'iterations': len(record.losses),
           'datasets': metrics or {}}
    utils.write_json(files['metrics'], doc)
    write_loss_curve(record, files['loss_curve'])
    logger.info('wrote %s (wall time %.2fs)', run_dir, record.wall_time)
    return files
