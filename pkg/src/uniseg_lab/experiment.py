"""Leave-one-out experiments comparing CE, Null BCE and class-relational BCE.

Every (held-out dataset x loss x seed) cell is trained and evaluated
independently, so cells may run in parallel worker threads; rows are sorted
before they are written.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from . import relations, synth, utils
from .errors import ConfigError
from .evaluate import evaluate_dataset, miou_subset, override_stats
from .labelspace import unify
from .schemas import config_schema
from .trainer import build_train_config, run_cr_pipeline, train
from .uniseg_types import DataBundle, ExperimentConfig, Json, LossKind, SegModel, UnifiedLabelSpace

logger = logging.getLogger(__name__)

SINGLE_BEST = 'SINGLE_BEST_CE'
DEFAULT_FOCUS = ('road', 'lane_marking', 'rider', 'motorcyclist', 'bicyclist')

RESULT_HEADER = ['setting', 'loss', 'seed', 'test_dataset', 'miou', 'focus_miou', 'pixel_accuracy']
SUMMARY_HEADER = ['setting', 'loss', 'test_dataset', 'n_seeds', 'miou_mean', 'miou_std',
                  'focus_miou_mean', 'focus_miou_std']
OVERRIDE_HEADER = ['setting', 'loss', 'seed', 'dataset_id', 'fine_class', 'threshold', 'pixels',
                   'overridden', 'rate']
RELATION_HEADER = ['setting', 'seed', 'tau', 'dataset_id', 'primary_class', 'secondary_class']


def load_experiment_config(path: Path, out_dir: str) -> ExperimentConfig:
    """Reads and validates an experiment config file.

    Args:
        path (Path): The YAML or JSON config
        out_dir (str): Where results go (the --out flag)

    Raises:
        ConfigError: If the file is invalid, or the train / held-out / unseen sets overlap

    Returns:
        ExperimentConfig: The config
    """
    doc = utils.load_document(path, config_schema.experiment_config_schema())
    return experiment_config_from_doc(doc, out_dir)


def experiment_config_from_doc(doc: Json, out_dir: str) -> ExperimentConfig:
    config = ExperimentConfig(data=doc.get('data', 'fixture:benchmark'),
                              train_datasets=tuple(doc.get('train_datasets', [])),
                              held_out=tuple(doc['held_out']),
                              unseen_datasets=tuple(doc.get('unseen_datasets', [])),
                              losses=tuple(LossKind(k) for k in doc.get('losses', [k.value for k in LossKind])),
                              overrides=doc.get('overrides', {}),
                              out_dir=out_dir,
                              seeds=tuple(doc.get('seeds', [0])),
                              focus_classes=tuple(doc.get('focus_classes', DEFAULT_FOCUS)),
                              single_best=bool(doc.get('single_best', False)),
                              n_train_images=int(doc.get('n_train_images', 16)),
                              n_test_images=int(doc.get('n_test_images', 4)),
                              height=int(doc.get('height', 32)),
                              width=int(doc.get('width', 32)))
    groups = {'train_datasets': set(config.train_datasets), 'held_out': set(config.held_out),
              'unseen_datasets': set(config.unseen_datasets)}
    names = list(groups)
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            shared = groups[names[a]] & groups[names[b]]
            if shared:
                raise ConfigError(f'Error! {names[a]} and {names[b]} must be disjoint; both contain {sorted(shared)}')
    build_train_config(config.overrides)  # fail early on bad overrides
    return config


class Cell(NamedTuple):
    setting: str
    loss: str
    seed: int
    train_ids: Tuple[str, ...]
    test_ids: Tuple[str, ...]


class CellResult(NamedTuple):
    results: List[List]
    overrides: List[List]
    relations: List[List]


def plan_cells(config: ExperimentConfig, bundle: DataBundle) -> List[Cell]:
    """One cell per (held-out dataset, loss, seed), plus SINGLE_BEST_CE cells when requested."""
    order = [t.dataset_id for t in bundle.taxonomies]
    unknown = [d for d in (*config.train_datasets, *config.held_out, *config.unseen_datasets) if d not in order]
    if unknown:
        raise ConfigError(f'Error! Unknown datasets {unknown}; the data has {order}')
    cells = []
    for held in config.held_out:
        training = set(config.train_datasets) | (set(config.held_out) - {held})
        train_ids = tuple(d for d in order if d in training)
        if not train_ids:
            raise ConfigError(f'Error! Leaving out {held} leaves nothing to train on')
        test_ids = (held, *config.unseen_datasets)
        losses = [k.value for k in config.losses] + ([SINGLE_BEST] if config.single_best else [])
        for seed in config.seeds:
            for loss in losses:
                cells.append(Cell(f'-{held}', loss, seed, train_ids, test_ids))
    return cells


def _fmt(value: Optional[float]) -> object:
    return '' if value is None else value


def _evaluate(setting: str, loss: str, seed: int, model: SegModel, space: UnifiedLabelSpace,
              bundle: DataBundle, config: ExperimentConfig,
              test_ids: Sequence[str]) -> Dict[str, List]:
    rows = {}
    for dataset_id in test_ids:
        result = evaluate_dataset(model, bundle.test[dataset_id], space, bundle.taxonomy(dataset_id))
        focus = miou_subset(result.confusion, result.classes, config.focus_classes)
        rows[dataset_id] = [setting, loss, seed, dataset_id, result.miou, _fmt(focus), result.pixel_accuracy]
    return rows


def run_cell(cell: Cell, bundle: DataBundle, config: ExperimentConfig) -> CellResult:
    """Trains and evaluates one cell."""
    overrides = {**config.overrides, 'seed': cell.seed}
    train_config = build_train_config(overrides)
    override_rows: List[List] = []
    relation_rows: List[List] = []

    if cell.loss == SINGLE_BEST:
        # One CE model per training dataset; each test dataset reports its best one.
        best: Dict[str, List] = {}
        for dataset_id in cell.train_ids:
            space = unify([bundle.taxonomy(dataset_id)])
            run = train({dataset_id: bundle.train[dataset_id]}, space,
                        train_config._replace(loss_kind=LossKind.CE))
            rows = _evaluate(cell.setting, cell.loss, cell.seed, run.model, space, bundle, config, cell.test_ids)
            for test_id, row in rows.items():
                if test_id not in best or row[4] > best[test_id][4]:
                    best[test_id] = row
        return CellResult(list(best.values()), [], [])

    space = unify([bundle.taxonomy(d) for d in cell.train_ids])
    datasets = {d: bundle.train[d] for d in cell.train_ids}
    loss = LossKind(cell.loss)
    if loss == LossKind.CR_BCE:
        pipeline = run_cr_pipeline(datasets, space, train_config)
        model = pipeline.stage2.model
        tau = 'NONE' if pipeline.tau is None else pipeline.tau
        for dataset_id, primary, secondary in relations.multilabel_rows(pipeline.table, space):
            relation_rows.append([cell.setting, cell.seed, tau, dataset_id, primary, secondary])
    else:
        model = train(datasets, space, train_config._replace(loss_kind=loss)).model

    results = list(_evaluate(cell.setting, cell.loss, cell.seed, model, space, bundle, config,
                             cell.test_ids).values())
    for tax in bundle.taxonomies:
        for stat in override_stats(model, bundle.test[tax.dataset_id], space, tax,
                                   bundle.spec.fine_classes, loss):
            override_rows.append([cell.setting, cell.loss, cell.seed, stat.dataset_id, stat.fine_class,
                                  stat.threshold, stat.pixels, stat.overridden, stat.rate])
    logger.info('cell %s %s seed %d done', cell.setting, cell.loss, cell.seed)
    return CellResult(results, override_rows, relation_rows)


def summarize(rows: Sequence[Sequence]) -> List[List]:
    """Mean and (population) std over seeds per (setting, loss, test_dataset)."""
    groups: Dict[Tuple, List[Sequence]] = {}
    for row in rows:
        groups.setdefault((row[0], row[1], row[3]), []).append(row)
    summary = []
    for key in sorted(groups):
        group = groups[key]
        mious = np.array([r[4] for r in group], dtype=np.float64)
        focus = np.array([r[5] for r in group if r[5] != ''], dtype=np.float64)
        focus_stats: List[object] = [float(focus.mean()), float(focus.std())] if focus.size else ['', '']
        summary.append([*key, len(group), float(mious.mean()), float(mious.std()), *focus_stats])
    return summary


def run_experiment(config: ExperimentConfig, threads: int = 1,
                   bundle: Optional[DataBundle] = None) -> Dict[str, List[List]]:
    """Runs every cell and collects the result tables.

    Args:
        config (ExperimentConfig): The config
        threads (int, optional): Worker threads for independent cells. Defaults to 1.
        bundle (Optional[DataBundle], optional): Preloaded data instead of config.data. Defaults to None.

    Returns:
        Dict[str, List[List]]: Sorted rows for 'results', 'summary', 'overrides' and 'relations'
    """
    if bundle is None:
        bundle = synth.load_data(config.data, config.n_train_images, config.n_test_images,
                                 config.height, config.width)
    cells = plan_cells(config, bundle)
    logger.info('running %d cells on %d threads', len(cells), threads)
    with ThreadPoolExecutor(max_workers=threads) as executor:
        outcomes = list(executor.map(lambda c: run_cell(c, bundle, config), cells))

    def key(row: Sequence) -> Tuple:
        return tuple(str(v) for v in row)

    results = sorted((r for o in outcomes for r in o.results), key=key)
    return {'results': results,
            'summary': summarize(results),
            'overrides': sorted((r for o in outcomes for r in o.overrides), key=key),
            'relations': sorted((r for o in outcomes for r in o.relations), key=key)}


def write_experiment(tables: Dict[str, List[List]], out_dir: Path) -> List[Path]:
    headers = {'results': RESULT_HEADER, 'summary': SUMMARY_HEADER,
               'overrides': OVERRIDE_HEADER, 'relations': RELATION_HEADER}
    paths = []
    for name, header in headers.items():
        path = out_dir / f'{name}.csv'
        utils.write_csv(path, header, tables[name])
        paths.append(path)
    return paths
