"""Deterministic synthetic multi-dataset generator with a planted fine/coarse class hierarchy.

Every dataset draws its images from the same class-conditional feature
distribution; only the labels differ, through each dataset's coarsening map.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from . import __version__, utils
from .errors import ConfigError, LabelSpaceError
from .labelspace import make_taxonomy
from .schemas import config_schema
from .uniseg_types import DataBundle, DatasetTaxonomy, HierarchySpec, Json, Sample

logger = logging.getLogger(__name__)

DUMP_FORMAT = 1
FIXTURE_PREFIX = 'fixture:'
SPLITS = ('train', 'test')

# Relation = (dataset_id, fine class, coarse class)
Relation = Tuple[str, str, str]

FINE_CLASSES = ('road', 'lane_marking', 'sidewalk', 'building', 'vehicle',
                'motorcyclist', 'bicyclist', 'background')
COARSE_CLASSES = ('road', 'sidewalk', 'building', 'vehicle', 'rider', 'background')
MID_CLASSES = ('road', 'lane_marking', 'sidewalk', 'building', 'vehicle', 'rider', 'background')


def _fixture_means() -> np.ndarray:
    # One axis per coarse concept, plus two offset axes that separate
    # lane_marking from road and motorcyclist from bicyclist.
    axis = {'road': 0, 'sidewalk': 1, 'building': 2, 'vehicle': 3, 'rider': 4, 'background': 5}
    eye = np.eye(8)
    means = {'road': 3.0 * eye[axis['road']],
             'lane_marking': 3.0 * eye[axis['road']] + 2.0 * eye[6],
             'sidewalk': 3.0 * eye[axis['sidewalk']],
             'building': 3.0 * eye[axis['building']],
             'vehicle': 3.0 * eye[axis['vehicle']],
             'motorcyclist': 3.0 * eye[axis['rider']] + 0.8 * eye[7],
             'bicyclist': 3.0 * eye[axis['rider']] - 0.8 * eye[7],
             'background': 3.0 * eye[axis['background']]}
    return np.stack([means[name] for name in FINE_CLASSES])


def _fixture(datasets: Dict[str, Tuple[str, ...]], seed: int) -> Tuple[HierarchySpec, List[DatasetTaxonomy]]:
    coarse_of = {'lane_marking': 'road', 'motorcyclist': 'rider', 'bicyclist': 'rider'}
    coarsen: Dict[str, Dict[str, str]] = {}
    for dataset_id, local in datasets.items():
        coarsen[dataset_id] = {f: (f if f in local else coarse_of[f]) for f in FINE_CLASSES}
    spec = HierarchySpec(fine_classes=FINE_CLASSES,
                         coarsen=coarsen,
                         local_classes=dict(datasets),
                         feature_dim=8,
                         cluster_means=_fixture_means(),
                         cluster_std=0.5,
                         class_weights=(0.25, 0.08, 0.12, 0.18, 0.12, 0.07, 0.07, 0.11),
                         min_rect=4,
                         max_rect=12,
                         seed=seed)
    check_spec(spec)
    return spec, [make_taxonomy(d, local) for d, local in datasets.items()]


def default_fixture(seed: int = 0) -> Tuple[HierarchySpec, List[DatasetTaxonomy]]:
    """Two datasets over 8 fine classes: COARSE merges lane_marking into road and
    motorcyclist/bicyclist into rider (6 classes); FINE keeps all 8. K_u = 9.

    Args:
        seed (int, optional): The generator seed. Defaults to 0.

    Returns:
        Tuple[HierarchySpec, List[DatasetTaxonomy]]: The spec and the taxonomies (COARSE, FINE)
    """
    return _fixture({'COARSE': COARSE_CLASSES, 'FINE': FINE_CLASSES}, seed)


def benchmark_fixture(seed: int = 0) -> Tuple[HierarchySpec, List[DatasetTaxonomy]]:
    """default_fixture() plus a third dataset MID, which keeps lane_marking but
    merges motorcyclist/bicyclist into rider. Leaving any one dataset out still
    trains on two. K_u is still 9.

    Args:
        seed (int, optional): The generator seed. Defaults to 0.

    Returns:
        Tuple[HierarchySpec, List[DatasetTaxonomy]]: The spec and the taxonomies (COARSE, FINE, MID)
    """
    return _fixture({'COARSE': COARSE_CLASSES, 'FINE': FINE_CLASSES, 'MID': MID_CLASSES}, seed)


FIXTURES = {'default': default_fixture, 'benchmark': benchmark_fixture}


def check_spec(spec: HierarchySpec) -> None:
    """Checks the HierarchySpec invariants.

    Args:
        spec (HierarchySpec): The spec

    Raises:
        ConfigError: If a dataset does not map every fine class, a coarse name is not one of
        the dataset's local classes, the cluster means are not pairwise distinct, or the shapes disagree
    """
    n_fine = len(spec.fine_classes)
    if len(set(spec.fine_classes)) != n_fine:
        raise ConfigError('Error! fine_classes must be unique')
    for dataset_id, mapping in spec.coarsen.items():
        missing = [f for f in spec.fine_classes if f not in mapping]
        if missing:
            raise ConfigError(f'Error! Dataset {dataset_id} does not coarsen the fine classes {missing}')
        local = spec.local_classes.get(dataset_id, ())
        unknown = sorted({c for c in mapping.values() if c not in local})
        if unknown:
            raise ConfigError(f'Error! Dataset {dataset_id} coarsens into {unknown}, '
                              f'which are not among its local classes {list(local)}')
    if spec.cluster_means.shape != (n_fine, spec.feature_dim):
        raise ConfigError(f'Error! cluster_means has shape {spec.cluster_means.shape}; '
                          f'expected {(n_fine, spec.feature_dim)}')
    if len({tuple(m) for m in spec.cluster_means.tolist()}) != n_fine:
        raise ConfigError('Error! cluster means must be pairwise distinct')
    if len(spec.class_weights) != n_fine or sum(spec.class_weights) <= 0:
        raise ConfigError('Error! class_weights needs one non-negative weight per fine class')
    if spec.min_rect > spec.max_rect:
        raise ConfigError(f'Error! min_rect {spec.min_rect} exceeds max_rect {spec.max_rect}')


def _coarsen_table(spec: HierarchySpec, dataset_id: str) -> np.ndarray:
    local = spec.local_classes[dataset_id]
    return np.array([local.index(spec.coarsen[dataset_id][f]) for f in spec.fine_classes], dtype=np.int64)


def _tile(rng: np.random.Generator, spec: HierarchySpec, height: int, width: int) -> np.ndarray:
    """Guillotine tiling: rectangles are split until no side exceeds max_rect
    (and at random while both halves can keep min_rect), then each leaf gets a fine class."""
    weights = np.asarray(spec.class_weights, dtype=np.float64)
    weights = weights / weights.sum()
    fine = np.zeros((height, width), dtype=np.int64)
    stack = [(0, height, 0, width)]
    while stack:
        r0, r1, c0, c1 = stack.pop()
        rows, cols = r1 - r0, c1 - c0
        can_rows = rows >= 2 * spec.min_rect
        can_cols = cols >= 2 * spec.min_rect
        must = rows > spec.max_rect or cols > spec.max_rect
        if (can_rows or can_cols) and (must or rng.random() < 0.5):
            split_rows = can_rows and (not can_cols or rows > cols or (rows == cols and rng.random() < 0.5))
            if split_rows:
                cut = r0 + int(rng.integers(spec.min_rect, rows - spec.min_rect + 1))
                stack.extend([(cut, r1, c0, c1), (r0, cut, c0, c1)])
            else:
                cut = c0 + int(rng.integers(spec.min_rect, cols - spec.min_rect + 1))
                stack.extend([(r0, r1, cut, c1), (r0, r1, c0, cut)])
        else:
            fine[r0:r1, c0:c1] = rng.choice(len(weights), p=weights)
    return fine


def generate(spec: HierarchySpec, dataset_id: str, n_images: int, height: int, width: int,
             split_seed: int) -> List[Sample]:
    """Generates images as random rectangle tilings over the fine classes, with
    features ~ Normal(mean[fine], std^2 I) and labels coarsened for dataset_id.

    Args:
        spec (HierarchySpec): The hierarchy
        dataset_id (str): Which dataset's coarsening to label with
        n_images (int): The number of images
        height (int): H
        width (int): W
        split_seed (int): Selects the split; the output is a pure function of (spec.seed, split_seed)

    Raises:
        LabelSpaceError: If dataset_id is not in spec
        ConfigError: If n_images, height or width is not positive

    Returns:
        List[Sample]: The samples
    """
    if dataset_id not in spec.coarsen:
        raise LabelSpaceError(f'Error! Unknown dataset_id {dataset_id}; the spec has {list(spec.coarsen)}')
    if min(n_images, height, width) <= 0:
        raise ConfigError(f'Error! n_images, height and width must be positive, '
                          f'not {(n_images, height, width)}')
    table = _coarsen_table(spec, dataset_id)
    # One child seed per image, so images are independent of how many come before them.
    children = np.random.SeedSequence([spec.seed, split_seed]).spawn(n_images)
    samples = []
    for child in children:
        rng = np.random.default_rng(child)
        fine = _tile(rng, spec, height, width)
        noise = rng.standard_normal((height, width, spec.feature_dim))
        features = spec.cluster_means[fine] + spec.cluster_std * noise
        samples.append(Sample(dataset_id, features, table[fine], fine))
    logger.debug('generated %d %dx%d images for %s (split_seed %d)', n_images, height, width,
                 dataset_id, split_seed)
    return samples


def split_seed_of(spec: HierarchySpec, dataset_id: str, split: str) -> int:
    """Distinct datasets and splits draw distinct images."""
    return 2 * list(spec.coarsen).index(dataset_id) + SPLITS.index(split)


def planted_relations(spec: HierarchySpec,
                      taxonomies: Sequence[DatasetTaxonomy]) -> Tuple[Set[Relation], Set[Relation]]:
    """The (dataset, fine class) -> coarse class pairs implied by the coarsening maps.\n
    A pair (i, f) -> g exists when f is a class of dataset i and some other dataset
    j coarsens f into g != f. Since multi-labels can only add classes from outside
    a dataset's own space, pairs whose g is also a class of i can never be recovered.

    Args:
        spec (HierarchySpec): The hierarchy
        taxonomies (Sequence[DatasetTaxonomy]): The datasets taking part (e.g. a leave-one-out subset)

    Returns:
        Tuple[Set[Relation], Set[Relation]]: (recoverable, shared-name conflicts)
    """
    recoverable: Set[Relation] = set()
    conflicts: Set[Relation] = set()
    for tax in taxonomies:
        own = set(tax.classes)
        for other in taxonomies:
            if other.dataset_id == tax.dataset_id:
                continue
            for fine in spec.fine_classes:
                coarse = spec.coarsen[other.dataset_id][fine]
                if fine in own and coarse != fine:
                    (conflicts if coarse in own else recoverable).add((tax.dataset_id, fine, coarse))
    return recoverable, conflicts


def spec_to_doc(spec: HierarchySpec) -> Json:
    return {'fine_classes': list(spec.fine_classes),
            'coarsen': {d: dict(m) for d, m in spec.coarsen.items()},
            'local_classes': {d: list(c) for d, c in spec.local_classes.items()},
            'feature_dim': spec.feature_dim,
            'cluster_means': spec.cluster_means.tolist(),
            'cluster_std': spec.cluster_std,
            'class_weights': list(spec.class_weights),
            'min_rect': spec.min_rect,
            'max_rect': spec.max_rect,
            'seed': spec.seed}


def spec_from_doc(doc: Json, seed: Optional[int] = None) -> Tuple[HierarchySpec, List[DatasetTaxonomy]]:
    """Builds a HierarchySpec from a (validated) hierarchy spec document.\n
    When local_classes is omitted, each dataset's classes are its coarse names in
    order of first appearance over fine_classes.

    Args:
        doc (Json): A document matching config_schema.hierarchy_spec_schema()
        seed (Optional[int], optional): Overrides the document's seed. Defaults to None.

    Returns:
        Tuple[HierarchySpec, List[DatasetTaxonomy]]: The spec and the taxonomies
    """
    if 'fixture' in doc:
        fixture_seed = seed if seed is not None else doc.get('seed', 0)
        return FIXTURES[doc['fixture']](fixture_seed)
    fine = tuple(doc['fine_classes'])
    coarsen = {d: dict(m) for d, m in doc['coarsen'].items()}
    local_classes: Dict[str, Tuple[str, ...]] = {}
    for dataset_id, mapping in coarsen.items():
        declared = doc.get('local_classes', {}).get(dataset_id)
        if declared is None:
            declared = list(dict.fromkeys(mapping[f] for f in fine if f in mapping))
        local_classes[dataset_id] = tuple(declared)
    n_fine = len(fine)
    spec = HierarchySpec(fine_classes=fine,
                         coarsen=coarsen,
                         local_classes=local_classes,
                         feature_dim=int(doc['feature_dim']),
                         cluster_means=np.array(doc['cluster_means'], dtype=np.float64),
                         cluster_std=float(doc['cluster_std']),
                         class_weights=tuple(doc.get('class_weights', [1.0] * n_fine)),
                         min_rect=int(doc.get('min_rect', 4)),
                         max_rect=int(doc.get('max_rect', 12)),
                         seed=int(seed if seed is not None else doc.get('seed', 0)))
    check_spec(spec)
    return spec, [make_taxonomy(d, c) for d, c in local_classes.items()]


def load_spec(path: Path, seed: Optional[int] = None) -> Tuple[HierarchySpec, List[DatasetTaxonomy], Json]:
    """Reads and validates a hierarchy spec file.

    Returns:
        Tuple[HierarchySpec, List[DatasetTaxonomy], Json]: The spec, the taxonomies, and the raw document
    """
    doc = utils.load_document(path, config_schema.hierarchy_spec_schema())
    spec, taxonomies = spec_from_doc(doc, seed)
    return spec, taxonomies, doc


def _write_array(path: Path, arr: np.ndarray, dtype: str) -> Json:
    data = np.ascontiguousarray(arr, dtype=dtype)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode='wb') as f:
        f.write(data.tobytes(order='C'))
    return {'file': path.name, 'dtype': dtype, 'shape': list(arr.shape)}


def _read_array(root: Path, entry: Json) -> np.ndarray:
    data = np.fromfile(root / entry['file'], dtype=np.dtype(entry['dtype']))
    return data.reshape(entry['shape']).astype(np.float64 if entry['dtype'] == '<f8' else np.int64)


def dump_datasets(bundle: DataBundle, out_dir: Path) -> Path:
    """Writes a dataset dump: manifest.json plus one directory per dataset, holding
    row-major little-endian arrays (features '<f8', labels and fine_truth '<i4').

    Args:
        bundle (DataBundle): The data
        out_dir (Path): The dump directory

    Returns:
        Path: The manifest path
    """
    datasets = []
    for tax in bundle.taxonomies:
        splits: Json = {}
        for split, samples in (('train', bundle.train), ('test', bundle.test)):
            entries = []
            folder = out_dir / tax.dataset_id / split
            for k, sample in enumerate(samples[tax.dataset_id]):
                entries.append({
                    'dir': f'{tax.dataset_id}/{split}',
                    'features': _write_array(folder / f'{k:04d}_features.bin', sample.features, '<f8'),
                    'labels': _write_array(folder / f'{k:04d}_labels.bin', sample.labels, '<i4'),
                    'fine_truth': _write_array(folder / f'{k:04d}_fine.bin', sample.fine_truth, '<i4'),
                })
            splits[split] = entries
        datasets.append({'dataset_id': tax.dataset_id, 'classes': list(tax.classes), 'splits': splits})
    manifest = {'format': DUMP_FORMAT, 'uniseg_lab_version': __version__,
                'spec': spec_to_doc(bundle.spec), 'datasets': datasets}
    manifest_path = out_dir / 'manifest.json'
    utils.write_json(manifest_path, manifest)
    return manifest_path


def load_dump(dump_dir: Path) -> DataBundle:
    """Replays a dataset dump written by dump_datasets(), without regeneration.

    Args:
        dump_dir (Path): The dump directory

    Raises:
        ConfigError: If the manifest is missing or has an unknown format

    Returns:
        DataBundle: The data
    """
    manifest_path = dump_dir / 'manifest.json'
    try:
        manifest = utils.read_json(manifest_path)
    except (OSError, ValueError) as ex:
        raise ConfigError(f'Error! Cannot read dataset manifest {manifest_path}: {ex}') from ex
    if manifest.get('format') != DUMP_FORMAT:
        raise ConfigError(f"Error! {manifest_path} has dump format {manifest.get('format')}")
    spec, _ = spec_from_doc(manifest['spec'])
    taxonomies = []
    train: Dict[str, List[Sample]] = {}
    test: Dict[str, List[Sample]] = {}
    for entry in manifest['datasets']:
        dataset_id = entry['dataset_id']
        taxonomies.append(make_taxonomy(dataset_id, entry['classes']))
        for split, target in (('train', train), ('test', test)):
            samples = []
            for item in entry['splits'][split]:
                root = dump_dir / item['dir']
                samples.append(Sample(dataset_id, _read_array(root, item['features']),
                                      _read_array(root, item['labels']), _read_array(root, item['fine_truth'])))
            target[dataset_id] = samples
    logger.info('loaded dump %s with datasets %s', dump_dir, [t.dataset_id for t in taxonomies])
    return DataBundle(spec, taxonomies, train, test)


def generate_bundle(spec: HierarchySpec, taxonomies: Sequence[DatasetTaxonomy], n_train: int, n_test: int,
                    height: int, width: int) -> DataBundle:
    train = {t.dataset_id: generate(spec, t.dataset_id, n_train, height, width,
                                    split_seed_of(spec, t.dataset_id, 'train')) for t in taxonomies}
    test = {t.dataset_id: generate(spec, t.dataset_id, n_test, height, width,
                                   split_seed_of(spec, t.dataset_id, 'test')) for t in taxonomies}
    return DataBundle(spec, list(taxonomies), train, test)


def load_data(data: str, n_train: int = 16, n_test: int = 4, height: int = 32, width: int = 32,
              seed: Optional[int] = None) -> DataBundle:
    """Resolves a data source: either 'fixture:<name>' (generated on the fly) or a dump directory.

    Args:
        data (str): 'fixture:default', 'fixture:benchmark', or a dump directory
        n_train (int, optional): Training images per dataset (fixtures only). Defaults to 16.
        n_test (int, optional): Test images per dataset (fixtures only). Defaults to 4.
        height (int, optional): H (fixtures only). Defaults to 32.
        width (int, optional): W (fixtures only). Defaults to 32.
        seed (Optional[int], optional): The fixture seed (fixtures only). Defaults to 0.

    Raises:
        ConfigError: If the fixture name is unknown

    Returns:
        DataBundle: The data
    """
    if data.startswith(FIXTURE_PREFIX):
        name = data[len(FIXTURE_PREFIX):]
        if name not in FIXTURES:
            raise ConfigError(f'Error! Unknown fixture {name}; choose from {sorted(FIXTURES)}')
        spec, taxonomies = FIXTURES[name](0 if seed is None else seed)
        return generate_bundle(spec, taxonomies, n_train, n_test, height, width)
    return load_dump(Path(data))


def select(bundle: DataBundle, dataset_ids: Optional[Sequence[str]]) -> DataBundle:
    """Restricts a bundle to dataset_ids, keeping registration order."""
    if not dataset_ids:
        return bundle
    known = [t.dataset_id for t in bundle.taxonomies]
    unknown = [d for d in dataset_ids if d not in known]
    if unknown:
        raise ConfigError(f'Error! Unknown datasets {unknown}; the data has {known}')
    taxonomies = [t for t in bundle.taxonomies if t.dataset_id in dataset_ids]
    keep = {t.dataset_id for t in taxonomies}
    return DataBundle(bundle.spec, taxonomies,
                      {d: s for d, s in bundle.train.items() if d in keep},
                      {d: s for d, s in bundle.test.items() if d in keep})
