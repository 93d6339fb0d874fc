import csv
import logging
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from . import utils
from .errors import LabelSpaceError
from .schemas import config_schema
from .uniseg_types import IGNORE, DatasetTaxonomy, LabelMap, Projection, UnifiedLabelSpace

logger = logging.getLogger(__name__)


def make_taxonomy(dataset_id: str, classes: Sequence[str]) -> DatasetTaxonomy:
    """Builds a DatasetTaxonomy after checking its invariants.

    Args:
        dataset_id (str): The dataset identifier
        classes (Sequence[str]): The class names, in local index order

    Raises:
        LabelSpaceError: If the taxonomy is empty or has duplicate class names

    Returns:
        DatasetTaxonomy: The validated taxonomy
    """
    if len(classes) == 0:
        raise LabelSpaceError(f'Error! Taxonomy {dataset_id} has no classes.')
    if len(set(classes)) != len(classes):
        dups = sorted({c for c in classes if list(classes).count(c) > 1})
        raise LabelSpaceError(f'Error! Taxonomy {dataset_id} has duplicate classes {dups}')
    return DatasetTaxonomy(dataset_id, tuple(classes))


def unify(taxonomies: Sequence[DatasetTaxonomy]) -> UnifiedLabelSpace:
    """Builds the unified label space as the union of the given taxonomies.\n
    Unified order is first appearance across datasets (in registration order),
    then local order within each dataset. Classes are identified by exact name.

    Args:
        taxonomies (Sequence[DatasetTaxonomy]): The per-dataset taxonomies, in registration order

    Raises:
        LabelSpaceError: If taxonomies is empty, a dataset_id repeats, or a taxonomy is invalid

    Returns:
        UnifiedLabelSpace: The unified classes, membership masks and remap tables
    """
    if len(taxonomies) == 0:
        raise LabelSpaceError('Error! Cannot unify an empty list of taxonomies.')
    seen_ids: List[str] = []
    for tax in taxonomies:
        if tax.dataset_id in seen_ids:
            raise LabelSpaceError(f'Error! Duplicate dataset_id {tax.dataset_id}')
        seen_ids.append(tax.dataset_id)
        make_taxonomy(tax.dataset_id, tax.classes)  # validate only

    classes: List[str] = []
    position: Dict[str, int] = {}
    for tax in taxonomies:
        for name in tax.classes:
            if name not in position:
                position[name] = len(classes)
                classes.append(name)

    membership: Dict[str, np.ndarray] = {}
    remap: Dict[str, np.ndarray] = {}
    for tax in taxonomies:
        table = np.array([position[name] for name in tax.classes], dtype=np.int64)
        mask = np.zeros(len(classes), dtype=bool)
        mask[table] = True
        table.setflags(write=False)
        mask.setflags(write=False)
        remap[tax.dataset_id] = table
        membership[tax.dataset_id] = mask

    logger.debug('unified %d taxonomies into %d classes', len(taxonomies), len(classes))
    return UnifiedLabelSpace(tuple(classes), tuple(seen_ids), membership, remap)


def _check_dataset(space: UnifiedLabelSpace, dataset_id: str) -> None:
    if dataset_id not in space.remap:
        raise LabelSpaceError(f'Error! Unknown dataset_id {dataset_id}; '
                              f'registered datasets are {list(space.dataset_ids)}')


def remap_labels(label_map: LabelMap, dataset_id: str, space: UnifiedLabelSpace) -> LabelMap:
    """Replaces every local class index with its unified index; IGNORE passes through.

    Args:
        label_map (LabelMap): A label map in the local space of dataset_id
        dataset_id (str): The dataset whose taxonomy label_map uses
        space (UnifiedLabelSpace): The unified label space

    Raises:
        LabelSpaceError: If dataset_id is unknown or a local index is out of range

    Returns:
        LabelMap: The label map in the unified space
    """
    _check_dataset(space, dataset_id)
    table = space.remap[dataset_id]
    values = np.asarray(label_map, dtype=np.int64)
    valid = values != IGNORE
    bad = valid & ((values < 0) | (values >= len(table)))
    if np.any(bad):
        raise LabelSpaceError(f'Error! Label values {sorted(set(values[bad].tolist()))} are out of range '
                              f'for dataset {dataset_id} with {len(table)} classes')
    out = np.full(values.shape, IGNORE, dtype=np.int64)
    out[valid] = table[values[valid]]
    return out


def inverse_remap(label_map: LabelMap, dataset_id: str, space: UnifiedLabelSpace) -> LabelMap:
    """The inverse function to remap_labels()

    Args:
        label_map (LabelMap): A label map in the unified space, restricted to dataset_id's classes
        dataset_id (str): The dataset to map back into
        space (UnifiedLabelSpace): The unified label space

    Raises:
        LabelSpaceError: If a unified index is not a member of dataset_id's taxonomy

    Returns:
        LabelMap: The label map in the local space of dataset_id
    """
    _check_dataset(space, dataset_id)
    inverse = np.full(space.num_classes, -1, dtype=np.int64)
    inverse[space.remap[dataset_id]] = np.arange(len(space.remap[dataset_id]))
    values = np.asarray(label_map, dtype=np.int64)
    valid = values != IGNORE
    local = np.full(values.shape, IGNORE, dtype=np.int64)
    local[valid] = inverse[values[valid]]
    if np.any(local[valid] < 0):
        raise LabelSpaceError(f'Error! Unified labels outside the space of {dataset_id}')
    return local


def eval_projection(trained_space: UnifiedLabelSpace, test_taxonomy: DatasetTaxonomy) -> Projection:
    """Selects the output channels shared (by name) between a trained space and a test taxonomy.

    Args:
        trained_space (UnifiedLabelSpace): The space the model was trained on
        test_taxonomy (DatasetTaxonomy): The taxonomy of the evaluation dataset

    Returns:
        Projection: (unified_index, test_local_index) pairs, in test taxonomy order.\n
        An empty list means the two spaces are disjoint; the caller decides what to do.
    """
    position = {name: u for u, name in enumerate(trained_space.classes)}
    return [(position[name], j) for j, name in enumerate(test_taxonomy.classes) if name in position]


def load_taxonomy(path: Path) -> DatasetTaxonomy:
    """Reads a taxonomy file {"dataset_id": ..., "classes": [...]}

    Args:
        path (Path): The JSON (or YAML) taxonomy file

    Returns:
        DatasetTaxonomy: The validated taxonomy
    """
    doc = utils.load_document(path, config_schema.taxonomy_schema())
    return make_taxonomy(doc['dataset_id'], doc['classes'])


def write_remap_csv(space: UnifiedLabelSpace, path: Path) -> None:
    """Writes the remap tables as CSV rows (dataset_id, local_index, class, unified_index).

    Args:
        space (UnifiedLabelSpace): The unified label space
        path (Path): The output CSV file
    """
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, mode='w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['dataset_id', 'local_index', 'class', 'unified_index'])
        for dataset_id in space.dataset_ids:
            for local, unified in enumerate(space.remap[dataset_id]):
                writer.writerow([dataset_id, local, space.classes[unified], int(unified)])
