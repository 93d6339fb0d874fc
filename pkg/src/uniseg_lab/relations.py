"""Cross-dataset class similarities, the automatic threshold tau, and the multi-label table.

The similarity of (dataset i, class c) to unified class c' is the mean sigmoid
activation of channel c' over the pixels of i labeled c. A secondary label c'
is activated for (i, c) when c' is outside dataset i's space and scores above
both tau and c itself.
"""
import logging
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import graphviz
import networkx as nx
import numpy as np

from . import utils
from .errors import ConfigError, LabelOutsideSpaceError
from .labelspace import remap_labels
from .losses import sigmoid
from .model import forward
from .uniseg_types import (IGNORE, NEGATIVE, NULL, POSITIVE, ClassKey, HeadKind, LabelMap, MultiLabelTable,
                           Sample, SegModel, SimilarityTensor, TauContribution, TauRule, TriStateLabelMap,
                           UnifiedLabelSpace)

logger = logging.getLogger(__name__)


def _activations(model: SegModel, samples: Sequence[Sample],
                 space: UnifiedLabelSpace) -> Tuple[np.ndarray, np.ndarray]:
    # Images are forwarded one at a time and concatenated in image order.
    acts, labels = [], []
    for sample in samples:
        logits = forward(model, sample.features)
        acts.append(sigmoid(logits).values.reshape(-1, space.num_classes))
        labels.append(remap_labels(sample.labels, sample.dataset_id, space).ravel())
    if not acts:
        return np.zeros((0, space.num_classes)), np.zeros(0, dtype=np.int64)
    return np.concatenate(acts), np.concatenate(labels)


def _class_sums(acts: np.ndarray, labels: np.ndarray, k: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class sums of activation vectors. np.bincount adds in pixel order,
    so the sums equal a sequential double loop bit for bit."""
    valid = labels != IGNORE
    y = labels[valid]
    a = acts[valid]
    counts = np.bincount(y, minlength=k)
    sums = np.stack([np.bincount(y, weights=a[:, j], minlength=k) for j in range(k)], axis=1)
    return sums, counts


def compute_similarity(model: SegModel, datasets: Mapping[str, Sequence[Sample]],
                       space: UnifiedLabelSpace, pooled: bool = False) -> SimilarityTensor:
    """Mean sigmoid activation vectors s_{i,c} over the pixels of each (dataset, class).

    Args:
        model (SegModel): A (stage 1) model with a cosine head
        datasets (Mapping[str, Sequence[Sample]]): dataset_id -> samples, labels in the local space
        space (UnifiedLabelSpace): The unified space the model was trained on
        pooled (bool, optional): Pool the pixels of a unified class over all datasets
        instead of keeping the similarities dataset-specific. Defaults to False.

    Raises:
        ConfigError: If the model does not have a cosine head

    Returns:
        SimilarityTensor: Keys (dataset_id, unified_index) for every member class of every dataset.
        A class with no pixels gets a count of 0 and no score.
    """
    if model.head != HeadKind.COSINE:
        raise ConfigError('Error! Class similarities are computed with a cosine-head model')
    k = space.num_classes
    per_dataset: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for dataset_id in space.dataset_ids:
        acts, labels = _activations(model, datasets.get(dataset_id, []), space)
        per_dataset[dataset_id] = (acts, labels)

    if pooled:
        all_acts = np.concatenate([per_dataset[d][0] for d in space.dataset_ids])
        all_labels = np.concatenate([per_dataset[d][1] for d in space.dataset_ids])
        pooled_sums = _class_sums(all_acts, all_labels, k)

    scores: Dict[ClassKey, np.ndarray] = {}
    counts: Dict[ClassKey, int] = {}
    for dataset_id in space.dataset_ids:
        sums, n = pooled_sums if pooled else _class_sums(*per_dataset[dataset_id], k)
        for c in space.remap[dataset_id]:
            key = (dataset_id, int(c))
            counts[key] = int(n[c])
            if n[c] > 0:
                scores[key] = sums[c] / n[c]
            else:
                logger.warning('no pixels of class %s in dataset %s; similarity undefined',
                               space.classes[c], dataset_id)
    return SimilarityTensor(scores, counts, pooled)


def tau_contributions(sim: SimilarityTensor, space: UnifiedLabelSpace,
                      rule: TauRule = TauRule.ARGMAX) -> List[TauContribution]:
    """The (i, c) pairs tau is averaged over, with the score each contributes.\n
    ARGMAX: every (i, c) whose overall argmax lies outside dataset i's space, with that max score.
    STRONGEST_OTHER: every (i, c) whose strongest class other than c itself lies outside
    dataset i's space, with that score. It also counts pairs where c wins, which lowers tau.

    Args:
        sim (SimilarityTensor): The similarities
        space (UnifiedLabelSpace): The unified space
        rule (TauRule, optional): Which pairs contribute. Defaults to TauRule.ARGMAX.

    Returns:
        List[TauContribution]: In (dataset registration, unified index) order
    """
    contributions = []
    for (dataset_id, c), s in sim.scores.items():
        others = s.copy()
        if rule == TauRule.STRONGEST_OTHER:
            others[c] = -np.inf
        best = int(np.argmax(others))
        if not space.membership[dataset_id][best]:
            contributions.append(TauContribution(dataset_id, c, best, float(s[best])))
    order = {d: n for n, d in enumerate(space.dataset_ids)}
    return sorted(contributions, key=lambda t: (order[t.dataset_id], t.class_index))


def cross_space_argmax(sim: SimilarityTensor, space: UnifiedLabelSpace) -> List[ClassKey]:
    """The (i, c) whose overall argmax is a class outside dataset i's space."""
    return [key for key, s in sim.scores.items() if not space.membership[key[0]][int(np.argmax(s))]]


def auto_tau(sim: SimilarityTensor, space: UnifiedLabelSpace, rule: TauRule = TauRule.ARGMAX) -> Optional[float]:
    """The activation threshold tau.\n
    None when no (i, c) has its argmax outside dataset i's space (then no
    multi-labels are generated), whatever the rule. Otherwise the mean of tau_contributions().

    Args:
        sim (SimilarityTensor): The similarities
        space (UnifiedLabelSpace): The unified space
        rule (TauRule, optional): Which pairs contribute. Defaults to TauRule.ARGMAX.

    Returns:
        Optional[float]: tau, or None
    """
    if not cross_space_argmax(sim, space):
        return None
    scores = [t.score for t in tau_contributions(sim, space, rule)]
    return float(np.mean(scores))


def generate_multilabels(sim: SimilarityTensor, tau: Optional[float],
                         space: UnifiedLabelSpace) -> MultiLabelTable:
    """For each (i, c): c itself, plus every c' outside dataset i's space with
    s_{i,c}^(c') > max(tau, s_{i,c}^(c)). A None tau gives a self-only table.

    Args:
        sim (SimilarityTensor): The similarities
        tau (Optional[float]): The threshold from auto_tau()
        space (UnifiedLabelSpace): The unified space

    Returns:
        MultiLabelTable: The table
    """
    entries: Dict[ClassKey, FrozenSet[int]] = {}
    notes: List[str] = []
    if tau is None:
        notes.append('tau is NONE: no cross-space argmax, table is self-only')
    for key in sorted(sim.counts, key=lambda k: (space.dataset_ids.index(k[0]), k[1])):
        dataset_id, c = key
        if key not in sim.scores:
            notes.append(f'Warning! {dataset_id}/{space.classes[c]} has no pixels; self-only entry')
            entries[key] = frozenset([c])
            continue
        if tau is None:
            entries[key] = frozenset([c])
            continue
        s = sim.scores[key]
        bar = max(tau, float(s[c]))
        outside = ~space.membership[dataset_id]
        active = np.flatnonzero(outside & (s > bar))
        entries[key] = frozenset([c, *active.tolist()])
    for note in notes:
        logger.info(note)
    return MultiLabelTable(entries, tau, tuple(notes))


def self_only_table(space: UnifiedLabelSpace) -> MultiLabelTable:
    entries = {(d, int(c)): frozenset([int(c)]) for d in space.dataset_ids for c in space.remap[d]}
    return MultiLabelTable(entries, None, ('self-only',))


def expand_pixel_labels(label_map: LabelMap, dataset_id: str, table: MultiLabelTable,
                        space: UnifiedLabelSpace) -> TriStateLabelMap:
    """Expands a unified label map into tri-state labels over the unified space.\n
    At a pixel with class c: POSITIVE on c and its activated secondaries, NEGATIVE
    on the rest of dataset i's space, NULL everywhere else.

    Args:
        label_map (LabelMap): (...) unified indices or IGNORE
        dataset_id (str): The dataset of the labels
        table (MultiLabelTable): The multi-label table; a missing entry means self-only
        space (UnifiedLabelSpace): The unified space

    Raises:
        LabelOutsideSpaceError: If a pixel's class is not in dataset i's space

    Returns:
        TriStateLabelMap: states (..., K_u) and the IGNORE mask (...)
    """
    y = np.asarray(label_map, dtype=np.int64)
    member = space.membership[dataset_id]
    ignore = y == IGNORE
    present = np.unique(y[~ignore])
    outside = [int(c) for c in present if c < 0 or c >= space.num_classes or not member[c]]
    if outside:
        raise LabelOutsideSpaceError(f'Error! label outside dataset space: classes {outside} '
                                     f'are not in the space of {dataset_id}')
    base = np.where(member, NEGATIVE, NULL).astype(np.int8)
    states = np.broadcast_to(base, y.shape + (space.num_classes,)).copy()
    for c in present:
        positives = sorted(table.entries.get((dataset_id, int(c)), frozenset([int(c)])))
        at = y == c
        for p in positives:
            states[at, p] = POSITIVE
    return TriStateLabelMap(states, ignore)


def write_similarity_csv(sim: SimilarityTensor, space: UnifiedLabelSpace, path: Path) -> None:
    """Rows (dataset_id, class, unified_class, score, count); undefined classes get no rows."""
    rows = []
    for dataset_id in space.dataset_ids:
        for c in space.remap[dataset_id]:
            key = (dataset_id, int(c))
            if key not in sim.scores:
                continue
            for c2, score in enumerate(sim.scores[key]):
                rows.append([dataset_id, space.classes[c], space.classes[c2], float(score), sim.counts[key]])
    utils.write_csv(path, ['dataset_id', 'class', 'unified_class', 'score', 'count'], rows)


def multilabel_rows(table: MultiLabelTable, space: UnifiedLabelSpace) -> List[Tuple[str, str, str]]:
    """(dataset_id, primary_class, secondary_class) for every activated secondary."""
    rows = []
    for (dataset_id, c), active in sorted(table.entries.items(),
                                          key=lambda kv: (space.dataset_ids.index(kv[0][0]), kv[0][1])):
        for c2 in sorted(active - {c}):
            rows.append((dataset_id, space.classes[c], space.classes[c2]))
    return rows


def write_multilabel_csv(table: MultiLabelTable, space: UnifiedLabelSpace, path: Path) -> None:
    utils.write_csv(path, ['dataset_id', 'primary_class', 'secondary_class'], multilabel_rows(table, space))


def write_tau_csv(contributions: Sequence[TauContribution], tau: Optional[float],
                  space: UnifiedLabelSpace, path: Path) -> None:
    rows: List[List] = [[t.dataset_id, space.classes[t.class_index], space.classes[t.other_index], t.score]
                        for t in contributions]
    rows.append(['*', '*', 'tau', 'NONE' if tau is None else tau])
    utils.write_csv(path, ['dataset_id', 'class', 'strongest_other', 'score'], rows)


def relation_graph(table: MultiLabelTable, space: UnifiedLabelSpace) -> nx.DiGraph:
    """The activated relations as a directed graph over unified class names.\n
    An edge primary -> secondary carries the list of datasets that produced it.
    Relations are asymmetric: an edge need not have its reverse.

    Args:
        table (MultiLabelTable): The table
        space (UnifiedLabelSpace): The unified space

    Returns:
        nx.DiGraph: The relation graph
    """
    graph = nx.DiGraph()
    graph.add_nodes_from(space.classes)
    for dataset_id, primary, secondary in multilabel_rows(table, space):
        if graph.has_edge(primary, secondary):
            graph.edges[primary, secondary]['datasets'].append(dataset_id)
        else:
            graph.add_edge(primary, secondary, datasets=[dataset_id])
    return graph


def asymmetric_pairs(graph: nx.DiGraph) -> List[Tuple[str, str]]:
    return sorted((u, v) for u, v in graph.edges if not graph.has_edge(v, u))


def write_relation_graph(graph: nx.DiGraph, path: Path) -> None:
    """Writes the relation graph as DOT source (rendering needs the graphviz binary; saving does not)."""
    graph_gv = graphviz.Digraph(name='relations')
    for node in graph.nodes:
        graph_gv.node(node, shape='box' if graph.degree(node) else 'plaintext')
    for u, v, data in graph.edges(data=True):
        graph_gv.edge(u, v, label=','.join(data['datasets']))
    path.parent.mkdir(parents=True, exist_ok=True)
    graph_gv.save(filename=path.name, directory=str(path.parent))
