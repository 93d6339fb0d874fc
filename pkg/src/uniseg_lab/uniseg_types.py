from enum import Enum
from typing import Any, Dict, FrozenSet, List, NamedTuple, Optional, Tuple

import numpy as np

# See https://mypy.readthedocs.io/en/stable/kinds_of_types.html#type-aliases
# numpy arrays are not parameterized here; shapes are documented at each use site.

KV = Dict[str, Any]
Json = KV

LabelMap = np.ndarray  # (H, W) integer class indices or IGNORE
LogitMap = np.ndarray  # (..., K_u) float64
Params = Dict[str, np.ndarray]
ConfusionMatrix = np.ndarray  # (K, K) int64, rows = ground truth, cols = prediction
Projection = List[Tuple[int, int]]  # (unified_index, test_local_index)
ClassKey = Tuple[str, int]  # (dataset_id, unified_index)

# Segmentation convention; excluded from every loss and metric.
IGNORE = 255

# Tri-state label values. NULL means "no supervision on this channel".
POSITIVE = 1
NEGATIVE = 0
NULL = -1


class LossKind(str, Enum):
    CE = 'CE'
    NULL_BCE = 'NULL_BCE'
    CR_BCE = 'CR_BCE'


class HeadKind(str, Enum):
    LINEAR = 'LINEAR'
    COSINE = 'COSINE'


class TauRule(str, Enum):
    ARGMAX = 'ARGMAX'  # (i, c) whose overall winner is outside dataset i
    STRONGEST_OTHER = 'STRONGEST_OTHER'  # (i, c) whose strongest class other than c is outside dataset i


# As in the rest of the package, NamedTuple is used to emphasize immutability.
# Note that while NamedTuples are immutable, the numpy arrays inside them are not;
# nothing in uniseg_lab writes into an array it did not allocate itself.

class DatasetTaxonomy(NamedTuple):
    dataset_id: str
    classes: Tuple[str, ...]  # local index = position


class UnifiedLabelSpace(NamedTuple):
    classes: Tuple[str, ...]  # unified index = position
    dataset_ids: Tuple[str, ...]  # registration order
    membership: Dict[str, np.ndarray]  # dataset_id -> bool (K_u,)
    remap: Dict[str, np.ndarray]  # dataset_id -> int64 (K_i,) local -> unified

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def index(self, name: str) -> int:
        return self.classes.index(name)

    def local_classes(self, dataset_id: str) -> Tuple[str, ...]:
        return tuple(self.classes[u] for u in self.remap[dataset_id])


class ProbMap(NamedTuple):
    values: np.ndarray  # (..., K_u) in [0, 1]
    normalized: bool  # True for softmax (P), False for elementwise sigmoid (Q)


class TriStateLabelMap(NamedTuple):
    states: np.ndarray  # int8 (..., K_u) over {POSITIVE, NEGATIVE, NULL}
    ignore: np.ndarray  # bool (...), True where the pixel is excluded


class SegModel(NamedTuple):
    head: HeadKind
    # LINEAR: w1 (F_in, F_h), b1 (F_h,), w2 (K_u, F_h), b2 (K_u,)
    # COSINE: w1 (F_in, F_h), b1 (F_h,), phi (K_u, F_h)
    params: Params
    scale: float  # cosine scale t; unused by the linear head

    @property
    def in_dim(self) -> int:
        return int(self.params['w1'].shape[0])

    @property
    def hidden_dim(self) -> int:
        return int(self.params['w1'].shape[1])

    @property
    def num_classes(self) -> int:
        key = 'phi' if self.head == HeadKind.COSINE else 'w2'
        return int(self.params[key].shape[0])


class GradBundle(NamedTuple):
    blocks: Params  # same keys and shapes as SegModel.params


class ForwardCache(NamedTuple):
    x: np.ndarray  # (N, F_in)
    h: np.ndarray  # (N, F_h)
    h_norm: Optional[np.ndarray]  # (N,) cosine head only
    phi_norm: Optional[np.ndarray]  # (K_u,) cosine head only


class SimilarityTensor(NamedTuple):
    scores: Dict[ClassKey, np.ndarray]  # only where counts > 0; (K_u,) in [0, 1]
    counts: Dict[ClassKey, int]  # M_{i,c}, every (dataset, member class)
    pooled: bool


class TauContribution(NamedTuple):
    dataset_id: str
    class_index: int
    other_index: int
    score: float


class MultiLabelTable(NamedTuple):
    entries: Dict[ClassKey, FrozenSet[int]]  # always contains the class itself
    tau: Optional[float]
    notes: Tuple[str, ...]


class HierarchySpec(NamedTuple):
    fine_classes: Tuple[str, ...]
    coarsen: Dict[str, Dict[str, str]]  # dataset_id -> fine name -> local name
    local_classes: Dict[str, Tuple[str, ...]]  # dataset_id -> local class order
    feature_dim: int
    cluster_means: np.ndarray  # (n_fine, F_in)
    cluster_std: float
    class_weights: Tuple[float, ...]  # tiling frequency per fine class
    min_rect: int
    max_rect: int
    seed: int


class Sample(NamedTuple):
    dataset_id: str
    features: np.ndarray  # (H, W, F_in) float64
    labels: LabelMap  # local space of dataset_id
    fine_truth: LabelMap  # fine space, diagnostics only


class TrainConfig(NamedTuple):
    loss_kind: LossKind
    head_kind: HeadKind
    lr0: float
    momentum: float
    poly_power: float
    max_iters: int
    batch_size: int
    hflip: bool
    seed: int
    hidden_dim: int
    scale: float
    tau_rule: TauRule
    stage1: Json  # overrides applied for the relation pre-training stage


class RunRecord(NamedTuple):
    losses: List[float]
    lrs: List[float]
    model: SegModel
    config: Json
    wall_time: float


class CRPipelineResult(NamedTuple):
    stage1: RunRecord
    similarity: SimilarityTensor
    tau: Optional[float]
    table: MultiLabelTable
    stage2: RunRecord


class MultiLabelPrediction(NamedTuple):
    primary: LabelMap  # test-local indices
    override_class: np.ndarray  # unified index of the out-of-space override, -1 where none
    override_score: np.ndarray  # nan where no override
    threshold: float


class ConflictReport(NamedTuple):
    signs: Tuple[int, int]
    product: float
    conflict: bool


class EvalResult(NamedTuple):
    per_class: Dict[str, float]  # only evaluable classes
    miou: float
    pixel_accuracy: float
    pixels: int
    classes: Tuple[str, ...]  # test taxonomy order, i.e. confusion matrix order
    confusion: ConfusionMatrix


class DataBundle(NamedTuple):
    spec: 'HierarchySpec'
    taxonomies: List[DatasetTaxonomy]  # registration order
    train: Dict[str, List[Sample]]
    test: Dict[str, List[Sample]]

    def taxonomy(self, dataset_id: str) -> DatasetTaxonomy:
        for tax in self.taxonomies:
            if tax.dataset_id == dataset_id:
                return tax
        raise KeyError(dataset_id)


class GradCheckReport(NamedTuple):
    loss_kind: LossKind
    head_kind: HeadKind
    block_errors: Dict[str, float]  # worst relative error per parameter block
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


class OverrideStat(NamedTuple):
    dataset_id: str
    fine_class: str
    threshold: float
    pixels: int
    overridden: int

    @property
    def rate(self) -> float:
        return self.overridden / self.pixels if self.pixels else 0.0


class ExperimentConfig(NamedTuple):
    data: str  # 'fixture:<name>' or a dataset dump directory
    train_datasets: Tuple[str, ...]  # always trained on
    held_out: Tuple[str, ...]  # rotated out one at a time
    unseen_datasets: Tuple[str, ...]  # never trained on, always evaluated
    losses: Tuple[LossKind, ...]
    overrides: Json  # TrainConfig overrides
    out_dir: str
    seeds: Tuple[int, ...]
    focus_classes: Tuple[str, ...]
    single_best: bool
    n_train_images: int
    n_test_images: int
    height: int
    width: int
