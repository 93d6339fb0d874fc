"""IoU evaluation with label-space projection, and multi-label prediction with out-of-space override."""
import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import utils
from .errors import EvaluationError, ShapeMismatchError
from .labelspace import eval_projection
from .losses import sigmoid, softmax
from .model import forward
from .uniseg_types import (IGNORE, ConfusionMatrix, DatasetTaxonomy, EvalResult, LabelMap, LossKind,
                           MultiLabelPrediction, OverrideStat, Projection, Sample, SegModel, UnifiedLabelSpace)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = {LossKind.CE: 0.1, LossKind.NULL_BCE: 0.5, LossKind.CR_BCE: 0.5}


def _sorted_projection(projection: Projection) -> Tuple[np.ndarray, np.ndarray]:
    # Ascending unified index, so np.argmax's first-maximum rule is the lowest-channel tie-break.
    pairs = sorted(projection)
    return np.array([u for u, _ in pairs], dtype=np.int64), np.array([j for _, j in pairs], dtype=np.int64)


def predict(model: SegModel, features: np.ndarray, projection: Projection) -> LabelMap:
    """Per pixel argmax over the projected channels, reported as a test-local index.

    Args:
        model (SegModel): The model
        features (np.ndarray): (H, W, F_in) features
        projection (Projection): From labelspace.eval_projection()

    Raises:
        EvaluationError: If the projection is empty

    Returns:
        LabelMap: (H, W) test-local indices; ties go to the lowest unified channel
    """
    if not projection:
        raise EvaluationError('Error! Cannot predict through an empty projection')
    unified, local = _sorted_projection(projection)
    logits = forward(model, features)
    return local[np.argmax(logits[..., unified], axis=-1)]


def accumulate(conf: ConfusionMatrix, pred: LabelMap, gt: LabelMap,
               ignore: Optional[np.ndarray] = None) -> ConfusionMatrix:
    """conf[gt][pred] += 1 for every pixel that is not IGNORE (nor masked by ignore).

    Args:
        conf (ConfusionMatrix): (K, K) counts
        pred (LabelMap): Predictions
        gt (LabelMap): Ground truth
        ignore (Optional[np.ndarray], optional): Extra pixels to skip. Defaults to None.

    Raises:
        ShapeMismatchError: If pred and gt have different shapes
        EvaluationError: If a class index is out of range

    Returns:
        ConfusionMatrix: A new matrix
    """
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f'Error! pred {pred.shape} and gt {gt.shape} differ')
    k = conf.shape[0]
    valid = gt != IGNORE
    if ignore is not None:
        valid &= ~np.asarray(ignore, dtype=bool)
    g, p = gt[valid], pred[valid]
    if np.any((g < 0) | (g >= k) | (p < 0) | (p >= k)):
        raise EvaluationError(f'Error! Class index out of range for a {k}x{k} confusion matrix')
    return conf + np.bincount(g * k + p, minlength=k * k).reshape(k, k)


def iou(conf: ConfusionMatrix) -> List[Optional[float]]:
    """TP / (TP + FP + FN) per class; None where the denominator is zero."""
    tp = np.diag(conf)
    denom = conf.sum(axis=0) + conf.sum(axis=1) - tp
    return [float(t / d) if d > 0 else None for t, d in zip(tp, denom)]


def miou(conf: ConfusionMatrix) -> Tuple[List[Optional[float]], float]:
    """Mean IoU over the classes with a nonzero denominator.

    Args:
        conf (ConfusionMatrix): The confusion matrix

    Raises:
        EvaluationError: If no class is evaluable

    Returns:
        Tuple[List[Optional[float]], float]: Per-class IoU (None when excluded) and the mean
    """
    per_class = iou(conf)
    evaluable = [v for v in per_class if v is not None]
    if not evaluable:
        raise EvaluationError('Error! no evaluable classes: the confusion matrix is empty')
    return per_class, float(np.mean(evaluable))


def miou_subset(conf: ConfusionMatrix, classes: Sequence[str], keep: Sequence[str]) -> Optional[float]:
    """Mean IoU over the evaluable classes whose names are in keep; None when there are none."""
    values = [v for name, v in zip(classes, iou(conf)) if name in keep and v is not None]
    return float(np.mean(values)) if values else None


def pixel_accuracy(conf: ConfusionMatrix) -> float:
    total = conf.sum()
    return float(np.trace(conf) / total) if total > 0 else 0.0


def multilabel_predict(model: SegModel, features: np.ndarray, projection: Projection, threshold: float,
                       loss_kind: LossKind) -> MultiLabelPrediction:
    """Top-1 over the test space, overridden per pixel by the top-1 out-of-space
    class when that class scores >= threshold.\n
    Scores are sigmoid for BCE-trained models and softmax over all channels for CE.

    Args:
        model (SegModel): The model
        features (np.ndarray): (H, W, F_in) features
        projection (Projection): The in-space channels, from labelspace.eval_projection()
        threshold (float): In (0, 1); 0.5 for BCE models and 0.1 for CE models by convention
        loss_kind (LossKind): How the model was trained

    Raises:
        EvaluationError: If the threshold is outside (0, 1), or the projection is empty or covers every channel

    Returns:
        MultiLabelPrediction: The primary map, the override class (-1 for none) and score (nan for none)
    """
    if not 0.0 < threshold < 1.0:
        raise EvaluationError(f'Error! threshold must be in (0, 1), not {threshold}')
    if not projection:
        raise EvaluationError('Error! Cannot predict through an empty projection')
    unified, local = _sorted_projection(projection)
    outside = np.setdiff1d(np.arange(model.num_classes), unified)
    if outside.size == 0:
        raise EvaluationError('Error! The test space covers every channel; there is nothing to override with')
    logits = forward(model, features)
    probs = softmax(logits) if loss_kind == LossKind.CE else sigmoid(logits)
    scores = probs.values
    primary = local[np.argmax(scores[..., unified], axis=-1)]
    out_scores = scores[..., outside]
    best = np.argmax(out_scores, axis=-1)
    best_score = np.take_along_axis(out_scores, best[..., None], axis=-1)[..., 0]
    fires = best_score >= threshold
    override_class = np.where(fires, outside[best], -1)
    override_score = np.where(fires, best_score, np.nan)
    return MultiLabelPrediction(primary, override_class, override_score, threshold)


def evaluate_dataset(model: SegModel, samples: Sequence[Sample], space: UnifiedLabelSpace,
                     taxonomy: DatasetTaxonomy) -> EvalResult:
    """Evaluates a model trained on space on the samples of one test dataset.\n
    Ground-truth pixels of classes the model never saw (outside the projection) are ignored.

    Args:
        model (SegModel): The model
        samples (Sequence[Sample]): The test samples (labels in taxonomy's local space)
        space (UnifiedLabelSpace): The space the model was trained on
        taxonomy (DatasetTaxonomy): The test taxonomy

    Raises:
        EvaluationError: If the spaces are disjoint or nothing is evaluable

    Returns:
        EvalResult: Per-class IoU, mIoU, pixel accuracy and the confusion matrix
    """
    projection = eval_projection(space, taxonomy)
    if not projection:
        raise EvaluationError(f'Error! {taxonomy.dataset_id} shares no classes with the trained space')
    k = len(taxonomy.classes)
    seen = np.zeros(k, dtype=bool)
    seen[[j for _, j in projection]] = True
    conf = np.zeros((k, k), dtype=np.int64)
    for sample in samples:
        gt = np.asarray(sample.labels, dtype=np.int64)
        in_range = (gt >= 0) & (gt < k)
        unseen = in_range & ~seen[np.where(in_range, gt, 0)]
        conf = accumulate(conf, predict(model, sample.features, projection), gt, unseen)
    per_class, mean = miou(conf)
    named = {name: v for name, v in zip(taxonomy.classes, per_class) if v is not None}
    return EvalResult(named, mean, pixel_accuracy(conf), int(conf.sum()), taxonomy.classes, conf)


def override_stats(model: SegModel, samples: Sequence[Sample], space: UnifiedLabelSpace,
                   taxonomy: DatasetTaxonomy, fine_classes: Sequence[str], loss_kind: LossKind,
                   threshold: Optional[float] = None) -> List[OverrideStat]:
    """For each fine class the model knows but the test taxonomy lacks (e.g.
    motorcyclist on a rider-only dataset): how many of its pixels are overridden to it.

    Args:
        model (SegModel): The model
        samples (Sequence[Sample]): Test samples (with fine_truth)
        space (UnifiedLabelSpace): The trained space
        taxonomy (DatasetTaxonomy): The test taxonomy
        fine_classes (Sequence[str]): The fine class names, in fine_truth index order
        loss_kind (LossKind): How the model was trained
        threshold (Optional[float], optional): Defaults to 0.5 for BCE and 0.1 for CE.

    Returns:
        List[OverrideStat]: One entry per such fine class
    """
    threshold = DEFAULT_THRESHOLD[loss_kind] if threshold is None else threshold
    projection = eval_projection(space, taxonomy)
    targets = [(f, name) for f, name in enumerate(fine_classes)
               if name in space.classes and name not in taxonomy.classes]
    if not targets or not projection or len(projection) == space.num_classes:
        return []
    pixels = {name: 0 for _, name in targets}
    overridden = {name: 0 for _, name in targets}
    for sample in samples:
        pred = multilabel_predict(model, sample.features, projection, threshold, loss_kind)
        for f, name in targets:
            at = sample.fine_truth == f
            pixels[name] += int(np.count_nonzero(at))
            overridden[name] += int(np.count_nonzero(pred.override_class[at] == space.index(name)))
    return [OverrideStat(taxonomy.dataset_id, name, threshold, pixels[name], overridden[name])
            for _, name in targets]


def result_to_doc(result: EvalResult) -> Dict:
    return {'per_class': result.per_class, 'miou': result.miou,
            'pixel_accuracy': result.pixel_accuracy, 'pixels': result.pixels}


def write_metrics(path: Path, results: Mapping[str, EvalResult]) -> None:
    """Writes {dataset_id: {per_class: {name: iou}, miou, pixel_accuracy, pixels}} as JSON."""
    utils.write_json(path, {d: result_to_doc(r) for d, r in results.items()})
