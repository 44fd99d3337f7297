"""Evaluation metrics for saliency maps and segmentation label maps.

Saliency metrics take a ``BinaryEvalPair``: a prediction in [0, 1] and a
binary ground truth of the same (H, W) shape. They return plain floats.
"""
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.metrics import confusion_matrix

from modules.errors import ContractError, DimensionError, EmptyGroundTruthWarning

logger = logging.getLogger(__name__)

THRESHOLDS = np.arange(256) / 255.0
EPS = np.spacing(1)


@dataclass(frozen=True)
class BinaryEvalPair:
    prediction: np.ndarray
    ground_truth: np.ndarray

    def __post_init__(self):
        prediction = np.squeeze(np.asarray(self.prediction, dtype=np.float64))
        truth = np.squeeze(np.asarray(self.ground_truth, dtype=np.float64))
        if prediction.shape != truth.shape or prediction.ndim != 2:
            raise DimensionError(
                f'prediction {prediction.shape} and ground truth '
                f'{truth.shape} must be equal 2-D maps')
        if prediction.min() < 0 or prediction.max() > 1:
            raise ContractError('prediction must lie in [0, 1]')
        if not np.isin(truth, (0.0, 1.0)).all():
            raise ContractError('ground truth must be binary')
        object.__setattr__(self, 'prediction', prediction)
        object.__setattr__(self, 'ground_truth', truth)

    @classmethod
    def from_probabilities(cls, prediction, ground_truth):
        """Binarize a soft ground truth at 0.5."""
        return cls(prediction, (np.asarray(ground_truth) >= 0.5).astype(float))


def mae(pair):
    return float(np.mean(np.abs(pair.prediction - pair.ground_truth)))


def adaptive_threshold(prediction):
    return min(2.0 * float(prediction.mean()), 1.0)


def _adaptive_binary(prediction):
    return (prediction >= adaptive_threshold(prediction)) & (prediction > 0)


def _f_from_binary(binary, truth, beta2):
    positives = truth.sum()
    if positives == 0:
        warnings.warn('ground truth has no positive pixels; F-measure is 0',
                      EmptyGroundTruthWarning, stacklevel=3)
        return 0.0
    hits = float(np.sum(binary & (truth == 1)))
    predicted = float(binary.sum())
    precision = hits / predicted if predicted else 0.0
    recall = hits / positives
    denominator = beta2 * precision + recall
    if denominator == 0:
        return 0.0
    return (1.0 + beta2) * precision * recall / denominator


def f_measure_at(pair, threshold, beta2=0.3):
    """F-measure of the map binarized as ``prediction > threshold``."""
    return _f_from_binary(pair.prediction > threshold, pair.ground_truth, beta2)


def f_measure(pair, beta2=0.3, mode='adaptive'):
    """Weighted harmonic mean of precision and recall.

    Parameters
    ----------
    pair: BinaryEvalPair

    beta2: float, default=0.3
        Weight of precision against recall.

    mode: {'adaptive', 'mean'}, default='adaptive'
        'adaptive' binarizes at twice the mean prediction (capped at 1);
        'mean' averages 256 evaluations at thresholds k/255.
    """
    if beta2 <= 0:
        raise ContractError('beta2 must be positive')
    if mode == 'adaptive':
        return _f_from_binary(_adaptive_binary(pair.prediction),
                              pair.ground_truth, beta2)
    if mode == 'mean':
        return float(np.mean([f_measure_at(pair, t, beta2)
                              for t in THRESHOLDS]))
    raise ContractError(f'unknown F-measure mode {mode!r}')


def _e_from_binary(binary, truth):
    binary = binary.astype(np.float64)
    positives = truth.sum()
    if positives == 0:
        return float(np.mean(1.0 - binary))
    if positives == truth.size:
        return float(np.mean(binary))
    aligned_p = binary - binary.mean()
    aligned_g = truth - truth.mean()
    alignment = 2.0 * aligned_p * aligned_g / (aligned_p ** 2 + aligned_g ** 2)
    return float(np.mean((alignment + 1.0) ** 2 / 4.0))


def e_measure_at(pair, threshold):
    return _e_from_binary(pair.prediction > threshold, pair.ground_truth)


def e_measure(pair, mode='adaptive'):
    """Enhanced-alignment measure; thresholds as in ``f_measure``.

    A constant ground truth has no alignment to measure: an all-background
    truth scores the fraction of background predictions, an all-foreground
    truth the fraction of foreground predictions.
    """
    if mode == 'adaptive':
        return _e_from_binary(_adaptive_binary(pair.prediction),
                              pair.ground_truth)
    if mode == 'mean':
        return float(np.mean([e_measure_at(pair, t) for t in THRESHOLDS]))
    raise ContractError(f'unknown E-measure mode {mode!r}')


def _object_score(values):
    if values.size == 0:
        return 0.0
    mean = values.mean()
    spread = values.std(ddof=1) if values.size > 1 else 0.0
    return 2.0 * mean / (mean ** 2 + 1.0 + spread + EPS)


def object_structure(pair):
    """Object-aware structural similarity of foreground and background."""
    prediction, truth = pair.prediction, pair.ground_truth
    coverage = truth.mean()
    foreground = _object_score(prediction[truth == 1])
    background = _object_score(1.0 - prediction[truth == 0])
    return float(coverage * foreground + (1.0 - coverage) * background)


def _block_ssim(prediction, truth):
    count = prediction.size
    if count == 0:
        return 0.0
    x, y = prediction.mean(), truth.mean()
    denominator = max(count - 1, 1)
    var_x = np.sum((prediction - x) ** 2) / denominator
    var_y = np.sum((truth - y) ** 2) / denominator
    covariance = np.sum((prediction - x) * (truth - y)) / denominator
    alpha = 4.0 * x * y * covariance
    beta = (x ** 2 + y ** 2) * (var_x + var_y)
    if alpha != 0:
        return alpha / (beta + EPS)
    if beta == 0:
        return 1.0
    return 0.0


def centroid(truth):
    """1-based (row, column) split point at the foreground centroid."""
    height, width = truth.shape
    if truth.sum() == 0:
        row, col = round(height / 2), round(width / 2)
    else:
        row, col = np.argwhere(truth).mean(axis=0).round()
    return int(row) + 1, int(col) + 1


def region_structure(pair):
    """Region-aware structural similarity over four centroid-split blocks."""
    prediction, truth = pair.prediction, pair.ground_truth
    height, width = truth.shape
    row, col = centroid(truth)
    row, col = min(row, height), min(col, width)
    area = height * width
    blocks = (
        (slice(0, row), slice(0, col), row * col / area),
        (slice(0, row), slice(col, width), row * (width - col) / area),
        (slice(row, height), slice(0, col), (height - row) * col / area),
    )
    score, weight_left = 0.0, 1.0
    for rows, cols, weight in blocks:
        score += weight * _block_ssim(prediction[rows, cols], truth[rows, cols])
        weight_left -= weight
    score += weight_left * _block_ssim(prediction[row:, col:],
                                       truth[row:, col:])
    return float(score)


def s_measure(pair, alpha=0.5):
    """Structure measure: alpha * object score + (1 - alpha) * region score."""
    if not 0 <= alpha <= 1:
        raise ContractError('alpha must lie in [0, 1]')
    coverage = pair.ground_truth.mean()
    if coverage == 0:
        return float(1.0 - pair.prediction.mean())
    if coverage == 1:
        return float(pair.prediction.mean())
    score = alpha * object_structure(pair) \
        + (1.0 - alpha) * region_structure(pair)
    return max(float(score), 0.0)


def saliency_panel(pair, beta2=0.3, alpha=0.5):
    """Every saliency metric for one pair, keyed by report column name."""
    return {
        'S': s_measure(pair, alpha),
        'MAE': mae(pair),
        'E_adp': e_measure(pair, 'adaptive'),
        'E_mean': e_measure(pair, 'mean'),
        'F_adp': f_measure(pair, beta2, 'adaptive'),
        'F_mean': f_measure(pair, beta2, 'mean'),
    }


def _confusion(predicted, truth, classes):
    predicted = np.asarray(predicted).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if predicted.shape != truth.shape:
        raise DimensionError('prediction and ground truth differ in size')
    if truth.min() < 0 or truth.max() >= classes or \
            predicted.min() < 0 or predicted.max() >= classes:
        raise ContractError(f'class ids must lie in 0..{classes - 1}')
    # rows are ground truth, columns are predictions
    matrix = confusion_matrix(truth, predicted, labels=np.arange(classes))
    hits = np.diag(matrix).astype(np.float64)
    false_pos = matrix.sum(axis=0) - hits
    false_neg = matrix.sum(axis=1) - hits
    return hits, false_pos, false_neg


def miou(predicted, truth, classes):
    """Per-class IoU (NaN for classes absent from both maps) and their mean
    over present classes."""
    hits, false_pos, false_neg = _confusion(predicted, truth, classes)
    union = hits + false_pos + false_neg
    present = union > 0
    per_class = np.full(classes, np.nan)
    per_class[present] = hits[present] / union[present]
    return per_class.tolist(), float(np.mean(per_class[present]))


def per_class_report(predicted, truth, classes, names=None):
    """IoU, F1 and accuracy (per-class recall) as a DataFrame indexed by
    class, with a final 'mean' row over present classes."""
    hits, false_pos, false_neg = _confusion(predicted, truth, classes)
    union = hits + false_pos + false_neg
    with np.errstate(invalid='ignore', divide='ignore'):
        frame = pd.DataFrame({
            'IoU': np.where(union > 0, hits / union, np.nan),
            'F1': np.where(union > 0, 2 * hits / (2 * hits + false_pos
                                                  + false_neg), np.nan),
            'Accuracy': np.where(hits + false_neg > 0,
                                 hits / (hits + false_neg), np.nan),
        }, index=pd.Index(names or [str(k) for k in range(classes)],
                          name='class'))
    frame.loc['mean'] = frame.mean(skipna=True)
    return frame
