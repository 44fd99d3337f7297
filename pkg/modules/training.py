"""Training loop, optimizer, learning-rate schedules and checkpoints."""
import logging
import pathlib
from dataclasses import dataclass

import numpy as np
import pandas as pd

from modules import storage
from modules.config import PipelineConfig
from modules.errors import NonFiniteError, TrainingDivergedError
from modules.metrics import BinaryEvalPair, mae, miou
from modules.saliency import SaliencyModel, saliency_loss
from modules.segmentation import (SegmentationModel, ohem_cross_entropy,
                                  predict_classes)
from modules.synthetic import dataset_for
from modules.tensor import backward

logger = logging.getLogger(__name__)

LOG_FILE = 'log.csv'
CHECKPOINT_DIR = 'checkpoint'
POLY_POWER = 0.9
STEP_FACTOR = 0.1


def build_model(config, rng=None):
    if config.task == 'smm':
        return SegmentationModel(config, rng)
    return SaliencyModel(config, rng)


class Adam:
    """Adam without weight decay.

    Parameters
    ----------
    parameters: list of Parameter

    learning_rate: float
        Default step size; ``step`` may override it per call.
    """

    def __init__(self, parameters, learning_rate, betas=(0.9, 0.999),
                 eps=1e-8):
        self.parameters = list(parameters)
        self.learning_rate = learning_rate
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.steps = 0
        self.first = [np.zeros_like(p.data) for p in self.parameters]
        self.second = [np.zeros_like(p.data) for p in self.parameters]

    def zero_grad(self):
        for p in self.parameters:
            p.zero_grad()

    def step(self, learning_rate=None):
        lr = self.learning_rate if learning_rate is None else learning_rate
        self.steps += 1
        correction1 = 1.0 - self.beta1 ** self.steps
        correction2 = 1.0 - self.beta2 ** self.steps
        for p, m, v in zip(self.parameters, self.first, self.second):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= lr * (m / correction1) / (np.sqrt(v / correction2)
                                                + self.eps)


def learning_rate_at(config, epoch):
    """Step size for ``epoch`` (counting from 0) under ``config.lr_schedule``."""
    base = config.learning_rate
    if config.lr_schedule == 'poly':
        return base * (1.0 - epoch / config.epochs) ** POLY_POWER
    if config.lr_schedule == 'step':
        return base * STEP_FACTOR ** (epoch // config.lr_step_epochs)
    return base


def scene_loss(model, scene, config):
    """Forward one scene; returns the loss tensor and the raw output."""
    output = model(scene.inputs())
    if config.task == 'smm':
        loss = ohem_cross_entropy(output, scene.labels, config.keep_fraction,
                                  config.min_kept)
    else:
        loss = saliency_loss(output, scene.labels)
    return loss, output


def scene_score(output, scene, config):
    """mIoU of the predicted classes (smm) or MAE of the final map (vdt)."""
    if config.task == 'smm':
        return miou(predict_classes(output), scene.labels, config.classes)[1]
    return mae(BinaryEvalPair(output.final.data[:, :, 0], scene.labels))


def metric_name(config):
    return 'miou' if config.task == 'smm' else 'mae'


def target_reached(config, value):
    """Whether an epoch's logged metric meets ``config.target_metric``."""
    if config.target_metric is None:
        return False
    if config.task == 'smm':
        return value >= config.target_metric
    return value <= config.target_metric


@dataclass
class TrainingResult:
    model: object
    log: pd.DataFrame
    output_dir: pathlib.Path = None


def _check_gradients(model, epoch):
    for name, p in model.named_parameters():
        if not np.isfinite(p.grad).all():
            raise TrainingDivergedError(
                f'epoch {epoch}: non-finite gradient in {name}')


def train(config, scenes=None, output_dir=None):
    """Fit a fresh model to the synthetic scenes of ``config``.

    Parameters
    ----------
    config: PipelineConfig

    scenes: list of SyntheticScene, default=None
        Training set; generated from the config when omitted.

    output_dir: path-like, default=None
        Where ``log.csv`` and the checkpoint are written. Nothing is
        written when None.

    Returns
    -------
    TrainingResult
    """
    config.validate()
    scenes = dataset_for(config) if scenes is None else scenes
    model = build_model(config)
    optimizer = Adam(model.parameters(), config.learning_rate)
    order_rng = np.random.default_rng([config.seed, 1])
    metric = metric_name(config)
    rows = []
    for epoch in range(1, config.epochs + 1):
        lr = learning_rate_at(config, epoch - 1)
        losses = np.zeros(len(scenes))
        scores = np.zeros(len(scenes))
        order = order_rng.permutation(len(scenes))
        for start in range(0, len(order), config.batch):
            batch = order[start:start + config.batch]
            optimizer.zero_grad()
            for index in batch:
                try:
                    loss, output = scene_loss(model, scenes[index], config)
                    backward(loss * (1.0 / len(batch)))
                except NonFiniteError as exc:
                    raise TrainingDivergedError(
                        f'epoch {epoch}, scene {index}: {exc}') from exc
                losses[index] = loss.item()
                scores[index] = scene_score(output, scenes[index], config)
            _check_gradients(model, epoch)
            optimizer.step(lr)
        # per-scene slots keep the epoch mean independent of the shuffle
        rows.append({'epoch': epoch, 'lr': lr, 'loss': float(losses.mean()),
                     metric: float(scores.mean())})
        logger.info('epoch %d/%d loss %.6f %s %.4f', epoch, config.epochs,
                    rows[-1]['loss'], metric, rows[-1][metric])
        if target_reached(config, rows[-1][metric]):
            logger.info('%s target %.4f reached at epoch %d', metric,
                        config.target_metric, epoch)
            break
    log = pd.DataFrame(rows, columns=['epoch', 'lr', 'loss', metric])
    result = TrainingResult(model, log)
    if output_dir is not None:
        result.output_dir = save_run(result, config, output_dir)
    return result


def save_run(result, config, output_dir):
    output_dir = pathlib.Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    result.log.to_csv(output_dir / LOG_FILE, index=False)
    storage.save_checkpoint(output_dir / CHECKPOINT_DIR, config.to_dict(),
                            result.model.state())
    return output_dir


def load_model(path):
    """Rebuild a model from a checkpoint directory (or a run directory that
    contains one). Returns ``(model, config)``."""
    path = pathlib.Path(path)
    if (path / CHECKPOINT_DIR / storage.MANIFEST).exists():
        path = path / CHECKPOINT_DIR
    values, state = storage.load_checkpoint(path)
    config = PipelineConfig.from_dict(values)
    model = build_model(config)
    model.load_state(state)
    return model, config
