"""Evaluation reports, ablation sweeps and routing-coefficient explanations."""
import itertools
import logging
import pathlib
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pandas as pd

from modules import storage
from modules.capsules import HORIZONTAL, VERTICAL
from modules.config import FUSION_MECHANISMS, TASK_MODALITIES
from modules.errors import ConfigError, ContractError
from modules.metrics import (BinaryEvalPair, miou, per_class_report,
                             saliency_panel)
from modules.segmentation import predict_classes
from modules.synthetic import dataset_for
from modules.training import metric_name, train
from modules.tensor import no_grad

logger = logging.getLogger(__name__)

SWEEP_AXES = ('capsule_types', 'share_params', 'fusion_mechanism',
              'modalities', 'sub_decoders')
CAPSULE_TYPE_GRID = (4, 8, 16, 25)


def sweep_settings(config, axis):
    """Config overrides for every setting along ``axis``, in report order."""
    if axis == 'capsule_types':
        return [{'capsule_types': t} for t in CAPSULE_TYPE_GRID]
    if axis == 'share_params':
        return [{'share_params': True}, {'share_params': False}]
    if axis == 'fusion_mechanism':
        return [{'fusion_mechanism': m} for m in FUSION_MECHANISMS]
    if axis == 'modalities':
        names = TASK_MODALITIES[config.task]
        pairs = [{'modality_count': 2, 'modalities': list(p)}
                 for p in itertools.combinations(names, 2)]
        return pairs + [{'modality_count': 3, 'modalities': list(names)}]
    if axis == 'sub_decoders':
        if config.task != 'vdt':
            raise ConfigError('the sub_decoders axis needs task vdt')
        return [{'sub_decoders': 1}, {'sub_decoders': 2}]
    raise ConfigError(f'unknown sweep axis {axis!r}; choose from '
                      f'{", ".join(SWEEP_AXES)}')


def setting_label(overrides):
    return ','.join(f'{key}={"+".join(value) if isinstance(value, list) else value}'
                    for key, value in overrides.items()
                    if key != 'modality_count')


def run_setting(job):
    """Train one (setting, repeat) pair; the unit of work of a sweep."""
    config, axis, overrides, repeat = job
    config = config.replace(seed=config.seed + repeat, **overrides)
    result = train(config)
    last = result.log.iloc[-1]
    metric = metric_name(config)
    return {'axis': axis, 'setting': setting_label(overrides),
            'repeat': repeat, 'seed': config.seed,
            'final_loss': float(last['loss']), metric: float(last[metric])}


def sweep(config, axis, workers=1):
    """Matched-budget training for every setting on ``axis``, ``repeats``
    times each. Returns one row per run as a DataFrame."""
    jobs = [(config, axis, overrides, repeat)
            for overrides in sweep_settings(config, axis)
            for repeat in range(config.repeats)]
    logger.info('sweeping %s: %d runs on %d worker(s)', axis, len(jobs),
                workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run_setting, jobs))
    else:
        rows = [run_setting(job) for job in jobs]
    return pd.DataFrame(rows)


def evaluate(model, config, scenes=None):
    """Per-scene metric rows and a one-row aggregate.

    Returns ``(per_scene DataFrame, aggregate dict, class report or None,
    predictions)``. The class report is the per-class IoU/F1/accuracy table
    over all pixels of a segmentation set; predictions are class maps (smm)
    or final saliency maps (vdt).
    """
    scenes = dataset_for(config) if scenes is None else scenes
    rows, predictions, truths = [], [], []
    with no_grad():
        for scene in scenes:
            output = model(scene.inputs())
            if config.task == 'smm':
                predicted = predict_classes(output)
                predictions.append(predicted)
                truths.append(scene.labels)
                rows.append({'scene': scene.recipe['index'],
                             'mIoU': miou(predicted, scene.labels,
                                          config.classes)[1]})
            else:
                pair = BinaryEvalPair(output.final.data[:, :, 0], scene.labels)
                predictions.append(output.final.data[:, :, 0])
                rows.append({'scene': scene.recipe['index'],
                             **saliency_panel(pair, config.beta2,
                                              config.alpha_s)})
    frame = pd.DataFrame(rows)
    aggregate = frame.drop(columns='scene').mean().to_dict()
    report = None
    if config.task == 'smm':
        predicted, truth = np.stack(predictions), np.stack(truths)
        aggregate['mIoU_pixels'] = miou(predicted, truth, config.classes)[1]
        report = per_class_report(predicted, truth, config.classes)
    return frame, aggregate, report, predictions


def export_predictions(directory, config, scenes, predictions):
    """PGM maps named after scene indices, plus a palette for class maps."""
    directory = pathlib.Path(directory)
    for scene, predicted in zip(scenes, predictions):
        path = directory / f'scene_{scene.recipe["index"]:04d}.pgm'
        if config.task == 'smm':
            storage.write_pgm(path, predicted)
        else:
            storage.write_pgm(path, storage.saliency_to_pgm(predicted))
    if config.task == 'smm':
        storage.write_palette(directory / 'palette.json', config.classes)


def explain(model, config, scene, stage, position):
    """Routing coefficients of one pixel at one fused stage.

    Parameters
    ----------
    stage: int
        Backbone stage number; must be one of ``model.fused_stages``.

    position: (row, column)
        Pixel in the stage's own resolution. The row indexes the
        horizontal routing line, the column the vertical one.

    Returns
    -------
    dict with ``records`` (one entry per coefficient, with its stage, axis,
    position, part type, modality and whole type), ``raw`` (the simplex rows
    per axis) and ``split`` (per-modality split coefficients per axis).
    """
    if config.fusion_mechanism != 'pwrf':
        raise ContractError('routing explanations need the pwrf fusion block')
    if stage not in model.fused_stages:
        raise ContractError(f'stage {stage} is not fused; choose from '
                            f'{model.fused_stages}')
    with no_grad():
        fusion = model.fusion_trace(scene.inputs())[stage]
    row, col = position
    height, width = fusion.shared.grid.shape[:2]
    if not (0 <= row < height and 0 <= col < width):
        raise ContractError(f'position {position} outside the {height}x{width} '
                            f'grid of stage {stage}')
    part_types = config.capsule_types
    records, raw, split = [], {}, {}
    for axis, routing, splits, index in (
            (HORIZONTAL, fusion.routing_h, fusion.coefficients_h, row),
            (VERTICAL, fusion.routing_v, fusion.coefficients_v, col)):
        simplex = routing.coefficients.data[index]
        raw[axis] = simplex.tolist()
        for part, whole in np.ndindex(*simplex.shape):
            records.append({
                'stage': stage, 'axis': axis, 'position': int(index),
                'part_type': part % part_types,
                'modality': fusion.modalities[part // part_types],
                'whole_type': whole, 'value': float(simplex[part, whole]),
            })
        split[axis] = {
            name: s.data.reshape(-1, part_types)[index].tolist()
            for name, s in zip(fusion.modalities, splits)}
    return {'stage': stage, 'position': [int(row), int(col)],
            'modalities': list(fusion.modalities), 'records': records,
            'raw': raw, 'split': split}


def reassemble(explanation, axis):
    """Rebuild the raw (part types, whole types) simplex rows of ``axis``
    from the exported records, one modality block at a time."""
    rows = [r for r in explanation['records'] if r['axis'] == axis]
    part_types = 1 + max(r['part_type'] for r in rows)
    whole_types = 1 + max(r['whole_type'] for r in rows)
    blocks = {name: np.zeros((part_types, whole_types))
              for name in explanation['modalities']}
    for r in rows:
        blocks[r['modality']][r['part_type'], r['whole_type']] = r['value']
    return np.concatenate([blocks[name] for name in explanation['modalities']],
                          axis=0)


def gnuplot_table(explanation):
    """Whitespace-separated table: one line per coefficient."""
    frame = pd.DataFrame(explanation['records'])
    return frame.to_csv(sep=' ', index=False)
