"""File formats: tensor dumps, checkpoints and PGM maps.

A tensor dump is a one-line JSON header ``{"shape":[...]}`` terminated by a
newline, followed by the little-endian float64 payload in row-major order.
"""
import json
import logging
import pathlib

import numpy as np

from modules.errors import CheckpointError, ContractError

logger = logging.getLogger(__name__)

MANIFEST = 'manifest.json'
PAYLOAD_DTYPE = np.dtype('<f8')


def write_tensor(path, values):
    values = np.ascontiguousarray(values, dtype=PAYLOAD_DTYPE)
    header = json.dumps({'shape': list(values.shape)}, separators=(',', ':'))
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('wb') as handle:
        handle.write(header.encode('ascii') + b'\n')
        handle.write(values.tobytes(order='C'))


def read_tensor(path):
    path = pathlib.Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f'cannot read tensor {path}: {exc}') from exc
    header, newline, payload = raw.partition(b'\n')
    if not newline:
        raise CheckpointError(f'{path} has no tensor header')
    try:
        shape = tuple(json.loads(header)['shape'])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f'{path} has a malformed tensor header') from exc
    expected = int(np.prod(shape, dtype=np.int64)) * PAYLOAD_DTYPE.itemsize
    if len(payload) != expected:
        raise CheckpointError(
            f'{path} holds {len(payload)} payload bytes, shape {shape} needs '
            f'{expected}')
    return np.frombuffer(payload, dtype=PAYLOAD_DTYPE).reshape(shape).copy()


def save_checkpoint(directory, config, state):
    """Write ``state`` (parameter name -> array) and the config that built it.

    Parameters
    ----------
    directory: path-like
        Created if missing. Existing parameter files are overwritten.

    config: dict
        JSON-serializable configuration, stored verbatim in the manifest.

    state: dict
        Ordered mapping of parameter name to array.
    """
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, values in state.items():
        filename = f'{name}.tensor'
        write_tensor(directory / filename, values)
        entries.append({'name': name, 'shape': list(np.shape(values)),
                        'file': filename})
    manifest = {'config': config, 'parameters': entries}
    (directory / MANIFEST).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + '\n')
    logger.info('saved %d parameters to %s', len(entries), directory)


def load_checkpoint(directory):
    """Return ``(config dict, state dict)`` from a checkpoint directory."""
    directory = pathlib.Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text())
    except (OSError, ValueError) as exc:
        raise CheckpointError(
            f'cannot read checkpoint manifest in {directory}: {exc}') from exc
    state = {}
    for entry in manifest.get('parameters', []):
        values = read_tensor(directory / entry['file'])
        if list(values.shape) != entry['shape']:
            raise CheckpointError(
                f'parameter {entry["name"]} has shape {values.shape}, manifest '
                f'says {entry["shape"]}')
        state[entry['name']] = values
    return manifest.get('config', {}), state


def write_pgm(path, image):
    """Write an 8-bit binary PGM (P5). ``image`` must hold integers 0..255."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ContractError(f'PGM needs a 2-D image, got shape {image.shape}')
    if image.min() < 0 or image.max() > 255:
        raise ContractError('PGM values must lie in 0..255')
    height, width = image.shape
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open('wb') as handle:
        handle.write(f'P5\n{width} {height}\n255\n'.encode('ascii'))
        handle.write(image.astype(np.uint8).tobytes())


def read_pgm(path):
    raw = pathlib.Path(path).read_bytes()
    fields, offset = [], 0
    # magic, width, height, maxval separated by single whitespace runs
    while len(fields) < 4:
        while raw[offset:offset + 1].isspace():
            offset += 1
        end = offset
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[offset:end].decode('ascii'))
        offset = end
    if fields[0] != 'P5' or fields[3] != '255':
        raise ContractError(f'{path} is not an 8-bit binary PGM')
    width, height = int(fields[1]), int(fields[2])
    payload = raw[offset + 1:offset + 1 + width * height]
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width).copy()


def saliency_to_pgm(probabilities):
    return np.rint(255.0 * np.clip(probabilities, 0.0, 1.0)).astype(np.uint8)


PALETTE = ((0, 0, 0), (230, 25, 75), (60, 180, 75), (0, 130, 200),
           (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230))


def write_palette(path, class_count):
    """JSON sidecar giving a display color for every class id in a PGM map."""
    palette = {str(k): list(PALETTE[k % len(PALETTE)])
               for k in range(class_count)}
    pathlib.Path(path).write_text(json.dumps(palette, indent=2) + '\n')
