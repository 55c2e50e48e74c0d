import json
import numpy as np
import os
import struct
import torch
from typing import Any, Dict, List, Tuple, Union

from ..core.cascade import CascadeConfig, CascadeModel
from ..core.geometry import AnnotationSchema, CorrespondenceMap, Shape
from ..core.regression import LinearMap, PcaBasis
from ..core.transductive import TransductiveModel
from ..errors import MissingFile, ModelFormatError
from ..utils import put

MAGIC = b'TCR1'
FORMAT_VERSION = 1

Model = Union[CascadeModel, TransductiveModel]


def _schema_to_dict(schema: AnnotationSchema) -> Dict[str, Any]:
    return {'name': schema.name, 'landmarks': list(schema.landmark_names), 'interocular': list(schema.interocular_pair)}


def _schema_from_dict(d: Dict[str, Any]) -> AnnotationSchema:
    return AnnotationSchema(d['name'], tuple(d['landmarks']), tuple(d['interocular']))


def _arrays_of(model: Model) -> List[Tuple[str, torch.Tensor]]:
    arrays = [('mean_shape', model.mean_shape.coords)]
    for k, (basis, linear) in enumerate(model.stages):
        arrays += [(f'stage{k}.pca_mean', basis.mean), (f'stage{k}.pca_components', basis.components),
                   (f'stage{k}.matrix', linear.matrix), (f'stage{k}.bias', linear.bias)]
    return arrays


def model_header(model: Model) -> Dict[str, Any]:
    header = {
        'kind': 'transductive' if isinstance(model, TransductiveModel) else 'cascade',
        'format_version': FORMAT_VERSION,
        'schema': _schema_to_dict(model.schema),
        'config': model.config.to_dict(),
        'training_errors': list(model.training_errors),
        'retained_energy': [basis.retained_energy for basis, _ in model.stages],
        'arrays': [{'name': name, 'shape': list(t.shape)} for name, t in _arrays_of(model)],
    }
    if isinstance(model, TransductiveModel):
        header['use_guidance'] = model.use_guidance
        header['correspondence'] = {'target_schema': _schema_to_dict(model.correspondence.target_schema),
                                    'pairs': [list(p) for p in model.correspondence.pairs]}
    return header


def _model_from(header: Dict[str, Any], arrays: Dict[str, torch.Tensor]) -> Model:
    try:
        schema = _schema_from_dict(header['schema'])
        config = CascadeConfig.from_dict(header['config'])
        stages = []
        for k, energy in enumerate(header['retained_energy']):
            stages.append((PcaBasis(arrays[f'stage{k}.pca_mean'], arrays[f'stage{k}.pca_components'], float(energy)),
                           LinearMap(arrays[f'stage{k}.matrix'], arrays[f'stage{k}.bias'])))
        mean = Shape(arrays['mean_shape'], schema)
        errors = tuple(float(e) for e in header['training_errors'])
        if header['kind'] == 'cascade':
            return CascadeModel(schema, mean, tuple(stages), config, errors)
        if header['kind'] == 'transductive':
            target = _schema_from_dict(header['correspondence']['target_schema'])
            correspondence = CorrespondenceMap(schema, target, tuple(tuple(p) for p in header['correspondence']['pairs']))
            return TransductiveModel(schema, correspondence, mean, tuple(stages), config,
                                     bool(header['use_guidance']), errors)
    except (KeyError, TypeError, AssertionError) as e:
        raise ModelFormatError(f'Inconsistent model header: {e!r}')
    raise ModelFormatError(f'Unknown model kind {header["kind"]!r}')


def serialize_model(model: Model) -> bytes:
    """
    Binary container: magic `TCR1`, `<I` format version, `<Q` header length, the sorted-key UTF-8 JSON
    header, then every array as little-endian float64 in header order.
    """
    header = json.dumps(model_header(model), sort_keys=True).encode('utf-8')
    chunks = [MAGIC, struct.pack('<I', FORMAT_VERSION), struct.pack('<Q', len(header)), header]
    for _, tensor in _arrays_of(model):
        chunks.append(tensor.detach().contiguous().numpy().astype('<f8').tobytes())
    return b''.join(chunks)


def deserialize_model(data: bytes) -> Model:
    if len(data) < 16 or data[:4] != MAGIC:
        raise ModelFormatError('Not a TCR1 model container')
    version, = struct.unpack_from('<I', data, 4)
    if version != FORMAT_VERSION:
        raise ModelFormatError(f'Unsupported model format version {version}')
    length, = struct.unpack_from('<Q', data, 8)
    if 16 + length > len(data):
        raise ModelFormatError('Truncated model header')
    try:
        header = json.loads(data[16:16 + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ModelFormatError(f'Invalid model header: {e}')

    arrays, offset = {}, 16 + length
    for entry in header.get('arrays', []):
        count = int(np.prod(entry['shape'], dtype=np.int64))
        if offset + 8 * count > len(data):
            raise ModelFormatError(f'Truncated array {entry["name"]}')
        values = np.frombuffer(data, dtype='<f8', count=count, offset=offset).astype(np.float64)
        arrays[entry['name']] = torch.from_numpy(values.reshape(entry['shape']))
        offset += 8 * count
    if offset != len(data):
        raise ModelFormatError(f'{len(data) - offset} trailing bytes after the last array')
    return _model_from(header, arrays)


def save_model(model: Model, path: str) -> None:
    put(path, serialize_model(model), is_binary=True)


def load_model(path: str) -> Model:
    if not os.path.isfile(path):
        raise MissingFile(f'Model file {path} does not exist')
    with open(path, 'rb') as f:
        return deserialize_model(f.read())


def model_to_json(model: Model) -> str:
    # Python floats serialize with their shortest exact representation, so the export is lossless
    document = model_header(model)
    document['values'] = {name: tensor.tolist() for name, tensor in _arrays_of(model)}
    return json.dumps(document, sort_keys=True, indent=1)


def model_from_json(text: str) -> Model:
    try:
        document = json.loads(text)
        arrays = {entry['name']: torch.tensor(document['values'][entry['name']], dtype=torch.float64).reshape(entry['shape'])
                  for entry in document['arrays']}
    except (json.JSONDecodeError, KeyError, TypeError, RuntimeError) as e:
        raise ModelFormatError(f'Invalid JSON model export: {e!r}')
    return _model_from(document, arrays)


def export_json(model: Model, path: str) -> None:
    put(path, model_to_json(model))
