import functools
import math
import os
import pandas as pd
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

from .config import load_toml, write_toml
from .image import load_image
from .pts import load_pts
from ..core.cascade import TrainingSample
from ..core.geometry import AnnotationSchema, BBox, CorrespondenceMap, Shape
from ..core.pipeline import DatasetSplits
from ..errors import (ConfigInvalid, DegenerateBBox, DegenerateFace, InvalidSchema, MissingFile,
                      ParseError, SchemaMismatch)
from ..utils import put

ENTRY_COLUMNS = ('image', 'annotation', 'bbox_x', 'bbox_y', 'bbox_w', 'bbox_h')
SPLITS = ('train', 'test')


def sample_name(image_path: str) -> str:
    return os.path.splitext(os.path.basename(image_path))[0]


def _relative(base: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(os.path.dirname(base), path))


def _require(data: dict, key: str, path: str):
    if key not in data:
        raise ConfigInvalid(f'{path}: missing `{key}`')
    return data[key]


@functools.lru_cache(maxsize=None)
def _load_schema_cached(path: str) -> AnnotationSchema:
    data = load_toml(path)
    unknown = set(data) - {'name', 'landmarks', 'interocular'}
    if unknown:
        raise ConfigInvalid(f'{path}: unknown schema keys {sorted(unknown)}')
    return AnnotationSchema(str(_require(data, 'name', path)), tuple(_require(data, 'landmarks', path)),
                            tuple(_require(data, 'interocular', path)))


def load_schema(path: str) -> AnnotationSchema:
    return _load_schema_cached(os.path.abspath(path))


def write_schema(path: str, schema: AnnotationSchema) -> None:
    write_toml(path, {'name': schema.name, 'landmarks': list(schema.landmark_names),
                      'interocular': list(schema.interocular_pair)})


def load_correspondence(path: str) -> CorrespondenceMap:
    data = load_toml(path)
    unknown = set(data) - {'source', 'target', 'pairs'}
    if unknown:
        raise ConfigInvalid(f'{path}: unknown correspondence keys {sorted(unknown)}')
    source = load_schema(_relative(path, _require(data, 'source', path)))
    target = load_schema(_relative(path, _require(data, 'target', path)))
    pairs = _require(data, 'pairs', path)
    if not all(isinstance(p, list) and len(p) == 2 for p in pairs):
        raise InvalidSchema(f'{path}: `pairs` must be a list of [source, target] index pairs')
    return CorrespondenceMap(source, target, tuple((p[0], p[1]) for p in pairs))


def write_correspondence(path: str, correspondence: CorrespondenceMap, source_path: str, target_path: str) -> None:
    base = os.path.dirname(os.path.abspath(path))
    write_toml(path, {'source': os.path.relpath(os.path.abspath(source_path), base),
                      'target': os.path.relpath(os.path.abspath(target_path), base),
                      'pairs': [list(p) for p in correspondence.pairs]})


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    annotation: str
    bbox: Tuple[float, float, float, float]
    extra: Dict[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetManifest:
    """
    A dataset split on disk: schema, and one entry per face (image, pts annotation, face box).
    Paths are resolved against the manifest's directory.
    """
    name: str
    schema: AnnotationSchema
    split: str
    entries: Tuple[ManifestEntry, ...]
    extra_schemas: Tuple[AnnotationSchema, ...] = ()


def load_manifest(path: str) -> DatasetManifest:
    data = load_toml(path)
    unknown = set(data) - {'name', 'schema', 'split', 'entries', 'extra_schemas'}
    if unknown:
        raise ConfigInvalid(f'{path}: unknown manifest keys {sorted(unknown)}')
    split = _require(data, 'split', path)
    if split not in SPLITS:
        raise ConfigInvalid(f'{path}: split must be one of {SPLITS}, got {split!r}')
    schema = load_schema(_relative(path, _require(data, 'schema', path)))
    extra_schemas = tuple(load_schema(_relative(path, p)) for p in data.get('extra_schemas', []))
    entries_path = _relative(path, _require(data, 'entries', path))
    if not os.path.isfile(entries_path):
        raise MissingFile(f'Entries file {entries_path} does not exist')

    table = pd.read_csv(entries_path, dtype={'image': str, 'annotation': str}, float_precision='round_trip',
                        keep_default_na=False)
    missing = [c for c in ENTRY_COLUMNS if c not in table.columns]
    if missing:
        raise ParseError(entries_path, 1, f'Missing columns {missing}')
    extra_columns = {s.name: f'annotation:{s.name}' for s in extra_schemas}
    for name, column in extra_columns.items():
        if column not in table.columns:
            raise ParseError(entries_path, 1, f'Missing column {column!r} for extra schema {name!r}')

    entries, rows_by_name = [], {}
    for row_number, row in enumerate(table.to_dict('records'), start=2):
        try:
            bbox = tuple(float(row[c]) for c in ENTRY_COLUMNS[2:])
        except (TypeError, ValueError):
            raise ParseError(entries_path, row_number, 'Invalid bounding box values')
        if not all(math.isfinite(v) for v in bbox):
            raise ParseError(entries_path, row_number, 'Non-finite bounding box values')
        image, annotation = _relative(path, row['image']), _relative(path, row['annotation'])
        # Samples, predictions and pseudo-labels are keyed by the image file name
        stem = sample_name(image)
        if stem in rows_by_name:
            raise ParseError(entries_path, row_number,
                             f'Image {image} has the same name {stem!r} as row {rows_by_name[stem]}')
        rows_by_name[stem] = row_number
        extra = {name: _relative(path, row[column]) for name, column in extra_columns.items() if row[column]}
        for file in (image, annotation, *extra.values()):
            if not os.path.isfile(file):
                raise MissingFile(f'{entries_path}:{row_number}: referenced file {file} does not exist')
        entries.append(ManifestEntry(image, annotation, bbox, extra))
    return DatasetManifest(str(_require(data, 'name', path)), schema, split, tuple(entries), extra_schemas)


def write_manifest(path: str, name: str, schema_path: str, split: str, entries: Sequence[ManifestEntry],
                   extra_schema_paths: Optional[Dict[str, str]] = None) -> None:
    """
    Write a manifest TOML and its entries CSV (`<manifest stem>.csv`) with paths relative to the manifest.
    """
    assert split in SPLITS, f'Invalid split {split}'
    base = os.path.dirname(os.path.abspath(path))
    extra_schema_paths = extra_schema_paths or {}
    relative = lambda p: os.path.relpath(os.path.abspath(p), base)

    rows = []
    for entry in entries:
        row = {'image': relative(entry.image), 'annotation': relative(entry.annotation)}
        row.update(zip(ENTRY_COLUMNS[2:], (float(v) for v in entry.bbox)))
        for schema_name in extra_schema_paths:
            row[f'annotation:{schema_name}'] = relative(entry.extra[schema_name]) if schema_name in entry.extra else ''
        rows.append(row)
    columns = list(ENTRY_COLUMNS) + [f'annotation:{s}' for s in extra_schema_paths]
    csv_path = os.path.splitext(path)[0] + '.csv'
    put(csv_path, pd.DataFrame(rows, columns=columns).to_csv(index=False, lineterminator='\n'))

    manifest = {'name': name, 'schema': relative(schema_path), 'split': split, 'entries': relative(csv_path)}
    if extra_schema_paths:
        manifest['extra_schemas'] = [relative(p) for p in extra_schema_paths.values()]
    write_toml(path, manifest)


@dataclass(frozen=True, eq=False)
class Dataset:
    name: str
    schema: AnnotationSchema
    split: str
    samples: Tuple[TrainingSample, ...]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.samples)


def _load_shape(path: str, schema: AnnotationSchema) -> Shape:
    return Shape.from_points(load_pts(path), schema)


def load_dataset(manifest_path: str, lazy: bool = True) -> Dataset:
    """
    Load every manifest entry as a training sample.
    Entries whose annotation does not fit the schema, or whose box is degenerate, are skipped with a warning.

    Arguments:
        manifest_path: the manifest TOML.
        lazy: decode images on first use instead of now.

    Returns:
        The dataset, with the number of skipped entries.
    """
    manifest = load_manifest(manifest_path)
    extra_schemas = {s.name: s for s in manifest.extra_schemas}
    samples, skipped = [], 0
    for entry in manifest.entries:
        try:
            truth = _load_shape(entry.annotation, manifest.schema)
            extra = {name: _load_shape(file, extra_schemas[name]) for name, file in entry.extra.items()}
            bbox = BBox(*entry.bbox)
        except (SchemaMismatch, DegenerateBBox, DegenerateFace) as e:
            warnings.warn(f'Skipping entry {entry.image}: {e}')
            skipped += 1
            continue
        image = functools.partial(load_image, entry.image) if lazy else load_image(entry.image)
        samples.append(TrainingSample(image, truth, bbox, sample_name(entry.image), extra))
    if skipped:
        warnings.warn(f'{skipped} of {len(manifest.entries)} entries of {manifest.name!r} were skipped')
    if os.getenv('TCR_DEBUG', None):
        print(f'Loaded {len(samples)} samples from {manifest_path} ({skipped} skipped)')
    return Dataset(manifest.name, manifest.schema, manifest.split, tuple(samples), skipped)


def load_splits(train_manifest: str, test_manifest: str, lazy: bool = True) -> DatasetSplits:
    train, test = load_dataset(train_manifest, lazy), load_dataset(test_manifest, lazy)
    if train.schema != test.schema:
        raise SchemaMismatch(f'Train and test manifests of {train.name!r} use different schemas')
    return DatasetSplits(train.name, train.schema, train.samples, test.samples)
