import dataclasses
import math
import os
import torch
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

from .core.cascade import TrainingSample
from .core.features import GrayImage
from .core.geometry import AnnotationSchema, BBox, CorrespondenceMap, Shape, bbox_from_shape
from .core.pipeline import DatasetSplits
from .errors import ConfigInvalid
from .utils import hash_to_hex

# Dense landmark set of the generator, in canonical face units (x right, y down, face half-width 1)
DENSE_NAMES = (
    'left_eye_center', 'right_eye_center',
    'left_eye_outer', 'left_eye_inner', 'left_eye_top', 'left_eye_bottom',
    'right_eye_inner', 'right_eye_outer', 'right_eye_top', 'right_eye_bottom',
    'left_brow_outer', 'left_brow_mid', 'left_brow_inner',
    'right_brow_inner', 'right_brow_mid', 'right_brow_outer',
    'nose_bridge', 'nose_tip', 'left_nostril', 'right_nostril', 'subnasal',
    'mouth_left', 'mouth_right', 'upper_lip_center', 'lower_lip_center',
    'upper_lip_left', 'upper_lip_right', 'lower_lip_left', 'lower_lip_right',
    *(f'contour_{k}' for k in range(11)),
)
NUM_DENSE = len(DENSE_NAMES)
EYE_CENTERS = (0, 1)
NUM_DEFORMATIONS = 9

SCHEMA_A_INDICES = (0, 1, 2, 3, 6, 7, 10, 11, 12, 13, 14, 15, 17, 21, 22, 23, 24, 34)
SCHEMA_B_INDICES = (0, 1, 4, 5, 8, 9, 16, 17, 18, 19, 20, *range(21, 29), *range(29, 39))


@dataclass(frozen=True)
class SynthConfig:
    n_dense: int = NUM_DENSE
    schema_a_indices: Tuple[int, ...] = SCHEMA_A_INDICES
    schema_b_indices: Tuple[int, ...] = SCHEMA_B_INDICES
    train_size: int = 200
    test_size: int = 50
    image_px: int = 200
    face_scale_px: float = 46.0
    scale_std: float = 0.06
    tilt_std: float = 0.08
    aspect_std: float = 0.05
    shape_std: float = 0.06
    center_jitter_px: float = 4.0
    bbox_jitter: float = 0.04
    texture_seed: int = 0
    distribution_skew: Tuple[float, float] = (-0.12, 0.12)

    def __post_init__(self) -> None:
        object.__setattr__(self, 'schema_a_indices', tuple(int(i) for i in self.schema_a_indices))
        object.__setattr__(self, 'schema_b_indices', tuple(int(i) for i in self.schema_b_indices))
        object.__setattr__(self, 'distribution_skew', tuple(float(s) for s in self.distribution_skew))
        if self.n_dense != NUM_DENSE:
            raise ConfigInvalid(f'The generator defines {NUM_DENSE} dense landmarks, got n_dense={self.n_dense}')
        for name, indices in (('schema_a_indices', self.schema_a_indices), ('schema_b_indices', self.schema_b_indices)):
            if len(set(indices)) != len(indices) or not all(0 <= i < self.n_dense for i in indices):
                raise ConfigInvalid(f'`{name}` must hold distinct dense indices in [0, {self.n_dense})')
            if not all(i in indices for i in EYE_CENTERS):
                raise ConfigInvalid(f'`{name}` must contain both eye centers {EYE_CENTERS}')
        if len(set(self.schema_a_indices) & set(self.schema_b_indices)) < 2:
            raise ConfigInvalid('Schemas A and B must share at least 2 landmarks')
        if self.train_size < 0 or self.test_size < 0:
            raise ConfigInvalid('Corpus sizes must be non-negative')
        if len(self.distribution_skew) != 2:
            raise ConfigInvalid('`distribution_skew` holds one tilt offset per dataset')
        if self.face_scale_px <= 0 or self.image_px < 4 * self.face_scale_px * 0.8:
            raise ConfigInvalid(f'Faces of {self.face_scale_px} px/unit do not fit {self.image_px} px images')
        if min(self.scale_std, self.tilt_std, self.aspect_std, self.shape_std, self.center_jitter_px,
               self.bbox_jitter) < 0:
            raise ConfigInvalid('Variation amplitudes must be non-negative')

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> 'SynthConfig':
        unknown = set(d) - {f.name for f in dataclasses.fields(SynthConfig)}
        if unknown:
            raise ConfigInvalid(f'Unknown synth options {sorted(unknown)}')
        return SynthConfig(**d)


@dataclass(frozen=True)
class FaceParams:
    """
    Geometry and appearance of one synthetic face.
    `deform` holds relative part variations (eye spacing, eye size, brow raise, nose length, mouth width,
    mouth height, mouth opening, face width, face height).
    """
    deform: Tuple[float, ...] = (0.0,) * NUM_DEFORMATIONS
    tilt: float = 0.0
    aspect: float = 0.0
    scale_px: float = 50.0
    center: Tuple[float, float] = (100.0, 100.0)
    texture_seed: int = 0
    image_px: int = 200

    def __post_init__(self) -> None:
        assert len(self.deform) == NUM_DEFORMATIONS, f'Expected {NUM_DEFORMATIONS} deformations'
        assert self.scale_px > 0 and self.image_px > 0

    def replace(self, **changes) -> 'FaceParams':
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class SynthFace:
    dense: Shape
    image: GrayImage
    params: FaceParams


def dense_schema() -> AnnotationSchema:
    return AnnotationSchema('dense40', DENSE_NAMES, EYE_CENTERS)


def subset_schema(name: str, indices: Sequence[int]) -> AnnotationSchema:
    indices = sorted(indices)
    return AnnotationSchema(name, tuple(DENSE_NAMES[i] for i in indices),
                            (indices.index(EYE_CENTERS[0]), indices.index(EYE_CENTERS[1])))


def canonical_params(image_px: int = 200, scale_px: float = 50.0) -> FaceParams:
    return FaceParams(scale_px=scale_px, center=(image_px / 2, image_px / 2), image_px=image_px)


def _parts(deform: Sequence[float]) -> Dict[str, float]:
    eye_spacing, eye_size, brow_raise, nose_length, mouth_width, mouth_height, mouth_open, face_w, face_h = deform
    return {
        'eye_x': 0.4 * (1 + eye_spacing), 'eye_y': -0.25,
        'eye_w': 0.18 * (1 + eye_size), 'eye_h': 0.08 * (1 + eye_size),
        'brow_y': -0.5 - 0.5 * brow_raise,
        'nose_tip_y': 0.12 * (1 + 2 * nose_length),
        'mouth_w': 0.3 * (1 + mouth_width), 'mouth_y': 0.55 * (1 + mouth_height),
        'lip_up': 0.08, 'lip_low': 0.11 * (1 + 2 * mouth_open),
        'face_w': 1 + face_w, 'face_h': 1.3 * (1 + face_h),
    }


def canonical_landmarks(deform: Sequence[float]) -> torch.Tensor:
    """
    Dense landmarks in canonical face units, `[2, 40]`.
    """
    p = _parts(deform)
    ex, ey, ew, eh = p['eye_x'], p['eye_y'], p['eye_w'], p['eye_h']
    by, ny = p['brow_y'], p['nose_tip_y']
    mw, my, up, low = p['mouth_w'], p['mouth_y'], p['lip_up'], p['lip_low']
    half = math.sqrt(0.75)
    points = [
        (-ex, ey), (ex, ey),
        (-ex - ew, ey), (-ex + ew, ey), (-ex, ey - eh), (-ex, ey + eh),
        (ex - ew, ey), (ex + ew, ey), (ex, ey - eh), (ex, ey + eh),
        (-ex - 0.22, by), (-ex, by - 0.06), (-ex + 0.22, by),
        (ex - 0.22, by), (ex, by - 0.06), (ex + 0.22, by),
        (0.0, ey + 0.05), (0.0, ny), (-0.12, ny + 0.08), (0.12, ny + 0.08), (0.0, ny + 0.1),
        (-mw, my), (mw, my), (0.0, my - up), (0.0, my + low),
        (-mw / 2, my - up * half), (mw / 2, my - up * half), (-mw / 2, my + low * half), (mw / 2, my + low * half),
    ]
    for k in range(11):
        t = math.pi * k / 10
        points.append((p['face_w'] * math.cos(t), p['face_h'] * math.sin(t)))
    return torch.tensor(points, dtype=torch.float64).t().contiguous()


def _global_linear(params: FaceParams) -> torch.Tensor:
    c, s = math.cos(params.tilt), math.sin(params.tilt)
    rotation = torch.tensor([[c, -s], [s, c]], dtype=torch.float64)
    return rotation @ torch.diag(torch.tensor([params.scale_px * (1 + params.aspect), params.scale_px],
                                              dtype=torch.float64))


def face_landmarks(params: FaceParams) -> torch.Tensor:
    """
    Dense landmarks of the face in image pixels, `[2, 40]`.
    """
    center = torch.tensor(params.center, dtype=torch.float64).unsqueeze(-1)
    return _global_linear(params) @ canonical_landmarks(params.deform) + center


def _waves(generator: torch.Generator, count: int, low: float, high: float) -> torch.Tensor:
    # Rows of (frequency x, frequency y, phase)
    angle = torch.rand(count, generator=generator, dtype=torch.float64) * 2 * math.pi
    freq = low + (high - low) * torch.rand(count, generator=generator, dtype=torch.float64)
    phase = torch.rand(count, generator=generator, dtype=torch.float64) * 2 * math.pi
    return torch.stack([freq * torch.cos(angle), freq * torch.sin(angle), phase], dim=1)


def _texture(x: torch.Tensor, y: torch.Tensor, waves: torch.Tensor) -> torch.Tensor:
    out = torch.zeros_like(x)
    for fx, fy, phase in waves.tolist():
        out += torch.sin(2 * math.pi * (fx * x + fy * y) + phase)
    return out / max(waves.shape[0], 1)


def _ellipse_distance(x, y, cx, cy, ax, ay):
    r = torch.sqrt(((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2)
    return (r - 1) * min(ax, ay)


def _segment_distance(x, y, a, b, thickness):
    (ax, ay), (bx, by) = a, b
    dx, dy = bx - ax, by - ay
    t = (((x - ax) * dx + (y - ay) * dy) / max(dx * dx + dy * dy, 1e-12)).clamp(0, 1)
    return torch.hypot(x - ax - t * dx, y - ay - t * dy) - thickness / 2


def render_face(params: FaceParams) -> GrayImage:
    """
    Rasterize the face: textured background, shaded face ellipse, eyes with irises, brows, nose and lips.
    Every part is composited with anti-aliased coverage; intensities are quantized to 8 bits.
    """
    appearance = torch.Generator().manual_seed(params.texture_seed)
    u_rand = lambda low, high: low + (high - low) * torch.rand(1, generator=appearance, dtype=torch.float64).item()
    background, skin = u_rand(0.12, 0.32), u_rand(0.55, 0.72)
    background_waves, skin_waves = _waves(appearance, 3, 0.01, 0.04), _waves(appearance, 3, 1.5, 4.0)

    n = params.image_px
    grid = torch.arange(n, dtype=torch.float64)
    v, u = torch.meshgrid(grid, grid, indexing='ij')
    inverse = torch.linalg.inv(_global_linear(params))
    qu, qv = u - params.center[0], v - params.center[1]
    x = inverse[0, 0] * qu + inverse[0, 1] * qv
    y = inverse[1, 0] * qu + inverse[1, 1] * qv
    px = params.scale_px

    def paint(image, distance, value):
        alpha = (0.5 - distance * px).clamp(0, 1)
        return image * (1 - alpha) + value * alpha

    image = background + 0.08 * _texture(u, v, background_waves)
    p = _parts(params.deform)
    marks = canonical_landmarks(params.deform).t().tolist()
    face = skin - 0.08 * y / p['face_h'] + 0.03 * _texture(x, y, skin_waves)
    image = paint(image, _ellipse_distance(x, y, 0.0, 0.0, p['face_w'], p['face_h']), face)

    for side in (-1, 1):
        eye = (side * p['eye_x'], p['eye_y'])
        image = paint(image, _ellipse_distance(x, y, *eye, p['eye_w'], p['eye_h']), 0.88)
        image = paint(image, _ellipse_distance(x, y, *eye, 0.055, 0.055), 0.12)
    for brow in ((10, 11, 12), (13, 14, 15)):
        for a, b in zip(brow[:-1], brow[1:]):
            image = paint(image, _segment_distance(x, y, marks[a], marks[b], 0.06), 0.18)

    image = paint(image, _segment_distance(x, y, marks[16], marks[17], 0.04), skin - 0.14)
    image = paint(image, _ellipse_distance(x, y, *marks[17], 0.07, 0.06), skin - 0.09)
    for a, b in ((18, 20), (20, 19)):
        image = paint(image, _segment_distance(x, y, marks[a], marks[b], 0.025), skin - 0.2)
    for nostril in (18, 19):
        image = paint(image, _ellipse_distance(x, y, *marks[nostril], 0.035, 0.03), 0.15)

    mouth_y = p['mouth_y']
    lips_up = _ellipse_distance(x, y, 0.0, mouth_y, p['mouth_w'], p['lip_up'])
    lips_low = _ellipse_distance(x, y, 0.0, mouth_y, p['mouth_w'], p['lip_low'])
    image = paint(image, torch.where(y < mouth_y, lips_up, lips_low), 0.36)
    image = paint(image, _segment_distance(x, y, marks[21], marks[22], 0.02), 0.1)

    return GrayImage(torch.round(image.clamp(0, 1) * 255) / 255.0)


def render_synth_face(params: FaceParams) -> SynthFace:
    return SynthFace(Shape(face_landmarks(params), dense_schema()), render_face(params), params)


def gradient_energy(image: GrayImage, point: Sequence[float], patch_px: int = 20) -> float:
    """
    Sum of squared central-difference gradients over the `patch_px` window around `point`.
    """
    h, w = image.height, image.width
    cx, cy = int(round(float(point[0]))), int(round(float(point[1])))
    half = patch_px // 2
    x0, x1 = max(cx - half, 1), min(cx + half, w - 1)
    y0, y1 = max(cy - half, 1), min(cy + half, h - 1)
    if x0 >= x1 or y0 >= y1:
        return 0.0
    pixels = image.pixels
    gx = (pixels[y0:y1, x0 + 1:x1 + 1] - pixels[y0:y1, x0 - 1:x1 - 1]) / 2
    gy = (pixels[y0 + 1:y1 + 1, x0:x1] - pixels[y0 - 1:y1 - 1, x0:x1]) / 2
    return (gx ** 2 + gy ** 2).sum().item()


def face_seed(seed: int, dataset: str, split: str, index: int) -> int:
    return int(hash_to_hex(f'{seed}/{dataset}/{split}/{index}'), 16)


def sample_params(config: SynthConfig, seed: int, skew: float) -> Tuple[FaceParams, torch.Tensor]:
    """
    Draw the parameters of one face from its seed.

    Returns:
        The parameters and the 3 standard-normal draws used to jitter the face box.
    """
    generator = torch.Generator().manual_seed(seed)
    normal = lambda *size: torch.randn(size, generator=generator, dtype=torch.float64)
    deform = (normal(NUM_DEFORMATIONS) * config.shape_std).clamp(-3 * config.shape_std, 3 * config.shape_std)
    tilt = skew + config.tilt_std * normal(1).clamp(-3, 3).item()
    aspect = config.aspect_std * normal(1).clamp(-3, 3).item()
    scale = config.face_scale_px * math.exp(config.scale_std * normal(1).clamp(-2, 2).item())
    jitter = normal(2).clamp(-3, 3) * config.center_jitter_px
    box_noise = normal(3).clamp(-3, 3)
    texture_seed = int(hash_to_hex(f'{config.texture_seed}/{seed}'), 16)
    center = (config.image_px / 2 + jitter[0].item(), config.image_px / 2 + jitter[1].item())
    params = FaceParams(tuple(deform.tolist()), tilt, aspect, scale, center, texture_seed, config.image_px)
    return params, box_noise


def jittered_bbox(dense: torch.Tensor, noise: torch.Tensor, jitter: float) -> BBox:
    box = bbox_from_shape(dense, margin=0.2)
    size = max(box.w, box.h) * (1 + 0.5 * jitter * noise[2].item())
    cx = box.center[0] + jitter * box.w * noise[0].item()
    cy = box.center[1] + jitter * box.h * noise[1].item()
    return BBox(cx - size / 2, cy - size / 2, size, size)


@dataclass(frozen=True, eq=False)
class SynthCorpus:
    """
    Two datasets of distinct faces annotated under different protocols. Every sample carries its
    other-protocol view and its dense truth in `extra`; `dense` maps sample names to the dense truth.
    """
    a: DatasetSplits
    b: DatasetSplits
    dense_schema: AnnotationSchema
    correspondence: CorrespondenceMap
    dense: Dict[str, Shape] = field(default_factory=dict)
    params: Dict[str, FaceParams] = field(default_factory=dict)


def generate_corpus(config: SynthConfig, seed: int) -> SynthCorpus:
    """
    Generate the paired corpus. Faces of dataset A and B use disjoint seeds; dataset `i` draws its tilts
    around `distribution_skew[i]`.
    """
    dense = dense_schema()
    schema_a = subset_schema('synth_a', config.schema_a_indices)
    schema_b = subset_schema('synth_b', config.schema_b_indices)
    indices = {schema_a.name: sorted(config.schema_a_indices), schema_b.name: sorted(config.schema_b_indices)}
    truths, all_params = {}, {}

    def make_split(dataset: str, own: AnnotationSchema, other: AnnotationSchema, skew: float,
                   split: str, size: int) -> List[TrainingSample]:
        samples = []
        for i in range(size):
            name = f'{dataset}_{split}_{i:04d}'
            params, box_noise = sample_params(config, face_seed(seed, dataset, split, i), skew)
            face = render_synth_face(params)
            coords = face.dense.coords
            views = {s.name: Shape(coords[:, indices[s.name]], s) for s in (own, other)}
            extra = {other.name: views[other.name], dense.name: face.dense}
            bbox = jittered_bbox(coords, box_noise, config.bbox_jitter)
            samples.append(TrainingSample(face.image, views[own.name], bbox, name, extra))
            truths[name], all_params[name] = face.dense, params
        return samples

    splits = []
    for dataset, own, other, skew in (('a', schema_a, schema_b, config.distribution_skew[0]),
                                      ('b', schema_b, schema_a, config.distribution_skew[1])):
        train = make_split(dataset, own, other, skew, 'train', config.train_size)
        test = make_split(dataset, own, other, skew, 'test', config.test_size)
        splits.append(DatasetSplits(f'synth_{dataset}', own, train, test))
    correspondence = CorrespondenceMap.by_names(schema_a, schema_b)
    return SynthCorpus(splits[0], splits[1], dense, correspondence, truths, all_params)


def write_corpus(corpus: SynthCorpus, out_dir: str) -> Dict[str, str]:
    """
    Write the corpus as schemas, a correspondence, PNG images, pts annotations and one manifest per split.

    Returns:
        Paths of the written schema, correspondence and manifest files, keyed by role
        (`schema_<name>`, `correspondence`, `<dataset>_<split>`).
    """
    from .io.dataset import ManifestEntry, write_correspondence, write_manifest, write_schema
    from .io.image import save_png
    from .io.pts import write_pts

    paths = {}
    schemas = {s.name: s for s in (corpus.a.schema, corpus.b.schema, corpus.dense_schema)}
    for name, schema in schemas.items():
        paths[f'schema_{name}'] = os.path.join(out_dir, f'schema_{name}.toml')
        write_schema(paths[f'schema_{name}'], schema)
    paths['correspondence'] = os.path.join(out_dir, f'{corpus.a.name}_to_{corpus.b.name}.toml')
    write_correspondence(paths['correspondence'], corpus.correspondence,
                         paths[f'schema_{corpus.a.schema.name}'], paths[f'schema_{corpus.b.schema.name}'])

    for dataset in (corpus.a, corpus.b):
        extra_names = [s for s in schemas if s != dataset.schema.name]
        for split, samples in (('train', dataset.train), ('test', dataset.test)):
            entries = []
            for sample in samples:
                image_path = os.path.join(out_dir, 'images', f'{sample.name}.png')
                save_png(image_path, sample.load_image())
                annotation = os.path.join(out_dir, dataset.schema.name, f'{sample.name}.pts')
                write_pts(annotation, sample.truth.points().tolist())
                extra = {}
                for schema_name in extra_names:
                    extra[schema_name] = os.path.join(out_dir, schema_name, f'{sample.name}.pts')
                    write_pts(extra[schema_name], sample.extra[schema_name].points().tolist())
                entries.append(ManifestEntry(image_path, annotation, sample.bbox.as_tuple(), extra))
            key = f'{dataset.name}_{split}'
            paths[key] = os.path.join(out_dir, f'{key}.toml')
            write_manifest(paths[key], dataset.name, paths[f'schema_{dataset.schema.name}'], split, entries,
                           {s: paths[f'schema_{s}'] for s in extra_names})
    return paths
