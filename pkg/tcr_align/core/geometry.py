import math
import torch
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Tuple

from ..errors import (DegenerateBBox, DegenerateConfiguration, DegenerateFace,
                      EmptyInput, InvalidSchema, SchemaMismatch)

# Side of the square reference frame faces are normalized into
FRAME_PX = 250


@dataclass(frozen=True)
class AnnotationSchema:
    """
    A named, ordered landmark protocol. The interocular pair designates the two landmarks whose
    distance normalizes every error reported for shapes of this schema.
    """
    name: str
    landmark_names: Tuple[str, ...]
    interocular_pair: Tuple[int, int]

    def __post_init__(self) -> None:
        object.__setattr__(self, 'landmark_names', tuple(self.landmark_names))
        object.__setattr__(self, 'interocular_pair', tuple(int(i) for i in self.interocular_pair))
        if len(self.landmark_names) == 0:
            raise InvalidSchema(f'Schema {self.name!r} has no landmarks')
        if len(set(self.landmark_names)) != len(self.landmark_names):
            raise InvalidSchema(f'Schema {self.name!r} has duplicated landmark names')
        if len(self.interocular_pair) != 2:
            raise InvalidSchema(f'Schema {self.name!r} interocular pair must have two indices')
        i, j = self.interocular_pair
        n = len(self.landmark_names)
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise InvalidSchema(f'Schema {self.name!r} has invalid interocular pair {self.interocular_pair}')

    @property
    def num_landmarks(self) -> int:
        return len(self.landmark_names)

    def index_of(self, landmark_name: str) -> int:
        return self.landmark_names.index(landmark_name)


@dataclass(frozen=True, eq=False)
class Shape:
    """
    Landmark coordinates of one face under one schema, stored as a `[2, n]` float64 tensor
    (row 0 holds x, row 1 holds y, in pixels).
    """
    coords: torch.Tensor
    schema: AnnotationSchema

    def __post_init__(self) -> None:
        coords = torch.as_tensor(self.coords, dtype=torch.float64).detach().clone()
        if coords.dim() != 2 or coords.shape[0] != 2:
            raise SchemaMismatch(f'Shape coordinates must be [2, n], got {tuple(coords.shape)}')
        if coords.shape[1] != self.schema.num_landmarks:
            raise SchemaMismatch(f'Shape has {coords.shape[1]} landmarks, '
                                 f'schema {self.schema.name!r} expects {self.schema.num_landmarks}')
        if not bool(torch.isfinite(coords).all()):
            raise DegenerateFace(f'Shape under schema {self.schema.name!r} has non-finite coordinates')
        object.__setattr__(self, 'coords', coords)

    @staticmethod
    def from_points(points: Sequence[Sequence[float]], schema: AnnotationSchema) -> 'Shape':
        return Shape(torch.as_tensor(points, dtype=torch.float64).reshape(-1, 2).t(), schema)

    @staticmethod
    def from_flat(flat: torch.Tensor, schema: AnnotationSchema) -> 'Shape':
        return Shape(flat.reshape(2, -1), schema)

    @property
    def num_landmarks(self) -> int:
        return self.coords.shape[1]

    def points(self) -> torch.Tensor:
        return self.coords.t().clone()

    def flatten(self) -> torch.Tensor:
        # Layout is `[x_1, ..., x_n, y_1, ..., y_n]`
        return self.coords.reshape(-1).clone()

    def select(self, indices: Sequence[int]) -> torch.Tensor:
        return self.coords[:, list(indices)].clone()

    def transformed(self, transform: 'SimilarityTransform') -> 'Shape':
        return Shape(transform.apply(self.coords), self.schema)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Shape):
            return NotImplemented
        return self.schema == other.schema and torch.equal(self.coords, other.coords)

    def __hash__(self) -> int:
        return hash((self.schema, tuple(self.coords.reshape(-1).tolist())))


@dataclass(frozen=True)
class CorrespondenceMap:
    """
    Index pairing of the common landmarks between a source and a target schema.
    """
    source_schema: AnnotationSchema
    target_schema: AnnotationSchema
    pairs: Tuple[Tuple[int, int], ...]

    def __post_init__(self) -> None:
        pairs = tuple((int(s), int(t)) for s, t in self.pairs)
        object.__setattr__(self, 'pairs', pairs)
        if len(pairs) < 2:
            raise InvalidSchema(f'A correspondence needs at least 2 common landmarks, got {len(pairs)}')
        n_s, n_t = self.source_schema.num_landmarks, self.target_schema.num_landmarks
        for s, t in pairs:
            if not (0 <= s < n_s and 0 <= t < n_t):
                raise InvalidSchema(f'Correspondence pair {(s, t)} out of range for schemas '
                                    f'{self.source_schema.name!r} / {self.target_schema.name!r}')
        if len(set(self.source_indices)) != len(pairs) or len(set(self.target_indices)) != len(pairs):
            raise InvalidSchema('Correspondence repeats a landmark index')
        if not all(i in self.source_indices for i in self.source_schema.interocular_pair):
            raise InvalidSchema(f'The interocular pair of {self.source_schema.name!r} '
                                f'must be among the common landmarks')

    @staticmethod
    def by_names(source_schema: AnnotationSchema, target_schema: AnnotationSchema) -> 'CorrespondenceMap':
        target_index = {name: i for i, name in enumerate(target_schema.landmark_names)}
        pairs = tuple((i, target_index[name]) for i, name in enumerate(source_schema.landmark_names)
                      if name in target_index)
        return CorrespondenceMap(source_schema, target_schema, pairs)

    @property
    def source_indices(self) -> Tuple[int, ...]:
        return tuple(s for s, _ in self.pairs)

    @property
    def target_indices(self) -> Tuple[int, ...]:
        return tuple(t for _, t in self.pairs)

    @property
    def private_source_indices(self) -> Tuple[int, ...]:
        common = set(self.source_indices)
        return tuple(i for i in range(self.source_schema.num_landmarks) if i not in common)

    def reversed(self) -> 'CorrespondenceMap':
        return CorrespondenceMap(self.target_schema, self.source_schema, tuple((t, s) for s, t in self.pairs))

    def target_interocular_pair(self) -> Tuple[int, int]:
        """
        The source schema's interocular landmarks, expressed as target-schema indices.
        """
        mapping = dict(self.pairs)
        i, j = self.source_schema.interocular_pair
        return mapping[i], mapping[j]

    def common_schema(self) -> AnnotationSchema:
        """
        The schema made of the common landmarks only, in pair order, named after the source landmarks.
        """
        names = tuple(self.source_schema.landmark_names[s] for s in self.source_indices)
        position = {s: k for k, s in enumerate(self.source_indices)}
        i, j = self.source_schema.interocular_pair
        return AnnotationSchema(f'{self.source_schema.name}^{self.target_schema.name}', names,
                                (position[i], position[j]))


@dataclass(frozen=True)
class SimilarityTransform:
    """
    `p -> scale * R(rotation) * p + translation`, acting on `[2, n]` coordinate tensors.
    """
    scale: float = 1.0
    rotation: float = 0.0
    translation: Tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, 'scale', float(self.scale))
        object.__setattr__(self, 'rotation', float(self.rotation))
        object.__setattr__(self, 'translation', (float(self.translation[0]), float(self.translation[1])))
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise DegenerateConfiguration(f'Similarity scale must be positive, got {self.scale}')

    def linear(self) -> torch.Tensor:
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return self.scale * torch.tensor([[c, -s], [s, c]], dtype=torch.float64)

    def matrix(self) -> torch.Tensor:
        m = torch.zeros((2, 3), dtype=torch.float64)
        m[:, :2] = self.linear()
        m[:, 2] = torch.tensor(self.translation, dtype=torch.float64)
        return m

    def apply(self, coords: torch.Tensor) -> torch.Tensor:
        coords = torch.as_tensor(coords, dtype=torch.float64)
        assert coords.shape[-2] == 2, f'Expected [..., 2, n] coordinates, got {tuple(coords.shape)}'
        return self.linear() @ coords + torch.tensor(self.translation, dtype=torch.float64).unsqueeze(-1)

    def inverse(self) -> 'SimilarityTransform':
        inv = SimilarityTransform(1.0 / self.scale, -self.rotation)
        t = -(inv.linear() @ torch.tensor(self.translation, dtype=torch.float64))
        return SimilarityTransform(inv.scale, inv.rotation, (t[0].item(), t[1].item()))

    def compose(self, inner: 'SimilarityTransform') -> 'SimilarityTransform':
        # `self.compose(inner)(p) == self(inner(p))`
        t = self.linear() @ torch.tensor(inner.translation, dtype=torch.float64) + \
            torch.tensor(self.translation, dtype=torch.float64)
        return SimilarityTransform(self.scale * inner.scale, self.rotation + inner.rotation, (t[0].item(), t[1].item()))


@dataclass(frozen=True)
class BBox:
    """
    Face bounding box `(x, y, w, h)` in pixels.
    """
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        values = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(float(v)) for v in values):
            raise DegenerateBBox(f'Bounding box has non-finite values {values}')
        if not (self.w > 0 and self.h > 0):
            raise DegenerateBBox(f'Bounding box must have positive area, got w={self.w}, h={self.h}')

    @property
    def center(self) -> Tuple[float, float]:
        return self.x + self.w / 2, self.y + self.h / 2

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return float(self.x), float(self.y), float(self.w), float(self.h)


def bbox_from_shape(coords: torch.Tensor, margin: float = 0.2) -> BBox:
    """
    Box around the landmark extents, widened by `margin` of the extent in total (half on each side).
    """
    lo, hi = coords.min(dim=1).values, coords.max(dim=1).values
    size = (hi - lo).clamp(min=1e-6)
    lo = lo - size * margin / 2
    size = size * (1 + margin)
    return BBox(lo[0].item(), lo[1].item(), size[0].item(), size[1].item())


def reference_transform(bbox: BBox, frame_px: int = FRAME_PX) -> SimilarityTransform:
    """
    Map a face box into the `frame_px` square: aspect ratio preserved, box centered in the frame.
    """
    scale = frame_px / max(bbox.w, bbox.h)
    cx, cy = bbox.center
    return SimilarityTransform(scale, 0.0, (frame_px / 2 - scale * cx, frame_px / 2 - scale * cy))


def interocular_distance(shape: Shape) -> float:
    i, j = shape.schema.interocular_pair
    return checked_interocular(shape.coords[:, i], shape.coords[:, j])


def checked_interocular(a: torch.Tensor, b: torch.Tensor) -> float:
    distance = torch.linalg.vector_norm(a - b).item()
    if distance < 1e-6:
        raise DegenerateFace(f'Interocular distance {distance:.3g} px is degenerate')
    return distance


def point_rmse(estimate: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """
    RMSE over landmarks of `[..., 2, n]` coordinate tensors, in pixels.
    """
    return ((estimate - truth) ** 2).sum(dim=-2).mean(dim=-1).sqrt()


def rmse_percent(estimate: Shape, truth: Shape, indices: Optional[Sequence[int]] = None) -> float:
    """
    Root mean square landmark error as a percentage of the truth's interocular distance.
    A landmark subset keeps the full-shape normalizer.

    Arguments:
        estimate: the predicted shape.
        truth: the ground truth under the same schema.
        indices: optional landmark subset.

    Returns:
        The error in percent of the interocular distance.
    """
    if estimate.schema != truth.schema:
        raise SchemaMismatch(f'Cannot compare schema {estimate.schema.name!r} against {truth.schema.name!r}')
    iod = interocular_distance(truth)
    selected = list(range(truth.num_landmarks)) if indices is None else list(indices)
    if len(selected) == 0:
        raise EmptyInput('Empty landmark subset')
    return 100.0 * point_rmse(estimate.coords[:, selected], truth.coords[:, selected]).item() / iod


def fit_similarity(src_points: torch.Tensor, dst_points: torch.Tensor) -> SimilarityTransform:
    """
    Least-squares similarity (no reflection) mapping `src_points` onto `dst_points`, both `[2, n]`.
    """
    src = torch.as_tensor(src_points, dtype=torch.float64)
    dst = torch.as_tensor(dst_points, dtype=torch.float64)
    assert src.shape == dst.shape and src.shape[0] == 2, f'Mismatched point sets {tuple(src.shape)} vs {tuple(dst.shape)}'
    if src.shape[1] < 2:
        raise DegenerateConfiguration('At least two point pairs are needed')
    mu_s, mu_d = src.mean(dim=1, keepdim=True), dst.mean(dim=1, keepdim=True)
    s, d = src - mu_s, dst - mu_d
    norm = (s ** 2).sum().item()
    if norm < 1e-18:
        raise DegenerateConfiguration('All source points coincide')

    # Closed form in complex notation: `d ~ (a + ib) s`
    a = ((s[0] * d[0] + s[1] * d[1]).sum() / norm).item()
    b = ((s[0] * d[1] - s[1] * d[0]).sum() / norm).item()
    scale = math.hypot(a, b)
    if scale < 1e-18:
        raise DegenerateConfiguration('Destination points collapse to a single point')
    linear = torch.tensor([[a, -b], [b, a]], dtype=torch.float64)
    t = (mu_d - linear @ mu_s).reshape(-1)
    return SimilarityTransform(scale, math.atan2(b, a), (t[0].item(), t[1].item()))


def mean_shape(shapes: Sequence[Shape], bboxes: Optional[Iterable[BBox]] = None, frame_px: int = FRAME_PX) -> Shape:
    """
    Coordinate-wise mean of the shapes after mapping each one into the reference frame by its box transform.
    Without boxes, each shape's tight landmark box is used.
    """
    shapes = list(shapes)
    if len(shapes) == 0:
        raise EmptyInput('mean_shape needs at least one shape')
    schema = shapes[0].schema
    if any(s.schema != schema for s in shapes):
        raise SchemaMismatch('mean_shape needs shapes of one schema')
    bboxes = [bbox_from_shape(s.coords, margin=0.0) for s in shapes] if bboxes is None else list(bboxes)
    assert len(bboxes) == len(shapes), f'{len(bboxes)} boxes for {len(shapes)} shapes'
    normalized = torch.stack([reference_transform(b, frame_px).apply(s.coords) for s, b in zip(shapes, bboxes)])

    # Averaging deviations from the first shape keeps identical inputs bit-exact
    return Shape(normalized[0] + (normalized - normalized[0]).mean(dim=0), schema)
