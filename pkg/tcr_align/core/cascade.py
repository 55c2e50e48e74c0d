import dataclasses
import os
import torch
import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

from .features import GrayImage, PATCH_PX, bilinear, extract_features_batch
from .geometry import (AnnotationSchema, BBox, FRAME_PX, Shape, SimilarityTransform,
                       point_rmse, reference_transform)
from .regression import LinearMap, PcaBasis, pca_fit, pca_project, solve_ridge
from .utils import get_num_threads
from ..errors import (ConfigInvalid, DegenerateBBox, DegenerateFace, InsufficientData,
                      SchemaMismatch)

Stage = Tuple[PcaBasis, LinearMap]
# `(pixels, coords [m, 2, n], image_index, patch_px) -> [m, n * 128]`, as `extract_features_batch`
FeatureExtractor = Callable[[torch.Tensor, torch.Tensor, Optional[torch.Tensor], int], torch.Tensor]


@dataclass(frozen=True)
class PerturbationRanges:
    translation_px: float = 15.0
    scale: Tuple[float, float] = (0.9, 1.1)
    rotation_rad: float = 0.15

    def __post_init__(self) -> None:
        object.__setattr__(self, 'scale', tuple(float(s) for s in self.scale))
        if self.translation_px < 0 or self.rotation_rad < 0:
            raise ConfigInvalid('Perturbation half-ranges must be non-negative')
        if len(self.scale) != 2 or not (0 < self.scale[0] <= self.scale[1]):
            raise ConfigInvalid(f'Perturbation scale range {self.scale} is not a well-ordered positive interval')

    @staticmethod
    def zero() -> 'PerturbationRanges':
        return PerturbationRanges(0.0, (1.0, 1.0), 0.0)


@dataclass(frozen=True)
class CascadeConfig:
    num_stages: int = 5
    perturbations_per_sample: int = 10
    pca_energy: float = 0.98
    ridge_lambda: float = 1e-3
    patch_px: int = PATCH_PX
    frame_px: int = FRAME_PX
    perturbation_ranges: PerturbationRanges = field(default_factory=PerturbationRanges)
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.num_stages < 1 or self.perturbations_per_sample < 1:
            raise ConfigInvalid('Stage and perturbation counts must be positive')
        if not (0 < self.pca_energy <= 1):
            raise ConfigInvalid(f'PCA energy {self.pca_energy} must lie in (0, 1]')
        if self.ridge_lambda < 0:
            raise ConfigInvalid(f'Ridge lambda {self.ridge_lambda} must be non-negative')
        if self.patch_px <= 0 or self.patch_px % 2 != 0 or self.frame_px <= self.patch_px:
            raise ConfigInvalid(f'Invalid patch/frame sizes {self.patch_px}/{self.frame_px}')
        if not (0 <= self.rng_seed < 2 ** 64):
            raise ConfigInvalid(f'Seed {self.rng_seed} is not a 64-bit unsigned integer')

    def replace(self, **changes) -> 'CascadeConfig':
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> Dict[str, Any]:
        d = dataclasses.asdict(self)
        d['perturbation_ranges']['scale'] = list(self.perturbation_ranges.scale)
        return d

    @staticmethod
    def from_dict(d: Dict[str, Any]) -> 'CascadeConfig':
        d = dict(d)
        names = {f.name for f in dataclasses.fields(CascadeConfig)}
        unknown = set(d) - names
        if unknown:
            raise ConfigInvalid(f'Unknown cascade options {sorted(unknown)}')
        if 'perturbation_ranges' in d:
            ranges = dict(d['perturbation_ranges'])
            unknown = set(ranges) - {f.name for f in dataclasses.fields(PerturbationRanges)}
            if unknown:
                raise ConfigInvalid(f'Unknown perturbation options {sorted(unknown)}')
            d['perturbation_ranges'] = PerturbationRanges(**ranges)
        return CascadeConfig(**d)


@dataclass(frozen=True, eq=False)
class TrainingSample:
    """
    One annotated face. `image` may be a loader callable, resolved by `load_image()`.
    `extra` holds annotations of the same face under other protocols, keyed by schema name.
    """
    image: Union[GrayImage, Callable[[], GrayImage]]
    truth: Shape
    bbox: BBox
    name: str = ''
    extra: Dict[str, Shape] = field(default_factory=dict)

    def load_image(self) -> GrayImage:
        return self.image if isinstance(self.image, GrayImage) else self.image()

    def annotation(self, schema: AnnotationSchema) -> Optional[Shape]:
        if self.truth.schema == schema:
            return self.truth
        shape = self.extra.get(schema.name)
        return shape if shape is not None and shape.schema == schema else None

    def with_truth(self, truth: Shape) -> 'TrainingSample':
        return TrainingSample(self.image, truth, self.bbox, self.name, dict(self.extra))


@dataclass(frozen=True, eq=False)
class CascadeModel:
    schema: AnnotationSchema
    mean_shape: Shape
    stages: Tuple[Stage, ...]
    config: CascadeConfig
    training_errors: Tuple[float, ...] = ()

    def __post_init__(self) -> None:
        assert len(self.stages) == self.config.num_stages, \
            f'{len(self.stages)} stages for a {self.config.num_stages}-stage config'
        assert self.mean_shape.schema == self.schema
        for _, linear in self.stages:
            assert linear.out_dim == 2 * self.schema.num_landmarks, f'Stage output {linear.out_dim} != 2n'


def normalize_image(image: GrayImage, bbox: BBox, frame_px: int = FRAME_PX) -> Tuple[GrayImage, SimilarityTransform]:
    """
    Resample the face box into the `frame_px` square.

    Returns:
        The normalized raster and the image-to-frame transform.
    """
    transform = reference_transform(bbox, frame_px)
    grid = torch.arange(frame_px, dtype=torch.float64)
    vs, us = torch.meshgrid(grid, grid, indexing='ij')
    source = transform.inverse().apply(torch.stack([us.reshape(-1), vs.reshape(-1)]))
    pixels = bilinear(image.pixels, source[0], source[1]).reshape(frame_px, frame_px)
    return GrayImage(pixels.clamp(0.0, 1.0)), transform


def normalize_sample(sample: TrainingSample, frame_px: int = FRAME_PX) -> Tuple[GrayImage, Shape, SimilarityTransform]:
    if not isinstance(sample.bbox, BBox):
        raise DegenerateBBox(f'Sample {sample.name!r} has no valid bounding box')
    image, transform = normalize_image(sample.load_image(), sample.bbox, frame_px)
    return image, sample.truth.transformed(transform), transform


def _draw_perturbations(mean: torch.Tensor, count: int, ranges: PerturbationRanges,
                        generator: torch.Generator) -> torch.Tensor:
    u = torch.rand((count, 4), dtype=torch.float64, generator=generator)
    tx = (2 * u[:, 0] - 1) * ranges.translation_px
    ty = (2 * u[:, 1] - 1) * ranges.translation_px
    scale = ranges.scale[0] + (ranges.scale[1] - ranges.scale[0]) * u[:, 2]
    rotation = (2 * u[:, 3] - 1) * ranges.rotation_rad

    # Displacements about the mean-shape centroid: `(s R - I)(x - c) + t`, exactly zero for identity draws
    cos, sin = torch.cos(rotation), torch.sin(rotation)
    linear = torch.stack([torch.stack([scale * cos - 1, -scale * sin], dim=-1),
                          torch.stack([scale * sin, scale * cos - 1], dim=-1)], dim=-2)
    centered = mean - mean.mean(dim=1, keepdim=True)
    displacement = linear @ centered + torch.stack([tx, ty], dim=-1).unsqueeze(-1)
    return mean.unsqueeze(0) + displacement


def perturb_initializations(truth: Shape, mean: Shape, config: CascadeConfig,
                            rng: torch.Generator) -> List[Shape]:
    """
    `perturbations_per_sample` copies of the mean shape, each moved by a random similarity drawn from
    `config.perturbation_ranges` (rotation and scale about the mean-shape centroid).
    """
    if truth.schema != mean.schema:
        raise SchemaMismatch(f'Truth schema {truth.schema.name!r} differs from mean schema {mean.schema.name!r}')
    coords = _draw_perturbations(mean.coords, config.perturbations_per_sample, config.perturbation_ranges, rng)
    return [Shape(c, mean.schema) for c in coords]


def fit_stage(features: torch.Tensor, targets: torch.Tensor, config: CascadeConfig) -> Stage:
    """
    One cascade stage: PCA compression of the features, then a ridge map onto the shape increments.
    """
    basis = pca_fit(features, config.pca_energy)
    return basis, solve_ridge(pca_project(basis, features), targets, config.ridge_lambda)


def apply_stage(stage: Stage, features: torch.Tensor) -> torch.Tensor:
    basis, linear = stage
    return linear(pca_project(basis, features))


def interocular_rows(truth: torch.Tensor, pair: Tuple[int, int]) -> torch.Tensor:
    i, j = pair
    return torch.linalg.vector_norm(truth[:, :, i] - truth[:, :, j], dim=-1)


class NormalizedSet:
    """
    Training samples resampled into the reference frame, stacked for batched feature extraction.
    """

    def __init__(self, samples: Sequence[TrainingSample], schema: AnnotationSchema, frame_px: int) -> None:
        images, truths, kept = [], [], []
        skipped = 0
        for sample in samples:
            try:
                if sample.truth.schema != schema:
                    raise SchemaMismatch(f'Sample {sample.name!r} is annotated with {sample.truth.schema.name!r}')
                image, truth, _ = normalize_sample(sample, frame_px)
                if interocular_rows(truth.coords.unsqueeze(0), schema.interocular_pair).item() < 1e-6:
                    raise DegenerateFace(f'Sample {sample.name!r} has a degenerate interocular distance')
            except (DegenerateBBox, DegenerateFace, SchemaMismatch) as e:
                if os.getenv('TCR_DEBUG', None):
                    print(f'Skipping training sample: {e}')
                skipped += 1
                continue
            images.append(image.pixels)
            truths.append(truth.coords)
            kept.append(sample)
        if skipped:
            warnings.warn(f'{skipped} of {len(samples)} samples failed normalization and were skipped')

        self.schema = schema
        self.samples = kept
        self.skipped = skipped
        self.pixels = torch.stack(images) if images else torch.empty((0, frame_px, frame_px), dtype=torch.float64)
        self.truths = torch.stack(truths) if truths else torch.empty((0, 2, schema.num_landmarks), dtype=torch.float64)

    def __len__(self) -> int:
        return len(self.samples)


def initial_estimates(mean: torch.Tensor, num_samples: int, config: CascadeConfig) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Seeded perturbed initializations of every sample, in sample order.

    Returns:
        `[num_samples * P, 2, n]` estimates and the `[num_samples * P]` sample index of each row.
    """
    generator = torch.Generator().manual_seed(config.rng_seed)
    count = config.perturbations_per_sample
    estimates = torch.cat([_draw_perturbations(mean, count, config.perturbation_ranges, generator)
                           for _ in range(num_samples)]) if num_samples else mean.new_empty((0, *mean.shape))
    index = torch.arange(num_samples).repeat_interleave(count)
    return estimates, index


def fit_cascade(data: NormalizedSet, config: CascadeConfig, guidance: Optional[torch.Tensor] = None,
                extract: FeatureExtractor = extract_features_batch
                ) -> Tuple[torch.Tensor, Tuple[Stage, ...], Tuple[float, ...]]:
    """
    Staged training shared by the plain and the guided cascades.

    Arguments:
        data: the normalized training set.
        config: training configuration.
        guidance: optional `[N, G]` per-sample features appended to every stage's input.
        extract: shape-indexed feature extractor, SIFT descriptors by default.

    Returns:
        The mean shape, the trained stages, and the mean training error (percent) before and after every stage.
    """
    if len(data) < 2:
        raise InsufficientData(f'Training needs at least 2 usable samples, got {len(data)}')
    get_num_threads()
    mean = data.truths.mean(dim=0)
    x, index = initial_estimates(mean, len(data), config)
    truth = data.truths[index]
    iod = interocular_rows(truth, data.schema.interocular_pair)
    m, n = x.shape[0], x.shape[2]

    def mean_error(estimates: torch.Tensor) -> float:
        return (100.0 * point_rmse(estimates, truth) / iod).mean().item()

    errors = [mean_error(x)]
    stages = []
    for k in range(config.num_stages):
        features = extract(data.pixels, x, index, config.patch_px)
        if guidance is not None:
            features = torch.cat([features, guidance[index]], dim=1)
        stage = fit_stage(features, (truth - x).reshape(m, -1), config)
        x = x + apply_stage(stage, features).reshape(m, 2, n)
        stages.append(stage)
        errors.append(mean_error(x))
        if os.getenv('TCR_DEBUG', None):
            print(f' > stage {k + 1}/{config.num_stages}: {stage[0].num_components} components '
                  f'({stage[0].retained_energy:.4f} energy), training error {errors[-1]:.4f}%')
    return mean, tuple(stages), tuple(errors)


def train_sdm(samples: Sequence[TrainingSample], schema: AnnotationSchema, config: CascadeConfig) -> CascadeModel:
    """
    Train a closed-world cascaded regressor.
    Every stage extracts features at the current estimates, compresses them with PCA and regresses
    the remaining shape increments `x* - x`; all estimates are then updated before the next stage.

    Arguments:
        samples: annotated faces under `schema`; samples failing normalization are skipped with a warning.
        schema: the landmark protocol to learn.
        config: training configuration.

    Returns:
        The trained model.
    """
    data = NormalizedSet(samples, schema, config.frame_px)
    if os.getenv('TCR_DEBUG', None):
        print(f'Training cascade on {len(data)} samples of {schema.name!r} ({data.skipped} skipped)')
    mean, stages, errors = fit_cascade(data, config)
    return CascadeModel(schema, Shape(mean, schema), stages, config, errors)


def run_stages(stages: Sequence[Stage], pixels: torch.Tensor, estimates: torch.Tensor, index: torch.Tensor,
               patch_px: int, guidance: Optional[torch.Tensor] = None,
               extract: FeatureExtractor = extract_features_batch) -> torch.Tensor:
    get_num_threads()
    x = estimates
    for stage in stages:
        features = extract(pixels, x, index, patch_px)
        if guidance is not None:
            features = torch.cat([features, guidance[index]], dim=1)
        x = x + apply_stage(stage, features).reshape(x.shape)
    return x


def predict(model: CascadeModel, images: Sequence[GrayImage], bboxes: Sequence[BBox]) -> List[Shape]:
    """
    Batched inference: normalize every face, start from the mean shape, apply all stages, map back.
    """
    assert len(images) == len(bboxes), f'{len(images)} images for {len(bboxes)} boxes'
    if len(images) == 0:
        return []
    frame_px = model.config.frame_px
    normalized = [normalize_image(image, bbox, frame_px) for image, bbox in zip(images, bboxes)]
    pixels = torch.stack([image.pixels for image, _ in normalized])
    index = torch.arange(len(normalized))
    start = model.mean_shape.coords.unsqueeze(0).expand(len(normalized), -1, -1)
    x = run_stages(model.stages, pixels, start, index, model.config.patch_px)
    return [Shape(transform.inverse().apply(coords), model.schema) for coords, (_, transform) in zip(x, normalized)]


def infer(model: CascadeModel, image: GrayImage, bbox: BBox) -> Shape:
    return predict(model, [image], [bbox])[0]


def predict_samples(model: CascadeModel, samples: Sequence[TrainingSample]) -> List[Shape]:
    return predict(model, [s.load_image() for s in samples], [s.bbox for s in samples])
