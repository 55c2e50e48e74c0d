import math
import os
import torch
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

from .cascade import (CascadeConfig, FeatureExtractor, NormalizedSet, Stage, TrainingSample, fit_cascade,
                      normalize_image, run_stages)
from .features import DESCRIPTOR_DIM, extract_features_batch
from .geometry import AnnotationSchema, CorrespondenceMap, Shape, checked_interocular, point_rmse
from ..errors import MissingCommonLandmark, SchemaMismatch


@dataclass(frozen=True, eq=False)
class TransductiveModel:
    """
    A cascade over the source schema whose stages also see descriptors extracted at the fixed
    ground-truth common landmarks. Stage inputs are `[phi(x) in source-schema order; phi(x*_C)]`.
    """
    schema: AnnotationSchema
    correspondence: CorrespondenceMap
    mean_shape: Shape
    stages: Tuple[Stage, ...]
    config: CascadeConfig
    use_guidance: bool = True
    training_errors: Tuple[float, ...] = ()

    def __post_init__(self) -> None:
        assert self.correspondence.source_schema == self.schema
        assert len(self.stages) == self.config.num_stages
        for basis, linear in self.stages:
            assert basis.in_dim == self.input_dim, f'Stage input {basis.in_dim} != {self.input_dim}'
            assert linear.out_dim == 2 * self.schema.num_landmarks

    @property
    def input_dim(self) -> int:
        return (self.schema.num_landmarks + len(self.correspondence.pairs)) * DESCRIPTOR_DIM


@dataclass(frozen=True, eq=False)
class PseudoLabeledSample:
    """
    A target face carrying a transferred source-schema shape (pixel frame) and the RMSE (percent of the
    target interocular distance) between its transferred common landmarks and the target's ground truth.
    """
    sample: TrainingSample
    shape: Shape
    common_residual: float

    def __post_init__(self) -> None:
        assert self.common_residual >= 0 and math.isfinite(self.common_residual)

    @property
    def name(self) -> str:
        return self.sample.name

    def to_training_sample(self) -> TrainingSample:
        # The target protocol annotation stays available as an extra view of the same face
        extra = dict(self.sample.extra)
        extra[self.sample.truth.schema.name] = self.sample.truth
        return TrainingSample(self.sample.image, self.shape, self.sample.bbox, self.sample.name, extra)


def guidance_features(pixels: torch.Tensor, common: torch.Tensor, patch_px: int, enabled: bool,
                      extract: FeatureExtractor = extract_features_batch) -> torch.Tensor:
    """
    Descriptors at the ground-truth common landmarks `common` (`[N, 2, c]`), one row per image.
    A disabled guidance block is all zeros.
    """
    if not enabled:
        return torch.zeros((common.shape[0], common.shape[2] * DESCRIPTOR_DIM), dtype=torch.float64)
    return extract(pixels, common, torch.arange(common.shape[0]), patch_px)


def train_transductive(source_samples: Sequence[TrainingSample], correspondence: CorrespondenceMap,
                       config: CascadeConfig, use_guidance: bool = True,
                       extract: FeatureExtractor = extract_features_batch) -> TransductiveModel:
    """
    Train the guided cascade on fully annotated source samples.

    Arguments:
        source_samples: samples annotated under `correspondence.source_schema`.
        correspondence: common landmark pairing between the source and target protocols.
        config: training configuration, shared with the closed-world cascade.
        use_guidance: `False` zeroes the guidance block (ablation).
        extract: shape-indexed feature extractor, SIFT descriptors by default.

    Returns:
        The trained model.
    """
    schema = correspondence.source_schema
    data = NormalizedSet(source_samples, schema, config.frame_px)
    common = data.truths[:, :, list(correspondence.source_indices)]
    guidance = guidance_features(data.pixels, common, config.patch_px, use_guidance, extract)
    if os.getenv('TCR_DEBUG', None):
        print(f'Training transductive cascade on {len(data)} samples of {schema.name!r} '
              f'({len(correspondence.pairs)} common landmarks, guidance {"on" if use_guidance else "off"})')
    mean, stages, errors = fit_cascade(data, config, guidance, extract)
    return TransductiveModel(schema, correspondence, Shape(mean, schema), stages, config, use_guidance, errors)


def _target_truth(sample: TrainingSample, schema: AnnotationSchema) -> Shape:
    truth = sample.annotation(schema)
    if truth is None:
        raise MissingCommonLandmark(f'Target sample {sample.name!r} has no {schema.name!r} annotation '
                                    f'to read the common landmarks from')
    return truth


def transfer_annotations(model: TransductiveModel, target_samples: Sequence[TrainingSample],
                         correspondence: CorrespondenceMap,
                         extract: FeatureExtractor = extract_features_batch) -> List[PseudoLabeledSample]:
    """
    Label the target faces with source-schema landmarks, guided by their ground-truth common landmarks.

    Arguments:
        model: the trained transductive model.
        target_samples: samples annotated under `correspondence.target_schema`.
        correspondence: the pairing the model was trained with.
        extract: the feature extractor the model was trained with.

    Returns:
        One pseudo-labeled sample per target, in input order.
    """
    if correspondence.source_schema != model.schema:
        raise SchemaMismatch(f'Correspondence source {correspondence.source_schema.name!r} '
                             f'differs from model schema {model.schema.name!r}')
    if tuple(correspondence.source_indices) != tuple(model.correspondence.source_indices):
        raise SchemaMismatch('Correspondence differs from the one the model was trained with')
    if len(target_samples) == 0:
        return []

    target_schema = correspondence.target_schema
    truths = [_target_truth(s, target_schema) for s in target_samples]
    frame_px, patch_px = model.config.frame_px, model.config.patch_px
    normalized = [normalize_image(s.load_image(), s.bbox, frame_px) for s in target_samples]
    pixels = torch.stack([image.pixels for image, _ in normalized])
    index = torch.arange(len(target_samples))

    target_indices = list(correspondence.target_indices)
    common = torch.stack([transform.apply(t.coords[:, target_indices]) for t, (_, transform) in zip(truths, normalized)])
    guidance = guidance_features(pixels, common, patch_px, model.use_guidance, extract)

    start = model.mean_shape.coords.unsqueeze(0).expand(len(target_samples), -1, -1)
    x = run_stages(model.stages, pixels, start, index, patch_px, guidance, extract)

    i, j = correspondence.target_interocular_pair()
    source_indices = list(correspondence.source_indices)
    pseudo = []
    for sample, truth, coords, (_, transform) in zip(target_samples, truths, x, normalized):
        shape = Shape(transform.inverse().apply(coords), model.schema)
        iod = checked_interocular(truth.coords[:, i], truth.coords[:, j])
        residual = 100.0 * point_rmse(shape.coords[:, source_indices], truth.coords[:, target_indices]).item() / iod
        pseudo.append(PseudoLabeledSample(sample, shape, residual))
    return pseudo


def filter_pseudo(pseudo: Sequence[PseudoLabeledSample], epsilon: float = 7.5) -> List[PseudoLabeledSample]:
    """
    Keep the pseudo-labels whose common residual is at most `epsilon` (inclusive), in input order.
    """
    assert epsilon >= 0, f'Epsilon must be non-negative, got {epsilon}'
    retained = [p for p in pseudo if p.common_residual <= epsilon]
    if os.getenv('TCR_DEBUG', None):
        print(f'Pseudo-label filter (epsilon={epsilon}): {len(retained)} retained, '
              f'{len(pseudo) - len(retained)} rejected')
    return retained


def residual_summary(pseudo: Sequence[PseudoLabeledSample]) -> Dict[str, float]:
    if len(pseudo) == 0:
        return {'count': 0, 'mean': float('nan'), 'median': float('nan')}
    residuals = torch.tensor([p.common_residual for p in pseudo], dtype=torch.float64)
    return {'count': len(pseudo), 'mean': residuals.mean().item(), 'median': residuals.median().item()}
