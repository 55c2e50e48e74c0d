import dataclasses
import math
import os
import torch
import warnings
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .cache import ModelCache, samples_digest
from .cascade import CascadeConfig, CascadeModel, TrainingSample, predict_samples, train_sdm
from .geometry import AnnotationSchema, CorrespondenceMap, Shape, checked_interocular, point_rmse, rmse_percent
from .transductive import filter_pseudo, residual_summary, train_transductive, transfer_annotations
from ..errors import ConfigInvalid, EmptyAfterFilter, EmptyInput, MissingCommonLandmark, SchemaMismatch

SUBSETS = ('all', 'common', 'private')
METHODS = ('closed_world', 'naive_fusion', 'tcr')


@dataclass(frozen=True)
class PipelineConfig:
    epsilon: float = 7.5
    failure_threshold: float = 10.0
    strict: bool = False
    use_guidance: bool = True

    def __post_init__(self) -> None:
        if not (self.epsilon >= 0):
            raise ConfigInvalid(f'Epsilon {self.epsilon} must be non-negative')
        if not (self.failure_threshold > 0):
            raise ConfigInvalid(f'Failure threshold {self.failure_threshold} must be positive')

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class EvalReport:
    mean_error: float
    failure_rate: float
    per_sample_errors: Tuple[float, ...]
    subset: str
    threshold: float = 10.0

    def __post_init__(self) -> None:
        assert self.subset in SUBSETS, f'Unknown subset {self.subset}'
        assert 0 <= self.failure_rate <= 1 and self.mean_error >= 0

    @property
    def sample_count(self) -> int:
        return len(self.per_sample_errors)

    @staticmethod
    def from_errors(errors: Sequence[float], subset: str = 'all', threshold: float = 10.0) -> 'EvalReport':
        errors = tuple(float(e) for e in errors)
        if len(errors) == 0:
            raise EmptyInput('Cannot evaluate an empty test set')
        failures = sum(1 for e in errors if e > threshold)
        return EvalReport(math.fsum(errors) / len(errors), failures / len(errors), errors, subset, threshold)


def _oriented(correspondence: CorrespondenceMap, schema: AnnotationSchema) -> CorrespondenceMap:
    if correspondence.source_schema == schema:
        return correspondence
    if correspondence.target_schema == schema:
        return correspondence.reversed()
    raise SchemaMismatch(f'Schema {schema.name!r} is not part of the correspondence '
                         f'{correspondence.source_schema.name!r} -> {correspondence.target_schema.name!r}')


def _common_error(prediction: torch.Tensor, sample: TrainingSample, correspondence: CorrespondenceMap) -> float:
    """
    Error of predicted common landmarks (`[2, c]`, pair order) against whichever side's truth the sample carries.
    The normalizer is the source interocular pair, which is always common.
    """
    for side, indices, pair in ((correspondence.source_schema, correspondence.source_indices,
                                 correspondence.source_schema.interocular_pair),
                                (correspondence.target_schema, correspondence.target_indices,
                                 correspondence.target_interocular_pair())):
        truth = sample.annotation(side)
        if truth is not None:
            i, j = pair
            iod = checked_interocular(truth.coords[:, i], truth.coords[:, j])
            return 100.0 * point_rmse(prediction, truth.coords[:, list(indices)]).item() / iod
    raise MissingCommonLandmark(f'Sample {sample.name!r} has no usable annotation for the common landmarks')


def score(predictions: Sequence[Shape], samples: Sequence[TrainingSample], subset: str = 'all',
          correspondence: Optional[CorrespondenceMap] = None, threshold: float = 10.0) -> EvalReport:
    """
    Score predicted shapes against the samples' annotations.

    Arguments:
        predictions: one shape per sample, under a schema of `correspondence` or its common schema.
        samples: test samples; annotations under other protocols are looked up in `extra`.
        subset: `all` (every predicted landmark), `common` or `private` (relative to `correspondence`).
        correspondence: required for the `common` and `private` subsets.
        threshold: failure threshold in percent, exclusive.

    Returns:
        The report.
    """
    assert subset in SUBSETS, f'Unknown subset {subset}'
    assert len(predictions) == len(samples), f'{len(predictions)} predictions for {len(samples)} samples'
    if subset != 'all' and correspondence is None:
        raise SchemaMismatch(f'Subset {subset!r} requires a correspondence')

    errors = []
    for prediction, sample in zip(predictions, samples):
        schema = prediction.schema
        if subset == 'all':
            truth = sample.annotation(schema)
            if truth is None:
                raise SchemaMismatch(f'Sample {sample.name!r} has no {schema.name!r} annotation')
            errors.append(rmse_percent(prediction, truth))
        elif subset == 'common':
            if schema == correspondence.common_schema():
                errors.append(_common_error(prediction.coords, sample, correspondence))
            else:
                oriented = _oriented(correspondence, schema)
                common = prediction.coords[:, list(oriented.source_indices)]
                errors.append(_common_error(common, sample, oriented))
        else:
            oriented = _oriented(correspondence, schema)
            truth = sample.annotation(schema)
            if truth is None:
                raise SchemaMismatch(f'Sample {sample.name!r} has no {schema.name!r} annotation')
            if len(oriented.private_source_indices) == 0:
                raise EmptyInput(f'Schema {schema.name!r} has no private landmarks')
            errors.append(rmse_percent(prediction, truth, oriented.private_source_indices))
    return EvalReport.from_errors(errors, subset, threshold)


def evaluate(model: CascadeModel, test_samples: Sequence[TrainingSample], subset: str = 'all',
             correspondence: Optional[CorrespondenceMap] = None, threshold: float = 10.0) -> EvalReport:
    return score(predict_samples(model, test_samples), test_samples, subset, correspondence, threshold)


@dataclass
class TcrLog:
    source_count: int = 0
    target_count: int = 0
    transferred: int = 0
    retained: int = 0
    rejected: int = 0
    fused_count: int = 0
    fell_back: bool = False
    epsilon: float = 7.5
    residuals: Dict[str, float] = field(default_factory=dict)
    transductive_errors: Tuple[float, ...] = ()
    training_errors: Tuple[float, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)


def _restrict(samples: Sequence[TrainingSample], schema: AnnotationSchema,
              indices: Sequence[int], common: AnnotationSchema) -> List[TrainingSample]:
    restricted = []
    for sample in samples:
        truth = sample.annotation(schema)
        if truth is None:
            raise MissingCommonLandmark(f'Sample {sample.name!r} has no {schema.name!r} annotation')
        restricted.append(sample.with_truth(Shape(truth.coords[:, list(indices)], common)))
    return restricted


def run_tcr(source_train: Sequence[TrainingSample], target_train: Sequence[TrainingSample],
            correspondence: CorrespondenceMap, config: CascadeConfig,
            pipeline_config: Optional[PipelineConfig] = None) -> Tuple[CascadeModel, TcrLog]:
    """
    Transductive cascaded regression: transfer source-protocol annotations onto the target training faces,
    keep the pseudo-labels whose common landmarks agree with the target ground truth, and train a cascade
    on the union of the source samples and the retained pseudo-labeled targets.

    Arguments:
        source_train: samples under `correspondence.source_schema`.
        target_train: samples under `correspondence.target_schema`.
        correspondence: common landmark pairing.
        config: cascade configuration, shared by every training step.
        pipeline_config: filter threshold and fallback behavior.

    Returns:
        The fused model over the source schema and a log of the counts at every step.
    """
    pipeline_config = pipeline_config or PipelineConfig()
    log = TcrLog(source_count=len(source_train), target_count=len(target_train), epsilon=pipeline_config.epsilon)

    retained = []
    if len(target_train) > 0:
        transductive = train_transductive(source_train, correspondence, config, pipeline_config.use_guidance)
        pseudo = transfer_annotations(transductive, target_train, correspondence)
        retained = filter_pseudo(pseudo, pipeline_config.epsilon)
        log.transductive_errors = transductive.training_errors
        log.transferred = len(pseudo)
        log.residuals = residual_summary(pseudo)
    log.retained, log.rejected = len(retained), log.transferred - len(retained)

    if len(retained) == 0:
        if pipeline_config.strict:
            raise EmptyAfterFilter(f'No pseudo-label survived the filter (epsilon={pipeline_config.epsilon})')
        if len(target_train) > 0:
            warnings.warn(f'No pseudo-label survived the filter (epsilon={pipeline_config.epsilon}), '
                          f'falling back to the source-only model')
        log.fell_back = True

    fused = list(source_train) + [p.to_training_sample() for p in retained]
    log.fused_count = len(fused)
    model = train_sdm(fused, correspondence.source_schema, config)
    log.training_errors = model.training_errors
    if os.getenv('TCR_DEBUG', None):
        print(f'TCR: {log.source_count} source + {log.retained}/{log.transferred} retained targets '
              f'-> {log.fused_count} training samples')
    return model, log


def naive_fusion_baseline(source_train: Sequence[TrainingSample], target_train: Sequence[TrainingSample],
                          correspondence: CorrespondenceMap, config: CascadeConfig) -> CascadeModel:
    """
    Cascade over the common landmarks only, trained on both sets concatenated.
    """
    common = correspondence.common_schema()
    samples = _restrict(source_train, correspondence.source_schema, correspondence.source_indices, common) + \
        _restrict(target_train, correspondence.target_schema, correspondence.target_indices, common)
    return train_sdm(samples, common, config)


def naive_labeling(model: CascadeModel, target_samples: Sequence[TrainingSample]) -> List[Shape]:
    """
    Source-protocol labels of the target faces from the plain source model, without any guidance.
    """
    return predict_samples(model, target_samples)


def evaluate_transfer(shapes: Sequence[Shape], target_samples: Sequence[TrainingSample],
                      correspondence: CorrespondenceMap, threshold: float = 10.0) -> Dict[str, EvalReport]:
    """
    Score transferred source-protocol shapes against the hidden source-protocol truth of the target faces,
    separately for the common and private landmarks.
    """
    return {subset: score(shapes, target_samples, subset, correspondence, threshold)
            for subset in ('common', 'private')}


@dataclass(frozen=True, eq=False)
class DatasetSplits:
    name: str
    schema: AnnotationSchema
    train: Tuple[TrainingSample, ...]
    test: Tuple[TrainingSample, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, 'train', tuple(self.train))
        object.__setattr__(self, 'test', tuple(self.test))


@dataclass
class MatrixCell:
    source: str
    target: str
    reports: Dict[Tuple[str, str], EvalReport] = field(default_factory=dict)

    @property
    def diagonal(self) -> bool:
        return self.source == self.target


@dataclass
class ExperimentMatrix:
    names: Tuple[str, ...]
    cells: Dict[Tuple[str, str], MatrixCell] = field(default_factory=dict)
    logs: Dict[Tuple[str, str], TcrLog] = field(default_factory=dict)

    def off_diagonal(self) -> List[MatrixCell]:
        return [c for c in self.cells.values() if not c.diagonal]

    def rows(self) -> List[Dict[str, Any]]:
        """
        One row per (source, target, method, subset), in dataset order. TCR rows carry the relative
        improvement over the closed-world model on the same subset.
        """
        rows = []
        for source in self.names:
            for target in self.names:
                cell = self.cells.get((source, target))
                if cell is None:
                    continue
                for method in METHODS:
                    for subset in SUBSETS:
                        report = cell.reports.get((method, subset))
                        if report is None:
                            continue
                        improvement = None
                        baseline = cell.reports.get(('closed_world', subset))
                        if method == 'tcr' and baseline is not None and baseline.mean_error > 0:
                            improvement = (baseline.mean_error - report.mean_error) / baseline.mean_error
                        rows.append({'source': source, 'target': target, 'method': method, 'subset': subset,
                                     'mean_error': report.mean_error, 'failure_rate': report.failure_rate,
                                     'sample_count': report.sample_count, 'relative_improvement': improvement})
        return rows


def _lookup_correspondence(correspondences: Dict[Tuple[str, str], CorrespondenceMap],
                           source: str, target: str) -> CorrespondenceMap:
    if (source, target) in correspondences:
        return correspondences[(source, target)]
    if (target, source) in correspondences:
        return correspondences[(target, source)].reversed()
    raise MissingCommonLandmark(f'No correspondence between datasets {source!r} and {target!r}')


def _has_annotation(samples: Sequence[TrainingSample], schema: AnnotationSchema) -> bool:
    return len(samples) > 0 and all(s.annotation(schema) is not None for s in samples)


def cross_matrix(datasets: Sequence[DatasetSplits], correspondences: Dict[Tuple[str, str], CorrespondenceMap],
                 config: CascadeConfig, pipeline_config: Optional[PipelineConfig] = None,
                 cache: Optional[ModelCache] = None) -> ExperimentMatrix:
    """
    Closed-world, naive-fusion and TCR models for every ordered dataset pair, evaluated on the target test split.
    Diagonal cells hold the closed-world self-evaluation only.

    Arguments:
        datasets: at least two datasets with their train/test splits.
        correspondences: pairings keyed by `(source name, target name)`; reversed pairings are derived.
        config: cascade configuration for every model.
        pipeline_config: filter and failure thresholds.
        cache: reuses closed-world models across cells.

    Returns:
        The matrix. All-landmark cells appear where the target test faces carry source-protocol annotations.
    """
    if len(datasets) < 2:
        raise EmptyInput(f'A cross-dataset matrix needs at least 2 datasets, got {len(datasets)}')
    names = tuple(d.name for d in datasets)
    assert len(set(names)) == len(names), f'Duplicated dataset names {names}'
    pipeline_config = pipeline_config or PipelineConfig()
    threshold = pipeline_config.failure_threshold
    cache = cache or ModelCache()
    matrix = ExperimentMatrix(names)
    digests = {d.name: samples_digest(d.train) for d in datasets}

    def closed_world(dataset: DatasetSplits) -> CascadeModel:
        keys = {'dataset': dataset.name, 'schema': dataset.schema.name, 'config': config.to_dict(),
                'num_samples': len(dataset.train), 'data': digests[dataset.name]}
        return cache.get_or_train(f'sdm_{dataset.name}', keys, lambda: train_sdm(dataset.train, dataset.schema, config))

    for source in datasets:
        for target in datasets:
            cell = MatrixCell(source.name, target.name)
            matrix.cells[(source.name, target.name)] = cell
            sdm = closed_world(source)
            if source is target:
                cell.reports[('closed_world', 'all')] = evaluate(sdm, target.test, 'all', None, threshold)
                continue

            correspondence = _lookup_correspondence(correspondences, source.name, target.name)
            subsets = ['common']
            if _has_annotation(target.test, source.schema):
                subsets.append('all')

            sdm_predictions = predict_samples(sdm, target.test)
            for subset in subsets:
                cell.reports[('closed_world', subset)] = score(sdm_predictions, target.test, subset,
                                                               correspondence, threshold)

            naive = naive_fusion_baseline(source.train, target.train, correspondence, config)
            cell.reports[('naive_fusion', 'common')] = evaluate(naive, target.test, 'common', correspondence, threshold)

            tcr, log = run_tcr(source.train, target.train, correspondence, config, pipeline_config)
            matrix.logs[(source.name, target.name)] = log
            tcr_predictions = predict_samples(tcr, target.test)
            for subset in subsets:
                cell.reports[('tcr', subset)] = score(tcr_predictions, target.test, subset, correspondence, threshold)
            if os.getenv('TCR_DEBUG', None):
                summary = ', '.join(f'{m}/{s}={r.mean_error:.3f}' for (m, s), r in cell.reports.items())
                print(f'Matrix cell {source.name} -> {target.name}: {summary}')
    return matrix
