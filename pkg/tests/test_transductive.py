import math
import random
import time
import torch

from tcr_align.core.cascade import CascadeConfig, TrainingSample, apply_stage, fit_stage, predict_samples, train_sdm
from tcr_align.core.features import DESCRIPTOR_DIM, GrayImage
from tcr_align.core.geometry import AnnotationSchema, BBox, CorrespondenceMap, Shape, point_rmse
from tcr_align.core.transductive import (PseudoLabeledSample, filter_pseudo, residual_summary, train_transductive,
                                         transfer_annotations)
from tcr_align.errors import MissingCommonLandmark, SchemaMismatch
from tcr_align.synth import SynthConfig, generate_corpus
from tcr_align.utils import calc_diff

CONFIG = CascadeConfig(num_stages=2, perturbations_per_sample=3)


def small_corpus(seed: int = 4, train_size: int = 10):
    return generate_corpus(SynthConfig(train_size=train_size, test_size=2), seed=seed)


def test_guided_stage() -> None:
    print('Testing a guided stage on an exactly linear problem:')
    # Stage input is `[current block; guidance block]`, the target depends on the guidance block only
    n, d = 80, 12
    current, guidance = torch.randn((n, d), dtype=torch.float64), torch.randn((n, d), dtype=torch.float64)
    w, t = torch.randn((d, 6), dtype=torch.float64), torch.randn(6, dtype=torch.float64)
    features, targets = torch.cat([current, guidance], dim=1), guidance @ w + t
    stage = fit_stage(features, targets, CascadeConfig(pca_energy=1.0, ridge_lambda=0.0))
    assert (apply_stage(stage, features) - targets).abs().max().item() <= 1e-6

    held_out = torch.randn((10, 2 * d), dtype=torch.float64)
    expected = held_out[:, d:] @ w + t
    assert (apply_stage(stage, held_out) - expected).abs().max().item() <= 1e-4
    print(' > Residual and held-out error OK\n')


# Private landmarks are fixed affine combinations of the common ones
LINEAR_SOURCE = AnnotationSchema('outer', ('l_eye', 'r_eye', 'nose', 'brow', 'chin', 'cheek'), (0, 1))
LINEAR_TARGET = AnnotationSchema('inner', ('nose', 'r_eye', 'l_eye', 'lip'), (2, 1))
MIX = torch.tensor([[0.5, 0.25, 0.6], [0.5, 0.25, 0.1], [0.0, 0.5, 0.3]], dtype=torch.float64)
OFFSET = torch.tensor([[0.0, 0.0, 0.0], [-25.0, 30.0, 5.0]], dtype=torch.float64)
BASE = torch.tensor([[100.0, 150.0, 125.0], [110.0, 110.0, 150.0]], dtype=torch.float64)
FLAT, BOX = GrayImage(torch.full((250, 250), 0.5, dtype=torch.float64)), BBox(0, 0, 250, 250)


def coordinate_features(pixels: torch.Tensor, coords: torch.Tensor, image_index=None,
                        patch_px: int = 32) -> torch.Tensor:
    # Landmark coordinates in the first two slots of every descriptor block, pixels ignored
    m, _, n = coords.shape
    out = torch.zeros((m, n, DESCRIPTOR_DIM), dtype=torch.float64)
    out[:, :, :2] = coords.transpose(1, 2)
    return out.reshape(m, -1)


def linear_faces(num: int, generator: torch.Generator, prefix: str):
    sources, targets = [], []
    for k in range(num):
        common = BASE + 8 * torch.randn((2, 3), dtype=torch.float64, generator=generator)
        source = Shape(torch.cat([common, common @ MIX + OFFSET], dim=1), LINEAR_SOURCE)
        lip = common[:, 2:] + torch.tensor([[0.0], [20.0]], dtype=torch.float64)
        target = Shape(torch.cat([common[:, [2, 1, 0]], lip], dim=1), LINEAR_TARGET)
        sources.append(TrainingSample(FLAT, source, BOX, f'{prefix}{k}'))
        targets.append(TrainingSample(FLAT, target, BOX, f'{prefix}{k}', {LINEAR_SOURCE.name: source}))
    return sources, targets


def transfer_error(pseudo) -> float:
    return max((p.shape.coords - p.sample.extra[LINEAR_SOURCE.name].coords).abs().max().item() for p in pseudo)


def test_linear_transfer() -> None:
    print('Testing guided training and transfer on an exactly linear problem:')
    generator = torch.Generator().manual_seed(21)
    train_sources, train_targets = linear_faces(30, generator, 'train')
    _, held_out = linear_faces(10, generator, 'held_out')
    correspondence = CorrespondenceMap.by_names(LINEAR_SOURCE, LINEAR_TARGET)
    assert correspondence.pairs == ((0, 2), (1, 1), (2, 0))
    assert correspondence.target_interocular_pair() == (2, 1)

    config = CascadeConfig(num_stages=1, perturbations_per_sample=3, pca_energy=1.0, ridge_lambda=0.0)
    guided = train_transductive(train_sources, correspondence, config, extract=coordinate_features)
    assert guided.training_errors[1] <= 1e-6, f'Stage residual {guided.training_errors[1]}'
    for targets in (train_targets, held_out):
        pseudo = transfer_annotations(guided, targets, correspondence, extract=coordinate_features)
        assert transfer_error(pseudo) <= 1e-4, f'Transfer error {transfer_error(pseudo)} px'
        assert all(p.common_residual <= 1e-4 for p in pseudo)

    # Without guidance the increments are not a function of the current estimates alone
    ablated = train_transductive(train_sources, correspondence, config, use_guidance=False,
                                 extract=coordinate_features)
    assert ablated.training_errors[1] > guided.training_errors[1] + 1.0
    for targets in (train_targets, held_out):
        pseudo = transfer_annotations(guided, targets, correspondence, extract=coordinate_features)
        plain = transfer_annotations(ablated, targets, correspondence, extract=coordinate_features)
        assert transfer_error(plain) > transfer_error(pseudo) + 1.0
        assert residual_summary(plain)['mean'] > residual_summary(pseudo)['mean']
    print(f' > Guided residual {guided.training_errors[1]:.2e}%, '
          f'ablated {ablated.training_errors[1]:.2f}%\n')


def test_transfer() -> None:
    print('Testing annotation transfer:')
    start = time.perf_counter()
    corpus = small_corpus()
    correspondence = corpus.correspondence
    model = train_transductive(corpus.a.train, correspondence, CONFIG)
    assert model.input_dim == (corpus.a.schema.num_landmarks + len(correspondence.pairs)) * DESCRIPTOR_DIM
    assert len(model.training_errors) == CONFIG.num_stages + 1

    targets = corpus.b.train
    pseudo = transfer_annotations(model, targets, correspondence)
    assert [p.name for p in pseudo] == [s.name for s in targets]
    again = transfer_annotations(model, targets, correspondence)
    assert all(p.shape.coords.equal(q.shape.coords) for p, q in zip(pseudo, again))
    assert transfer_annotations(model, [], correspondence) == []

    i, j = correspondence.target_interocular_pair()
    for p, sample in zip(pseudo, targets):
        assert p.shape.schema == corpus.a.schema
        truth = sample.truth.coords
        common = p.shape.coords[:, list(correspondence.source_indices)]
        iod = torch.linalg.vector_norm(truth[:, i] - truth[:, j]).item()
        expected = 100.0 * point_rmse(common, truth[:, list(correspondence.target_indices)]).item() / iod
        assert abs(p.common_residual - expected) < 1e-9
        fused = p.to_training_sample()
        assert fused.truth is p.shape and fused.annotation(corpus.b.schema) is sample.truth
    print(f' > {len(pseudo)} pseudo-labels, residuals {residual_summary(pseudo)} '
          f'({time.perf_counter() - start:.2f} s)')

    try:
        transfer_annotations(model, targets, correspondence.reversed())
        assert False, 'A reversed correspondence should be rejected'
    except SchemaMismatch:
        pass
    bare = [TrainingSample(s.image, s.truth, s.bbox, s.name) for s in corpus.a.test]
    try:
        transfer_annotations(model, bare, correspondence)
        assert False, 'Targets without target-protocol annotations should be rejected'
    except MissingCommonLandmark:
        pass
    print(' > Schema checks OK\n')


def test_guidance_ablation() -> None:
    print('Testing the guidance ablation:')
    corpus = small_corpus(seed=5)
    ablated = train_transductive(corpus.a.train, corpus.correspondence, CONFIG, use_guidance=False)
    sdm = train_sdm(corpus.a.train, corpus.a.schema, CONFIG)
    assert all(abs(a - b) < 1e-9 for a, b in zip(ablated.training_errors, sdm.training_errors))

    pseudo = transfer_annotations(ablated, corpus.b.train, corpus.correspondence)
    plain = predict_samples(sdm, corpus.b.train)
    for p, shape in zip(pseudo, plain):
        assert (p.shape.coords - shape.coords).abs().max().item() < 1e-6
        assert calc_diff(p.shape.coords, shape.coords).item() < 1e-12
    print(' > Zeroed guidance reproduces the plain cascade\n')


def test_filter() -> None:
    print('Testing the pseudo-label filter:')
    corpus = small_corpus(seed=6, train_size=3)
    pseudo = [PseudoLabeledSample(s, s.truth, r) for s, r in zip(corpus.b.train, (3.0, 7.5, 7.6))]
    assert [p.common_residual for p in filter_pseudo(pseudo, 7.5)] == [3.0, 7.5]
    assert filter_pseudo(pseudo, math.inf) == pseudo
    assert filter_pseudo(pseudo, 0.0) == []

    residuals = [random.uniform(0, 20) for _ in range(50)]
    many = [PseudoLabeledSample(corpus.b.train[0], corpus.b.train[0].truth, r) for r in residuals]
    counts = [len(filter_pseudo(many, e)) for e in (0, 2.5, 5, 7.5, 10, 15, 20)]
    assert counts == sorted(counts) and counts[-1] == 50
    kept = filter_pseudo(many, 10)
    assert [p.common_residual for p in kept] == [r for r in residuals if r <= 10]

    summary = residual_summary(pseudo)
    assert summary['count'] == 3 and abs(summary['mean'] - 6.0333333333333333) < 1e-12
    assert math.isnan(residual_summary([])['mean'])
    print(' > Inclusive threshold, order and monotonicity OK\n')


if __name__ == '__main__':
    torch.manual_seed(0)
    random.seed(0)

    test_guided_stage()
    test_linear_transfer()
    test_transfer()
    test_guidance_ablation()
    test_filter()
