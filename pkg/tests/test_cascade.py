import os
import random
import time
import torch
import torch.nn.functional as F
import warnings

import tcr_align.core.utils as core_utils
from tcr_align.core.cascade import (CascadeConfig, PerturbationRanges, TrainingSample, infer, normalize_sample,
                                    perturb_initializations, predict, predict_samples, train_sdm)
from tcr_align.core.features import GrayImage
from tcr_align.core.geometry import AnnotationSchema, BBox, Shape, reference_transform, rmse_percent
from tcr_align.errors import ConfigInvalid, InsufficientData
from tcr_align.synth import SynthConfig, generate_corpus


def textured(size: int = 250) -> GrayImage:
    coarse = torch.rand((1, 1, size // 10, size // 10), dtype=torch.float64)
    fine = F.interpolate(coarse, size=(size, size), mode='bilinear', align_corners=False)[0, 0]
    return GrayImage(0.2 + 0.6 * fine)


def test_config() -> None:
    print('Testing cascade configuration:')
    config = CascadeConfig(num_stages=3, perturbation_ranges=PerturbationRanges(5.0, (0.95, 1.05), 0.1))
    assert CascadeConfig.from_dict(config.to_dict()) == config
    assert CascadeConfig.from_dict({'ridge_lambda': 0.5}).ridge_lambda == 0.5
    for bad in ({'num_stages': 0}, {'pca_energy': 0.0}, {'pca_energy': 1.5}, {'ridge_lambda': -1},
                {'patch_px': 7}, {'unknown': 1}, {'perturbation_ranges': {'scale': [1.2, 1.1]}},
                {'perturbation_ranges': {'shear': 0.1}}):
        try:
            CascadeConfig.from_dict(bad)
            assert False, f'{bad} should be rejected'
        except ConfigInvalid:
            pass
    print(' > Round trip and validation OK\n')


def test_normalization() -> None:
    print('Testing sample normalization:')
    schema = AnnotationSchema('s', ('a', 'b', 'c'), (0, 1))
    truth = Shape(torch.tensor([[80.0, 160.0, 120.0], [100.0, 100.0, 170.0]]), schema)
    image = textured()

    frame, normalized, _ = normalize_sample(TrainingSample(image, truth, BBox(0, 0, 250, 250)))
    assert torch.allclose(frame.pixels, image.pixels, rtol=0, atol=1e-9)
    assert torch.allclose(normalized.coords, truth.coords, rtol=0, atol=1e-9)

    half = Shape(truth.coords / 2, schema)
    _, normalized, transform = normalize_sample(TrainingSample(image, half, BBox(0, 0, 125, 125)))
    assert abs(transform.scale - 2) < 1e-12
    assert torch.allclose(normalized.coords, truth.coords, rtol=0, atol=1e-9)
    assert torch.allclose(transform.inverse().apply(normalized.coords), half.coords, rtol=0, atol=1e-9)
    print(' > Identity frame, scaling and round trip OK\n')


def test_perturbations() -> None:
    print('Testing perturbed initializations:')
    schema = AnnotationSchema('s', tuple(f'p{i}' for i in range(6)), (0, 1))
    mean = Shape(torch.rand((2, 6), dtype=torch.float64) * 100 + 75, schema)

    zero = CascadeConfig(perturbations_per_sample=4, perturbation_ranges=PerturbationRanges.zero())
    copies = perturb_initializations(mean, mean, zero, torch.Generator().manual_seed(3))
    assert len(copies) == 4 and all(c.coords.equal(mean.coords) for c in copies)

    config = CascadeConfig(perturbations_per_sample=7)
    a = perturb_initializations(mean, mean, config, torch.Generator().manual_seed(11))
    b = perturb_initializations(mean, mean, config, torch.Generator().manual_seed(11))
    assert all(x.coords.equal(y.coords) for x, y in zip(a, b))

    # Translation-only draws move the centroid uniformly within the range
    shift = CascadeConfig(perturbations_per_sample=2000, perturbation_ranges=PerturbationRanges(10.0, (1.0, 1.0), 0.0))
    draws = perturb_initializations(mean, mean, shift, torch.Generator().manual_seed(5))
    offsets = torch.stack([(d.coords - mean.coords).mean(dim=1) for d in draws])
    assert offsets.abs().max().item() <= 10.0 + 1e-9
    assert offsets.mean(dim=0).abs().max().item() < 0.6
    assert (offsets.var(dim=0) - 100 / 3).abs().max().item() < 3.0, offsets.var(dim=0)

    # Rotation and scale act about the mean-shape centroid
    spin = CascadeConfig(perturbations_per_sample=50, perturbation_ranges=PerturbationRanges(0.0, (0.9, 1.1), 0.2))
    centroid = mean.coords.mean(dim=1)
    base = torch.linalg.vector_norm(mean.coords[:, 0] - mean.coords[:, 1]).item()
    for d in perturb_initializations(mean, mean, spin, torch.Generator().manual_seed(9)):
        assert torch.allclose(d.coords.mean(dim=1), centroid, rtol=0, atol=1e-9)
        ratio = torch.linalg.vector_norm(d.coords[:, 0] - d.coords[:, 1]).item() / base
        assert 0.9 - 1e-9 <= ratio <= 1.1 + 1e-9
    print(' > Zero ranges, determinism and draw statistics OK\n')


def test_zero_targets() -> None:
    print('Testing training on already-aligned faces:')
    schema = AnnotationSchema('s', ('a', 'b', 'c', 'd'), (0, 1))
    truth = Shape(torch.tensor([[90.0, 160.0, 125.0, 125.0], [100.0, 100.0, 140.0, 180.0]]), schema)
    frame = BBox(0, 0, 250, 250)
    samples = [TrainingSample(textured(), truth, frame, f's{i}') for i in range(5)]
    config = CascadeConfig(num_stages=2, perturbations_per_sample=2, perturbation_ranges=PerturbationRanges.zero())
    model = train_sdm(samples, schema, config)
    assert max(model.training_errors) < 1e-9, model.training_errors
    for _, linear in model.stages:
        assert linear.matrix.abs().max().item() < 1e-9 and linear.bias.abs().max().item() < 1e-9
    prediction = infer(model, textured(), frame)
    assert torch.allclose(prediction.coords, truth.coords, rtol=0, atol=1e-9)
    print(' > Stages learn zero increments\n')


def test_thread_knob() -> None:
    print('Testing the thread count override:')
    saved = torch.get_num_threads()
    wanted = 2 if (os.cpu_count() or 1) >= 2 else 1
    torch.set_num_threads(1 if wanted == 2 else wanted)
    os.environ['TCR_NUM_THREADS'] = str(wanted)
    core_utils._num_threads = None
    try:
        schema = AnnotationSchema('s', ('a', 'b', 'c'), (0, 1))
        truth = Shape(torch.tensor([[90.0, 160.0, 125.0], [100.0, 100.0, 160.0]]), schema)
        samples = [TrainingSample(textured(), truth, BBox(0, 0, 250, 250), f's{i}') for i in range(3)]
        train_sdm(samples, schema, CascadeConfig(num_stages=1, perturbations_per_sample=1))
        assert torch.get_num_threads() == wanted, f'{torch.get_num_threads()=}'
        assert core_utils.get_num_threads() == wanted
    finally:
        del os.environ['TCR_NUM_THREADS']
        core_utils.set_num_threads(saved)
    print(f' > Training runs with {wanted} threads\n')


def test_duplication() -> None:
    print('Testing duplicated training sets:')
    corpus = generate_corpus(SynthConfig(train_size=10, test_size=3), seed=2)
    config = CascadeConfig(num_stages=2, perturbations_per_sample=1, ridge_lambda=0.0,
                           perturbation_ranges=PerturbationRanges.zero())
    once = train_sdm(corpus.a.train, corpus.a.schema, config)
    twice = train_sdm(corpus.a.train + corpus.a.train, corpus.a.schema, config)
    for x, y in zip(predict_samples(once, corpus.a.test), predict_samples(twice, corpus.a.test)):
        assert (x.coords - y.coords).abs().max().item() < 1e-6
    print(' > Predictions unchanged\n')


def test_synthetic_training() -> None:
    print('Testing cascade training on synthetic faces:')
    start = time.perf_counter()
    corpus = generate_corpus(SynthConfig(train_size=24, test_size=8), seed=1)
    config = CascadeConfig(num_stages=3, perturbations_per_sample=5, ridge_lambda=0.5, pca_energy=0.95)
    model = train_sdm(corpus.a.train, corpus.a.schema, config)
    errors = model.training_errors
    assert len(errors) == config.num_stages + 1 and len(model.stages) == config.num_stages
    assert errors[1] < errors[0] and errors[-1] < 0.5 * errors[0], errors
    assert all(b <= 1.05 * a for a, b in zip(errors, errors[1:])), errors
    print(f' > Training errors {", ".join(f"{e:.3f}" for e in errors)} ({time.perf_counter() - start:.2f} s)')

    test = corpus.a.test
    images, boxes = [s.load_image() for s in test], [s.bbox for s in test]
    predictions = predict(model, images, boxes)
    assert all(p.coords.equal(q.coords) for p, q in zip(predictions, predict(model, images, boxes)))
    assert infer(model, images[0], boxes[0]).coords.equal(predictions[0].coords)
    assert predict(model, [], []) == []

    sdm_error = sum(rmse_percent(p, s.truth) for p, s in zip(predictions, test)) / len(test)
    baseline = [model.mean_shape.transformed(reference_transform(s.bbox, config.frame_px).inverse()) for s in test]
    baseline_error = sum(rmse_percent(p, s.truth) for p, s in zip(baseline, test)) / len(test)
    assert sdm_error < baseline_error, f'{sdm_error=}, {baseline_error=}'
    print(f' > Test error {sdm_error:.3f}% against {baseline_error:.3f}% for the mean shape\n')


def test_translation() -> None:
    print('Testing translated faces:')
    corpus = generate_corpus(SynthConfig(train_size=8, test_size=2), seed=7)
    model = train_sdm(corpus.a.train, corpus.a.schema, CascadeConfig(num_stages=2, perturbations_per_sample=3))
    for sample in corpus.a.test:
        image, box = sample.load_image(), sample.bbox
        expected = infer(model, image, box).coords
        for dx, dy in ((7, 0), (0, 12), (23, 5)):
            # Content moves right by `dx` and down by `dy`, borders replicated
            padded = F.pad(image.pixels[None, None], (dx, 3, dy, 5), mode='replicate')[0, 0]
            moved = infer(model, GrayImage(padded), BBox(box.x + dx, box.y + dy, box.w, box.h)).coords
            shift = torch.tensor([[dx], [dy]], dtype=torch.float64)
            assert (moved - expected - shift).abs().max().item() <= 1e-6, (dx, dy)
    print(' > Predictions follow the image content\n')


def test_bad_samples() -> None:
    print('Testing unusable training samples:')
    corpus = generate_corpus(SynthConfig(train_size=4, test_size=0), seed=3)
    config = CascadeConfig(num_stages=1, perturbations_per_sample=2)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always')
        model = train_sdm(list(corpus.a.train) + [corpus.b.train[0]], corpus.a.schema, config)
    assert model.schema == corpus.a.schema
    assert any('skipped' in str(w.message) for w in caught)

    try:
        train_sdm(corpus.a.train[:1], corpus.a.schema, config)
        assert False, 'A single sample should not be enough'
    except InsufficientData:
        pass
    print(' > Schema mismatches skipped, tiny sets rejected\n')


if __name__ == '__main__':
    torch.manual_seed(0)
    random.seed(0)

    test_config()
    test_normalization()
    test_perturbations()
    test_zero_targets()
    test_thread_knob()
    test_duplication()
    test_synthetic_training()
    test_translation()
    test_bad_samples()
