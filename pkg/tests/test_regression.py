import random
import time
import torch

from tcr_align.core.regression import pca_fit, pca_project, pca_reconstruct, solve_ridge
from tcr_align.errors import DegenerateData, DimensionMismatch, SingularSystem


def normal_equations(x: torch.Tensor, y: torch.Tensor, lam: float):
    # Augmented oracle: the bias column is appended and left unregularized
    n, d = x.shape
    xa = torch.cat([x, torch.ones((n, 1), dtype=torch.float64)], dim=1)
    penalty = lam * torch.eye(d + 1, dtype=torch.float64)
    penalty[d, d] = 0
    w = torch.linalg.solve(xa.t() @ xa + penalty, xa.t() @ y)
    return w[:d].t(), w[d]


def relative(a: torch.Tensor, b: torch.Tensor) -> float:
    return ((a - b).norm() / b.norm().clamp(min=1e-300)).item()


def test_ridge_oracle() -> None:
    print('Testing ridge solver against normal equations:')
    start = time.perf_counter()
    for _ in range(100):
        lam = random.choice((0.0, 0.1, 10.0))
        d, m = random.randint(2, 30), random.randint(1, 5)
        n = random.randint(max(10, d + 5) if lam == 0 else 10, 60)
        x, y = torch.randn((n, d), dtype=torch.float64), torch.randn((n, m), dtype=torch.float64)
        fitted = solve_ridge(x, y, lam)
        matrix, bias = normal_equations(x, y, lam)
        assert relative(fitted.matrix, matrix) < 1e-8, f'{n=}, {d=}, {m=}, {lam=}'
        assert relative(fitted.bias, bias) < 1e-8, f'{n=}, {d=}, {m=}, {lam=}'
    print(f' > 100 random problems OK ({time.perf_counter() - start:.2f} s)\n')


def test_ridge_properties() -> None:
    print('Testing ridge solver properties:')
    # Square full-rank interpolation, with the bias absorbing the centering
    x = torch.randn((9, 8), dtype=torch.float64)
    y = torch.randn((9, 3), dtype=torch.float64)
    fitted = solve_ridge(x, y, 0.0)
    assert (fitted(x) - y).abs().max().item() < 1e-8

    # Shrinkage limit
    x, y = torch.randn((40, 8), dtype=torch.float64), torch.randn((40, 3), dtype=torch.float64)
    plain, shrunk = solve_ridge(x, y, 0.0), solve_ridge(x, y, 1e12)
    assert shrunk.matrix.norm().item() <= 1e-6 * plain.matrix.norm().item()
    assert torch.allclose(shrunk.bias, y.mean(dim=0), rtol=0, atol=1e-6)

    # Residuals never decrease as lambda grows
    residuals = [((solve_ridge(x, y, lam)(x) - y) ** 2).sum().item() for lam in (0, 0.01, 0.1, 1, 10, 100)]
    assert all(a <= b + 1e-9 for a, b in zip(residuals, residuals[1:])), residuals

    # Duplicated samples and sample order leave the solution unchanged
    exact_x = torch.randn((30, 5), dtype=torch.float64)
    exact_y = exact_x @ torch.randn((5, 2), dtype=torch.float64) + 1.5
    base = solve_ridge(exact_x, exact_y, 0.0)
    dup = solve_ridge(torch.cat([exact_x, exact_x[3:5]]), torch.cat([exact_y, exact_y[3:5]]), 0.0)
    assert relative(dup.matrix, base.matrix) < 1e-8 and relative(dup.bias, base.bias) < 1e-8
    permutation = torch.randperm(40)
    permuted = solve_ridge(x[permutation], y[permutation], 0.1)
    reference = solve_ridge(x, y, 0.1)
    assert relative(permuted.matrix, reference.matrix) < 1e-10

    # Dual route when D > N
    wide_x, wide_y = torch.randn((12, 40), dtype=torch.float64), torch.randn((12, 2), dtype=torch.float64)
    matrix, bias = normal_equations(wide_x, wide_y, 0.5)
    wide = solve_ridge(wide_x, wide_y, 0.5)
    assert relative(wide.matrix, matrix) < 1e-8 and relative(wide.bias, bias) < 1e-8

    try:
        solve_ridge(wide_x, wide_y, 0.0)
        assert False, 'Rank-deficient unregularized systems should be rejected'
    except SingularSystem:
        pass
    try:
        solve_ridge(x, y[:5], 0.1)
        assert False, 'Mismatched sample counts should be rejected'
    except DimensionMismatch:
        pass
    print(' > Interpolation, shrinkage, monotonicity and invariances OK\n')


def test_pca() -> None:
    print('Testing PCA:')
    # Points on a line in 3-D
    t = torch.randn((50, 1), dtype=torch.float64)
    line = t * torch.tensor([[1.0, -2.0, 0.5]], dtype=torch.float64) + 3
    basis = pca_fit(line, 0.98)
    assert basis.num_components == 1 and abs(basis.retained_energy - 1) < 1e-12

    full = torch.randn((20, 8), dtype=torch.float64)
    assert pca_fit(full, 1.0).num_components == 8
    assert pca_fit(full[:6], 1.0).num_components == 5

    start = time.perf_counter()
    data = torch.randn((200, 100), dtype=torch.float64)
    basis = pca_fit(data, 0.98)
    centered = data - data.mean(dim=0)
    total = (centered ** 2).sum().item()
    residual = ((data - pca_reconstruct(basis, pca_project(basis, data))) ** 2).sum().item()
    assert basis.retained_energy >= 0.98
    assert residual <= 0.02 * total + 1e-9, f'{residual / total=}'

    gram = basis.components @ basis.components.t()
    assert (gram - torch.eye(basis.num_components, dtype=torch.float64)).abs().max().item() < 1e-8
    projected = pca_project(basis, data)
    covariance = projected.t() @ (projected - projected.mean(dim=0))
    off = covariance - torch.diag(covariance.diagonal())
    assert off.abs().max().item() <= 1e-6 * covariance.diagonal().max().item()
    print(f' > Energy, orthonormality and decorrelation OK ({time.perf_counter() - start:.2f} s)')

    assert pca_project(basis, basis.mean).abs().max().item() < 1e-12
    in_span = basis.mean + 2.5 * basis.components[0] - basis.components[3]
    assert (pca_reconstruct(basis, pca_project(basis, in_span)) - in_span).abs().max().item() < 1e-10

    # Covariance and Gram routes agree
    wide = torch.randn((30, 60), dtype=torch.float64)
    a, b = pca_fit(wide, 0.9, 'covariance'), pca_fit(wide, 0.9, 'gram')
    assert a.num_components == b.num_components
    pa, pb = pca_reconstruct(a, pca_project(a, wide)), pca_reconstruct(b, pca_project(b, wide))
    assert (pa - pb).abs().max().item() < 1e-7

    try:
        pca_fit(torch.ones((5, 3), dtype=torch.float64))
        assert False, 'Zero-variance data should be rejected'
    except DegenerateData:
        pass
    try:
        pca_project(basis, torch.zeros(99, dtype=torch.float64))
        assert False, 'Wrong dimensions should be rejected'
    except DimensionMismatch:
        pass
    print(' > Projection, reconstruction and routes OK\n')


if __name__ == '__main__':
    torch.manual_seed(0)
    random.seed(0)

    test_ridge_oracle()
    test_ridge_properties()
    test_pca()
