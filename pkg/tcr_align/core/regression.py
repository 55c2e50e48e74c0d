import torch
from dataclasses import dataclass
from typing import Optional

from ..errors import DegenerateData, DimensionMismatch, SingularSystem


@dataclass(frozen=True, eq=False)
class LinearMap:
    """
    `y = matrix @ x + bias`, with `matrix` of shape `[out_dim, in_dim]`.
    """
    matrix: torch.Tensor
    bias: torch.Tensor

    def __post_init__(self) -> None:
        assert self.matrix.dim() == 2 and self.bias.dim() == 1 and self.matrix.shape[0] == self.bias.shape[0], \
            f'Inconsistent linear map {tuple(self.matrix.shape)} / {tuple(self.bias.shape)}'
        assert bool(torch.isfinite(self.matrix).all()) and bool(torch.isfinite(self.bias).all()), \
            'Linear map has non-finite entries'

    @property
    def in_dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def out_dim(self) -> int:
        return self.matrix.shape[0]

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatch(f'Expected inputs of dimension {self.in_dim}, got {x.shape[-1]}')
        return x @ self.matrix.t() + self.bias


@dataclass(frozen=True, eq=False)
class PcaBasis:
    """
    Mean and orthonormal principal directions (rows of `components`, `[k, in_dim]`).
    """
    mean: torch.Tensor
    components: torch.Tensor
    retained_energy: float

    @property
    def in_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def num_components(self) -> int:
        return self.components.shape[0]


def pca_fit(samples: torch.Tensor, energy: float = 0.98, method: Optional[str] = None) -> PcaBasis:
    """
    Fit the smallest principal subspace keeping at least `energy` of the total variance.
    The covariance matrix is decomposed when `D <= N`, the Gram matrix otherwise.

    Arguments:
        samples: `[N, D]` data matrix, `N >= 2`.
        energy: retained variance fraction in `(0, 1]`.
        method: force `'covariance'` or `'gram'`; automatic by default.

    Returns:
        The fitted basis.
    """
    assert samples.dim() == 2, f'Expected an [N, D] matrix, got {tuple(samples.shape)}'
    assert 0 < energy <= 1, f'Energy fraction {energy} must lie in (0, 1]'
    n, d = samples.shape
    if n < 2:
        raise DegenerateData(f'PCA needs at least 2 samples, got {n}')

    x = samples.to(torch.float64)
    mean = x.mean(dim=0)
    centered = x - mean
    total = (centered ** 2).sum().item()
    if total <= 0:
        raise DegenerateData('Data has zero total variance')

    method = method or ('covariance' if d <= n else 'gram')
    assert method in ('covariance', 'gram'), f'Unknown PCA method {method}'
    if method == 'covariance':
        eigvals, eigvecs = torch.linalg.eigh(centered.t() @ centered)
    else:
        eigvals, eigvecs = torch.linalg.eigh(centered @ centered.t())
    eigvals, eigvecs = eigvals.flip(0).clamp(min=0), eigvecs.flip(1)

    # Numerically-zero directions are never retained, so `k <= rank`
    tol = eigvals[0].item() * max(n, d) * torch.finfo(torch.float64).eps
    rank = max(int((eigvals > tol).sum().item()), 1)
    ratio = eigvals.cumsum(0) / total
    k = int((ratio < energy - 1e-12).sum().item()) + 1
    k = min(k, rank)

    if method == 'covariance':
        components = eigvecs[:, :k].t()
    else:
        components = (centered.t() @ eigvecs[:, :k]) / eigvals[:k].sqrt()
        components = components.t()
    return PcaBasis(mean, components.contiguous(), min(ratio[k - 1].item(), 1.0))


def pca_project(basis: PcaBasis, vector: torch.Tensor) -> torch.Tensor:
    if vector.shape[-1] != basis.in_dim:
        raise DimensionMismatch(f'Expected vectors of dimension {basis.in_dim}, got {vector.shape[-1]}')
    return (vector - basis.mean) @ basis.components.t()


def pca_reconstruct(basis: PcaBasis, coeffs: torch.Tensor) -> torch.Tensor:
    if coeffs.shape[-1] != basis.num_components:
        raise DimensionMismatch(f'Expected {basis.num_components} coefficients, got {coeffs.shape[-1]}')
    return basis.mean + coeffs @ basis.components


def solve_ridge(x: torch.Tensor, y: torch.Tensor, lam: float) -> LinearMap:
    """
    Minimize `sum_i ||A x_i + b - y_i||^2 + lam ||A||_F^2` with an unregularized bias.
    The primal `[D, D]` system is solved when `D <= N`, the dual `[N, N]` one otherwise.

    Arguments:
        x: `[N, D]` inputs.
        y: `[N, M]` targets.
        lam: non-negative ridge weight, positive when the centered inputs are rank-deficient.

    Returns:
        The fitted map, `matrix` of shape `[M, D]`.
    """
    assert x.dim() == 2 and y.dim() == 2, 'Inputs and targets must be matrices'
    if x.shape[0] != y.shape[0]:
        raise DimensionMismatch(f'{x.shape[0]} inputs for {y.shape[0]} targets')
    assert x.shape[0] >= 1 and lam >= 0, f'Invalid problem: N={x.shape[0]}, lambda={lam}'
    n, d = x.shape
    x, y = x.to(torch.float64), y.to(torch.float64)
    x_mean, y_mean = x.mean(dim=0), y.mean(dim=0)
    xc, yc = x - x_mean, y - y_mean

    if lam == 0 and int(torch.linalg.matrix_rank(xc).item()) < d:
        raise SingularSystem(f'Centered inputs are rank-deficient (N={n}, D={d}); a positive lambda is required')

    if d <= n:
        a = torch.linalg.solve(xc.t() @ xc + lam * torch.eye(d, dtype=torch.float64), xc.t() @ yc)
    else:
        a = xc.t() @ torch.linalg.solve(xc @ xc.t() + lam * torch.eye(n, dtype=torch.float64), yc)
    return LinearMap(a.t().contiguous(), y_mean - x_mean @ a)
