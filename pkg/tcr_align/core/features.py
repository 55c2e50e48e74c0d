import functools
import math
import torch
import torch.nn.functional as F
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from .geometry import AnnotationSchema, Shape
from .utils import ceil_div, get_chunk_size
from ..errors import EmptyImage, SchemaMismatch

# SIFT layout: 4x4 spatial cells, 8 orientation bins
NUM_CELLS = 4
NUM_BINS = 8
DESCRIPTOR_DIM = NUM_CELLS * NUM_CELLS * NUM_BINS
CLIP_VALUE = 0.2
PATCH_PX = 20


@dataclass(frozen=True, eq=False)
class GrayImage:
    """
    Row-major grayscale raster, `[height, width]` float64 intensities in `[0, 1]`.
    """
    pixels: torch.Tensor

    def __post_init__(self) -> None:
        pixels = torch.as_tensor(self.pixels, dtype=torch.float64).detach()
        if pixels.dim() != 2 or pixels.numel() == 0:
            raise EmptyImage(f'Expected a non-empty [height, width] raster, got {tuple(pixels.shape)}')
        if not bool(torch.isfinite(pixels).all()) or pixels.min().item() < 0 or pixels.max().item() > 1:
            raise ValueError('Gray intensities must be finite and within [0, 1]')
        object.__setattr__(self, 'pixels', pixels.contiguous())

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: torch.Tensor

    def __post_init__(self) -> None:
        assert self.values.dim() == 1 and self.values.numel() % DESCRIPTOR_DIM == 0, \
            f'Feature length {self.values.numel()} is not a multiple of {DESCRIPTOR_DIM}'

    @property
    def num_landmarks(self) -> int:
        return self.values.numel() // DESCRIPTOR_DIM

    def block(self, i: int) -> torch.Tensor:
        return self.values[i * DESCRIPTOR_DIM:(i + 1) * DESCRIPTOR_DIM]


def to_gray(rgb_image) -> GrayImage:
    """
    Convert an 8-bit RGB (or already single-channel) raster to luminance in `[0, 1]`.

    Arguments:
        rgb_image: array-like of shape `[h, w, 3]`, `[h, w, 4]` (alpha ignored) or `[h, w]`, values 0..255.

    Returns:
        The gray image, `0.299 R + 0.587 G + 0.114 B` scaled by `1 / 255`.
    """
    image = torch.as_tensor(rgb_image).to(torch.float64)
    if image.numel() == 0:
        raise EmptyImage('Cannot convert an empty image')
    if image.dim() == 2:
        return GrayImage(image / 255.0)
    assert image.dim() == 3 and image.shape[2] in (3, 4), f'Unsupported image layout {tuple(image.shape)}'
    weights = torch.tensor([0.299, 0.587, 0.114], dtype=torch.float64)
    return GrayImage(((image[..., :3] * weights).sum(dim=-1) / 255.0).clamp(0.0, 1.0))


def bilinear(pixels: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor,
             image_index: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Clamped bilinear sampling. Pixel `(row i, column j)` sits at `x = j, y = i`.

    Arguments:
        pixels: `[h, w]` raster, or `[b, h, w]` stack when `image_index` is given.
        xs, ys: sample coordinates of identical shape `[r, ...]`.
        image_index: optional `[r]` tensor selecting the raster of each leading row.

    Returns:
        Samples of the same shape as `xs`.
    """
    h, w = pixels.shape[-2:]
    xs = xs.clamp(0, w - 1)
    ys = ys.clamp(0, h - 1)
    x0, y0 = xs.floor(), ys.floor()
    fx, fy = xs - x0, ys - y0
    x0, y0 = x0.long(), y0.long()
    x1, y1 = (x0 + 1).clamp(max=w - 1), (y0 + 1).clamp(max=h - 1)

    flat = pixels.reshape(-1)
    base = 0
    if image_index is not None:
        assert pixels.dim() == 3, 'A raster stack is required with `image_index`'
        base = (image_index.long() * (h * w)).reshape(-1, *([1] * (xs.dim() - 1)))
    v00, v01 = flat[base + y0 * w + x0], flat[base + y0 * w + x1]
    v10, v11 = flat[base + y1 * w + x0], flat[base + y1 * w + x1]
    return (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy


def sample_bilinear(img: GrayImage, point: Sequence[float]) -> float:
    xs = torch.tensor([float(point[0])], dtype=torch.float64)
    ys = torch.tensor([float(point[1])], dtype=torch.float64)
    return bilinear(img.pixels, xs, ys).item()


@functools.lru_cache(maxsize=None)
def get_patch_layout(patch_px: int):
    """
    Sampling offsets and spatial weights of a patch.

    Returns:
        `offsets`: `[patch_px + 2]` offsets of the sampling grid (one extra pixel each side for central differences),
        `spatial`: `[16, patch_px ** 2]` Gaussian-weighted bilinear cell assignment of every inner grid position.
    """
    assert patch_px > 0 and patch_px % 2 == 0, f'Patch size must be positive and even, got {patch_px}'
    half, cell, sigma = patch_px / 2, patch_px / NUM_CELLS, patch_px / 2
    offsets = torch.arange(patch_px + 2, dtype=torch.float64) - (half + 0.5)
    inner = offsets[1:-1]

    spatial = torch.zeros((NUM_CELLS * NUM_CELLS, patch_px * patch_px), dtype=torch.float64)
    for i, oy in enumerate(inner.tolist()):
        for j, ox in enumerate(inner.tolist()):
            gauss = math.exp(-(ox * ox + oy * oy) / (2 * sigma * sigma))
            cy, cx = (oy + half) / cell - 0.5, (ox + half) / cell - 0.5
            y0, x0 = math.floor(cy), math.floor(cx)
            for ty, wy in ((y0, 1 - (cy - y0)), (y0 + 1, cy - y0)):
                for tx, wx in ((x0, 1 - (cx - x0)), (x0 + 1, cx - x0)):
                    if 0 <= ty < NUM_CELLS and 0 <= tx < NUM_CELLS:
                        spatial[ty * NUM_CELLS + tx, i * patch_px + j] += gauss * wy * wx
    return offsets, spatial


def normalize_descriptor(raw: torch.Tensor, clip: float = CLIP_VALUE,
                         hook: Optional[Callable[[torch.Tensor], None]] = None) -> torch.Tensor:
    """
    L2-normalize, clip entries at `clip`, and re-normalize the last dimension.
    Descriptors without gradient energy stay zero.

    Arguments:
        raw: `[..., 128]` raw histograms.
        clip: the clip value.
        hook: optional callback receiving the clipped, not yet re-normalized, descriptors.

    Returns:
        Normalized descriptors of the same shape.
    """
    norm = torch.linalg.vector_norm(raw, dim=-1, keepdim=True)
    valid = norm > 1e-10
    unit = torch.where(valid, raw / torch.where(valid, norm, torch.ones_like(norm)), torch.zeros_like(raw))
    clipped = unit.clamp(max=clip)
    if hook is not None:
        hook(clipped)
    norm = torch.linalg.vector_norm(clipped, dim=-1, keepdim=True)
    return torch.where(valid, clipped / torch.where(valid, norm, torch.ones_like(norm)), torch.zeros_like(raw))


def describe_patches(grid: torch.Tensor, patch_px: int) -> torch.Tensor:
    """
    Fixed-orientation SIFT histograms of sampled patches.

    Arguments:
        grid: `[r, patch_px + 2, patch_px + 2]` intensities sampled on the patch grid.
        patch_px: the patch size.

    Returns:
        `[r, 128]` normalized descriptors, cell-row major, then cell column, then orientation.
    """
    _, spatial = get_patch_layout(patch_px)
    gx = (grid[:, 1:-1, 2:] - grid[:, 1:-1, :-2]) / 2
    gy = (grid[:, 2:, 1:-1] - grid[:, :-2, 1:-1]) / 2
    gx, gy = gx.reshape(grid.shape[0], -1), gy.reshape(grid.shape[0], -1)

    magnitude = torch.hypot(gx, gy)
    theta = torch.remainder(torch.atan2(gy, gx), 2 * math.pi)
    position = theta * (NUM_BINS / (2 * math.pi))
    lower = position.floor()
    frac = position - lower
    lower = lower.long() % NUM_BINS
    upper = (lower + 1) % NUM_BINS
    orientation = F.one_hot(lower, NUM_BINS).to(torch.float64) * (1 - frac).unsqueeze(-1) + \
        F.one_hot(upper, NUM_BINS).to(torch.float64) * frac.unsqueeze(-1)

    # `[16, p] @ [r, p, 8]` accumulates every sample into its (up to) 4 cells
    hist = torch.matmul(spatial, orientation * magnitude.unsqueeze(-1))
    return normalize_descriptor(hist.reshape(grid.shape[0], DESCRIPTOR_DIM))


def sift_at(img: GrayImage, center: Sequence[float], patch_px: int = PATCH_PX) -> torch.Tensor:
    coords = torch.tensor([[float(center[0])], [float(center[1])]], dtype=torch.float64)
    return extract_features_batch(img.pixels, coords.unsqueeze(0), patch_px=patch_px)[0]


def extract_features_batch(pixels: torch.Tensor, coords: torch.Tensor,
                           image_index: Optional[torch.Tensor] = None, patch_px: int = PATCH_PX) -> torch.Tensor:
    """
    Shape-indexed features of many shape estimates at once.

    Arguments:
        pixels: a `[h, w]` raster shared by all rows, or a `[b, h, w]` stack used with `image_index`.
        coords: `[m, 2, n]` landmark estimates.
        image_index: `[m]` raster index of every row, required for stacks.
        patch_px: descriptor patch size.

    Returns:
        `[m, n * 128]` features, landmarks in schema order.
    """
    assert coords.dim() == 3 and coords.shape[1] == 2, f'Expected [m, 2, n] coordinates, got {tuple(coords.shape)}'
    if pixels.dim() == 3:
        assert image_index is not None and image_index.numel() == coords.shape[0]
    m, _, n = coords.shape
    offsets, _ = get_patch_layout(patch_px)
    q = offsets.numel()

    out = torch.empty((m, n * DESCRIPTOR_DIM), dtype=torch.float64)
    chunk = get_chunk_size()
    for i in range(ceil_div(m, chunk)):
        rows = slice(i * chunk, min((i + 1) * chunk, m))
        c = coords[rows]
        r = c.shape[0]
        xs = (c[:, 0, :, None, None] + offsets[None, None, None, :]).expand(r, n, q, q)
        ys = (c[:, 1, :, None, None] + offsets[None, None, :, None]).expand(r, n, q, q)
        index = None if image_index is None else image_index[rows]
        grid = bilinear(pixels, xs.reshape(r, -1), ys.reshape(r, -1), index)
        out[rows] = describe_patches(grid.reshape(r * n, q, q), patch_px).reshape(r, -1)
    return out


def extract_features(img: GrayImage, shape: Shape, schema: Optional[AnnotationSchema] = None,
                     patch_px: int = PATCH_PX) -> FeatureVector:
    """
    Concatenated SIFT descriptors at every landmark of `shape`, in schema order.
    """
    if schema is not None and shape.schema != schema:
        raise SchemaMismatch(f'Features requested for schema {schema.name!r}, shape is {shape.schema.name!r}')
    return FeatureVector(extract_features_batch(img.pixels, shape.coords.unsqueeze(0), patch_px=patch_px)[0])
