"""Training and inversion objectives.

Each loss is a pure function of network outputs (Tensors, possibly on a
tape) and ground truth arrays, returning a scalar Tensor.  Model-level
wiring (which network produced which output) lives in the trainer and the
inversion module so the same terms can be checked against analytic fields.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TERMS = ("surface", "eikonal", "normal", "uv", "tex", "img_l2", "img_percep", "reg",
         "landmark", "silhouette", "overshoot", "mvc", "landmark2d")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term '{term}' ({value})")
        self.term = term


@dataclass
class LossWeights:
    surface: float = 1.0
    eikonal: float = 0.1
    normal: float = 1.0
    uv: float = 0.5
    tex: float = 1.0
    img_l2: float = 1.0
    img_percep: float = 0.5
    reg: float = 1e-4
    landmark: float = 1.0
    silhouette: float = 0.1
    overshoot: float = 0.1
    mvc: float = 0.0
    landmark2d: float = 1.0

    def __post_init__(self):
        for k, v in self.to_dict().items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")

    def to_dict(self) -> dict[str, float]:
        return {k: float(v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        unknown = set(d) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss weights: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def replace(self, **kw) -> "LossWeights":
        return dataclasses.replace(self, **kw)


@dataclass
class LossReport:
    terms: dict[str, tuple[float, float, float]] = field(default_factory=dict)  # raw, weight, weighted
    total: float = 0.0

    def raw(self, name: str) -> float:
        return self.terms[name][0]

    def line(self, **prefix) -> str:
        """One ``key=value`` log line (step first, then each term's raw value, then total)."""
        parts = [f"{k}={v}" for k, v in prefix.items()]
        parts += [f"{k}={raw:.6g}" for k, (raw, _, _) in self.terms.items()]
        parts.append(f"total={self.total:.6g}")
        return " ".join(parts)


def combine(terms: dict[str, Tensor], weights: LossWeights) -> tuple[Tensor | None, LossReport]:
    """Weighted sum of the nonzero-weight terms.

    Zero-weight terms are left out of both the total and the report, so they
    cannot contribute a gradient.  Raises :class:`NonFiniteLoss` naming the
    first offending term.
    """
    report = LossReport()
    total = None
    wd = weights.to_dict()
    for name, value in terms.items():
        w = wd[name]
        if w == 0.0:
            continue
        raw = float(value.data)
        if not (math.isfinite(raw) and math.isfinite(raw * w)):
            raise NonFiniteLoss(name, raw * w)
        weighted = ad.mul(value, np.float32(w))
        total = weighted if total is None else ad.add(total, weighted)
        report.terms[name] = (raw, w, raw * w)
    report.total = float(total.data) if total is not None else 0.0
    return total, report


def _sq_rows(diff: Tensor) -> Tensor:
    """Squared Euclidean norm of each row."""
    return ad.sum_(ad.square(diff), axis=-1)


def _nonempty(x, what: str):
    if x.shape[0] == 0:
        raise ValueError(f"{what}: empty point set")


# ---- geometry ------------------------------------------------------------

def surface_loss(values: Tensor) -> Tensor:
    """Mean |f| over surface samples."""
    _nonempty(values, "surface_loss")
    return ad.mean(ad.abs_(values))


def eikonal_loss(gradients: Tensor) -> Tensor:
    """Mean of (|grad f| - 1)^2 over the sample points."""
    _nonempty(gradients, "eikonal_loss")
    return ad.mean(ad.square(ad.sub(ad.norm(gradients, axis=-1, eps=1e-12), 1.0)))


def normal_loss(gradients: Tensor, normals: np.ndarray) -> Tensor:
    """Mean squared distance between SDF gradients and ground-truth normals."""
    _nonempty(gradients, "normal_loss")
    return ad.mean(_sq_rows(ad.sub(gradients, normals)))


def eikonal_points(rng: np.random.Generator, surface: np.ndarray, count: int,
                   bound: float = 1.5, sigma: float = 0.05) -> np.ndarray:
    """Half uniform in the bounding box, half jittered surface samples."""
    n_box = count // 2
    box = rng.uniform(-bound, bound, (n_box, 3))
    pick = rng.integers(0, len(surface), count - n_box)
    near = surface[pick] + rng.normal(0, sigma, (count - n_box, 3))
    return np.vstack([box, near]).astype(np.float32)


# ---- uv parameterization and texture ------------------------------------

def uv_cycle_loss(points: np.ndarray, reconstructed: Tensor) -> Tensor:
    """Mean ||x - ginv(g(x))||^2; ``reconstructed`` is ginv(g(points))."""
    _nonempty(reconstructed, "uv_cycle_loss")
    return ad.mean(_sq_rows(ad.sub(reconstructed, points)))


def landmark_uv_loss(pred_uv: Tensor, target_uv: np.ndarray, points: np.ndarray,
                     reconstructed: Tensor) -> Tensor:
    """Mean over landmarks of uv error plus cycle error."""
    _nonempty(pred_uv, "landmark_uv_loss")
    per = ad.add(_sq_rows(ad.sub(pred_uv, target_uv)), _sq_rows(ad.sub(reconstructed, points)))
    return ad.mean(per)


def texture_loss(pred_rgb: Tensor, target_rgb: np.ndarray) -> Tensor:
    """Mean squared RGB error (summed over channels)."""
    _nonempty(pred_rgb, "texture_loss")
    return ad.mean(_sq_rows(ad.sub(pred_rgb, target_rgb)))


def latent_reg(codes) -> Tensor:
    """Sum of squared norms of the geometry, color and expression codes."""
    parts = [ad.sum_(ad.square(ad._wrap(getattr(codes, k)))) for k in ("geom", "color", "expr")]
    return ad.add(ad.add(parts[0], parts[1]), parts[2])


# ---- image terms -----------------------------------------------------------

def _pool2(img: Tensor) -> Tensor:
    h, w, c = img.shape
    return ad.mean(ad.reshape(img, (h // 2, 2, w // 2, 2, c)), axis=(1, 3))


def _upsample2(img: Tensor) -> Tensor:
    h, w, c = img.shape
    x = ad.broadcast_to(ad.reshape(img, (h, 1, w, 1, c)), (h, 2, w, 2, c))
    return ad.reshape(x, (2 * h, 2 * w, c))


def _pool2_np(a: np.ndarray) -> np.ndarray:
    h, w = a.shape[:2]
    return a.reshape(h // 2, 2, w // 2, 2, *a.shape[2:]).mean(axis=(1, 3))


def pyramid_levels(height: int, width: int, max_levels: int = 3) -> int:
    levels = 1
    while levels < max_levels and height % 2**levels == 0 and width % 2**levels == 0:
        levels += 1
    return levels


def laplacian_pyramid(img: Tensor, levels: int) -> list[Tensor]:
    """Band-pass levels (average-pool down, nearest up) followed by the low-pass residual."""
    bands = []
    cur = img
    for _ in range(levels - 1):
        low = _pool2(cur)
        bands.append(ad.sub(cur, _upsample2(low)))
        cur = low
    bands.append(cur)
    return bands


def _masked(img, mask: np.ndarray) -> Tensor:
    return ad.mul(ad._wrap(img), mask[..., None].astype(np.float32))


def image_l2_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Squared RGB error summed over channels, averaged over masked pixels."""
    count = int(mask.sum())
    if count == 0:
        return Tensor(np.float32(0.0))
    diff = ad.sub(_masked(pred, mask), _masked(target, mask))
    return ad.mul(ad.sum_(ad.square(diff)), np.float32(1.0 / count))


def perceptual_proxy_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray, max_levels: int = 3) -> Tensor:
    """Squared difference of Laplacian pyramids of the masked images.

    Each level's squared error is normalized by the number of pixels at that
    level with any mask coverage, then the levels are summed.  A structural
    stand-in for a learned perceptual metric, not an approximation of one.
    """
    h, w = mask.shape
    levels = pyramid_levels(h, w, max_levels)
    a = laplacian_pyramid(_masked(pred, mask), levels)
    b = laplacian_pyramid(_masked(target, mask), levels)
    m = mask.astype(np.float64)
    total = None
    for la, lb in zip(a, b):
        count = int((m > 0).sum())
        if count:
            term = ad.mul(ad.sum_(ad.square(ad.sub(la, lb))), np.float32(1.0 / count))
            total = term if total is None else ad.add(total, term)
        m = _pool2_np(m) if m.shape[0] % 2 == 0 and m.shape[1] % 2 == 0 else m
    return total if total is not None else Tensor(np.float32(0.0))


def image_loss(pred: Tensor, target: np.ndarray, mask: np.ndarray, percep_weight: float = 1.0) -> Tensor:
    return ad.add(image_l2_loss(pred, target, mask),
                  ad.mul(perceptual_proxy_loss(pred, target, mask), np.float32(percep_weight)))


def silhouette_loss(closest_values: Tensor) -> Tensor:
    """Sum of f at the closest-approach points of rays inside the target mask
    but outside the predicted one; zero when there are none."""
    if closest_values is None or closest_values.shape[0] == 0:
        return Tensor(np.float32(0.0))
    return ad.sum_(closest_values)


def overshoot_loss(deepest_values: Tensor) -> Tensor:
    """Minus the sum of f at the deepest points of rays that hit outside the
    target mask, so the shape cannot grow past the mask unopposed."""
    if deepest_values is None or deepest_values.shape[0] == 0:
        return Tensor(np.float32(0.0))
    return ad.neg(ad.sum_(deepest_values))


def silhouette_pixels(target_mask: np.ndarray, pred_mask: np.ndarray) -> np.ndarray:
    """Flat indices of pixels inside the target mask that the prediction misses."""
    if target_mask.shape != pred_mask.shape:
        raise ValueError("silhouette: mask extents differ")
    return np.flatnonzero(target_mask.reshape(-1) & ~pred_mask.reshape(-1))


def overshoot_pixels(target_mask: np.ndarray, pred_mask: np.ndarray) -> np.ndarray:
    """Flat indices of predicted hits outside the target mask."""
    return silhouette_pixels(pred_mask, target_mask)


def downsample_to(img, size: int = 8) -> Tensor:
    """Block average of an (H, W, C) image down to (size, size, C)."""
    img = ad._wrap(img)
    h, w, c = img.shape
    if h % size or w % size:
        raise ValueError(f"image {h}x{w} not divisible into {size}x{size} blocks")
    return ad.mean(ad.reshape(img, (size, h // size, size, w // size, c)), axis=(1, 3))


def multiview_consistency_loss(img: Tensor, other: Tensor, size: int = 8) -> Tensor:
    """Identity-similarity stand-in: squared error of block-averaged renders."""
    a, b = downsample_to(img, size), downsample_to(other, size)
    return ad.mean(ad.sum_(ad.square(ad.sub(a, b)), axis=-1))


def project(points: Tensor, camera) -> Tensor:
    """Differentiable pinhole projection of (K, 3) world points to pixels (K, 2)."""
    pc = ad.add(ad.matmul(points, camera.R.T.astype(np.float32)), camera.t.astype(np.float32))
    z = ad.getitem(pc, (slice(None), slice(2, 3)))
    xy = ad.div(ad.getitem(pc, (slice(None), slice(0, 2))), z)
    return ad.add(ad.mul(xy, np.float32(camera.focal)), np.asarray(camera.principal, np.float32))


def landmark_2d_loss(detected: np.ndarray, points: Tensor, camera) -> Tensor:
    """Mean over landmarks of squared pixel error divided by the squared image diagonal."""
    _nonempty(points, "landmark_2d_loss")
    err = _sq_rows(ad.sub(project(points, camera), np.asarray(detected, np.float32)))
    return ad.mul(ad.mean(err), np.float32(1.0 / camera.diagonal**2))
