"""Image, depth and correspondence metrics used for evaluation."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from . import fileio
from .networks import AvatarCodes, Model
from .synthdata import Dataset, TextureMap

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-x * x / (2 * sigma * sigma))
    return w / w.sum()


def _filter(img, w):
    out = ndimage.correlate1d(img, w, axis=0, mode="reflect")
    return ndimage.correlate1d(out, w, axis=1, mode="reflect")


def ssim_map(a: np.ndarray, b: np.ndarray, size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Per-pixel SSIM of two single-channel images on a [0, 1] range."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    w = gaussian_window(size, sigma)
    mu_a, mu_b = _filter(a, w), _filter(b, w)
    var_a = _filter(a * a, w) - mu_a ** 2
    var_b = _filter(b * b, w) - mu_b ** 2
    cov = _filter(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, size: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM; color images are scored per channel and averaged."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        return float(ssim_map(a, b, size, sigma).mean())
    if a.ndim != 3:
        raise ValueError(f"ssim expects (H, W) or (H, W, C), got {a.shape}")
    return float(np.mean([ssim_map(a[..., c], b[..., c], size, sigma).mean() for c in range(a.shape[2])]))


def _masked(pred, gt, mask):
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"depth maps differ in shape: {pred.shape} vs {gt.shape}")
    mask = np.ones(pred.shape, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("depth metric over an empty mask")
    return pred[mask] - gt[mask]


def depth_l1(pred, gt, mask=None) -> float:
    return float(np.mean(np.abs(_masked(pred, gt, mask))))


def depth_rmse(pred, gt, mask=None) -> float:
    return float(np.sqrt(np.mean(_masked(pred, gt, mask) ** 2)))


def masked_image_l2(pred, gt, mask) -> float:
    """Mean squared color error over masked pixels (channels summed)."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("image metric over an empty mask")
    d = np.asarray(pred, np.float64)[mask] - np.asarray(gt, np.float64)[mask]
    return float(np.mean(np.sum(d * d, axis=-1)))


# ---- correspondence metrics ---------------------------------------------------

def _batched(fn, x, chunk=32768):
    return np.concatenate([fn(x[s:s + chunk]) for s in range(0, len(x), chunk)]) if len(x) else x


def uv_cycle_error_map(model: Model, codes: AvatarCodes, resolution: int = 128) -> np.ndarray:
    """Texel value ``||uv - g(g^-1(uv))||`` over a ``resolution^2`` grid of texel centers."""
    c = codes.detach()
    uv = TextureMap.texel_centers(resolution, resolution).astype(np.float32)
    back = _batched(lambda q: model.uv(model.inverse_uv(q, c).data, c).data, uv)
    return np.linalg.norm(back - uv, axis=1).reshape(resolution, resolution)


def seam_band(resolution: int, texels: int = 2) -> np.ndarray:
    """Mask of texels within ``texels`` of the wrap-around border, where the cycle is ill-posed."""
    band = np.zeros((resolution, resolution), bool)
    band[:texels] = band[-texels:] = True
    band[:, :texels] = band[:, -texels:] = True
    return band


def cycle_texture_error(model: Model, codes: AvatarCodes, resolution: int = 128, seam_texels: int = 2
                        ) -> tuple[float, np.ndarray]:
    """Mean ``||h(uv) - h(g(g^-1(uv)))||`` over texels away from the seam, plus the full map."""
    c = codes.detach()
    uv = TextureMap.texel_centers(resolution, resolution).astype(np.float32)
    learned = _batched(lambda q: model.color(q, c).data, uv)
    cycled_uv = _batched(lambda q: model.uv(model.inverse_uv(q, c).data, c).data, uv)
    cycled = _batched(lambda q: model.color(q, c).data, cycled_uv)
    err = np.linalg.norm(learned - cycled, axis=1).reshape(resolution, resolution)
    keep = ~seam_band(resolution, seam_texels)
    return float(err[keep].mean()), err


def surface_cycle_error(model: Model, codes: AvatarCodes, points: np.ndarray) -> float:
    """Mean ``||g^-1(g(x)) - x||`` over surface points."""
    c = codes.detach()
    p = np.asarray(points, np.float32)
    back = _batched(lambda q: model.inverse_uv(model.uv(q, c).data, c).data, p)
    return float(np.mean(np.linalg.norm(back - p, axis=1)))


def landmark_uv_error(model: Model, codes: AvatarCodes, points: np.ndarray, uvs: np.ndarray) -> float:
    """Mean ``||g(x) - uv_target||`` at landmark points."""
    pred = model.uv(np.asarray(points, np.float32), codes.detach()).data
    return float(np.mean(np.linalg.norm(pred - uvs, axis=1)))


def texture_error(model: Model, codes: AvatarCodes, points: np.ndarray, colors: np.ndarray) -> float:
    """Mean ``||h(g(x)) - color(x)||`` over surface points."""
    c = codes.detach()
    p = np.asarray(points, np.float32)
    pred = _batched(lambda q: model.color(model.uv(q, c).data, c).data, p)
    return float(np.mean(np.linalg.norm(pred - colors, axis=1)))


def evaluate_correspondence(model: Model, dataset: Dataset, max_points: int = 1024,
                            cycle_resolution: int = 64) -> dict[str, float]:
    """Dataset means of the four correspondence metrics, over every training sample."""
    rows = []
    for smp in dataset.samples:
        codes = model.codes_for(smp.subject, smp.expression)
        pts = smp.points[:max_points]
        rows.append((
            surface_cycle_error(model, codes, pts),
            landmark_uv_error(model, codes, smp.landmark_points, smp.landmark_uvs),
            texture_error(model, codes, pts, smp.colors[:max_points]),
            cycle_texture_error(model, codes, cycle_resolution)[0],
        ))
    means = np.mean(rows, axis=0)
    return dict(uv_cycle=float(means[0]), landmark_uv=float(means[1]),
                texture=float(means[2]), cycle_texture=float(means[3]))


def write_heatmap(path, values: np.ndarray, vmax: float | None = None) -> None:
    """Black-red-yellow-white ramp over ``[0, vmax]``."""
    v = np.asarray(values, np.float64)
    vmax = vmax or max(float(v.max()), 1e-12)
    s = np.clip(v / vmax, 0, 1)
    rgb = np.stack([np.clip(3 * s, 0, 1), np.clip(3 * s - 1, 0, 1), np.clip(3 * s - 2, 0, 1)], axis=-1)
    fileio.write_png(path, rgb)
