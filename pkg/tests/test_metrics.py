import math

import numpy as np
import pytest

from morphsdf import fileio
from morphsdf.metrics import (cycle_texture_error, depth_l1, depth_rmse, evaluate_correspondence,
                              gaussian_window, masked_image_l2, seam_band, ssim, uv_cycle_error_map,
                              write_heatmap)
from morphsdf.synthdata import make_dataset

from conftest import tiny_model


def _ssim_oracle(a, b):
    """Direct per-pixel loops: 11x11 Gaussian (sigma 1.5), half-sample symmetric padding."""
    k = [math.exp(-((i - 5) ** 2) / (2 * 1.5**2)) for i in range(11)]
    s = sum(k)
    k = [v / s for v in k]
    pa, pb = np.pad(a, 5, mode="symmetric"), np.pad(b, 5, mode="symmetric")
    h, w = a.shape
    total = 0.0
    for y in range(h):
        for x in range(w):
            mu_a = mu_b = saa = sbb = sab = 0.0
            for dy in range(11):
                for dx in range(11):
                    wt = k[dy] * k[dx]
                    va, vb = pa[y + dy, x + dx], pb[y + dy, x + dx]
                    mu_a += wt * va
                    mu_b += wt * vb
                    saa += wt * va * va
                    sbb += wt * vb * vb
                    sab += wt * va * vb
            va_, vb_, cov = saa - mu_a**2, sbb - mu_b**2, sab - mu_a * mu_b
            c1, c2 = 0.01**2, 0.03**2
            total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (va_ + vb_ + c2))
    return total / (h * w)


def test_gaussian_window():
    w = gaussian_window()
    assert len(w) == 11 and w.sum() == pytest.approx(1.0) and np.argmax(w) == 5


def test_ssim_identity(rng):
    a = rng.uniform(0, 1, (16, 12, 3))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_direct_formula(rng):
    a = rng.uniform(0, 1, (8, 8))
    b = np.clip(a + rng.normal(0, 0.1, (8, 8)), 0, 1)
    assert abs(ssim(a, b) - _ssim_oracle(a, b)) < 1e-6


def test_ssim_color_is_channel_mean(rng):
    a, b = rng.uniform(0, 1, (8, 8, 3)), rng.uniform(0, 1, (8, 8, 3))
    assert ssim(a, b) == pytest.approx(np.mean([_ssim_oracle(a[..., c], b[..., c]) for c in range(3)]), abs=1e-6)


def test_ssim_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(np.zeros((4, 4)), np.zeros((4, 5)))


def test_depth_metrics(rng):
    d = rng.uniform(1, 3, (6, 6))
    assert depth_l1(d, d) == 0 and depth_rmse(d, d) == 0
    mask = np.zeros((6, 6), bool)
    mask[1, 1] = mask[2, 3] = True
    e = d.copy()
    e[1, 1] += 0.3
    e[2, 3] -= 0.4
    e[0, 0] += 9  # outside the mask
    assert depth_l1(e, d, mask) == pytest.approx(0.35)
    assert depth_rmse(e, d, mask) == pytest.approx(math.sqrt((0.09 + 0.16) / 2))
    with pytest.raises(ValueError):
        depth_l1(d, d, np.zeros((6, 6), bool))


def test_masked_image_l2():
    a = np.zeros((2, 2, 3))
    b = np.ones((2, 2, 3))
    m = np.array([[True, False], [False, False]])
    assert masked_image_l2(a, b, m) == 3.0


def test_seam_band():
    band = seam_band(8, 2)
    assert band.sum() == 64 - 16 and not band[2:6, 2:6].any()


@pytest.fixture(scope="module")
def model():
    return tiny_model(seed=0, dtype=np.float32, num_subjects=1, num_expressions=2)


def test_cycle_map_matches_direct(model):
    c = model.codes_for(0, 0)
    emap = uv_cycle_error_map(model, c, 4)
    uv = np.array([[(1 + 0.5) / 4, (2 + 0.5) / 4]], np.float32)
    back = model.uv(model.inverse_uv(uv, c).data, c).data
    assert emap[2, 1] == pytest.approx(float(np.linalg.norm(back - uv)), rel=1e-6)
    mean, full = cycle_texture_error(model, c, 8)
    assert full.shape == (8, 8) and mean == pytest.approx(full[~seam_band(8, 2)].mean())


def test_evaluate_correspondence_keys(model):
    ds = make_dataset(1, 2, 1, seed=0, image_size=8, num_points=32, texture_resolution=8)
    out = evaluate_correspondence(model, ds, cycle_resolution=8)
    assert set(out) == {"uv_cycle", "landmark_uv", "texture", "cycle_texture"}
    assert all(np.isfinite(v) and v >= 0 for v in out.values())


def test_heatmap(tmp_path):
    v = np.linspace(0, 1, 16).reshape(4, 4)
    write_heatmap(tmp_path / "h.png", v)
    img = fileio.read_png(tmp_path / "h.png")
    assert img.shape[:2] == (4, 4)
    np.testing.assert_array_equal(img[0, 0, :3], 0)
    np.testing.assert_array_equal(img[3, 3, :3], 1)
