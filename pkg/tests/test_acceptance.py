"""Acceptance suite: one PASS/FAIL line per criterion on the terminal.

The default ``fast`` profile trains a 4x2 dataset with 4x128 networks and
doubles the multi-subject and inversion thresholds.  ``MORPHSDF_ACCEPTANCE=full``
runs the 32x8 dataset with default networks and schedules (hours on one core).
"""

import hashlib
import os
import time

import numpy as np
import pytest

from morphsdf import losses as L
from morphsdf import metrics, synthdata, trainer
from morphsdf.assets import (animate_codes, animate_expression, assign_uvs, bake_texture, export_asset,
                             extract_mesh, import_texture, marching_cubes, read_obj, transfer_attribute)
from morphsdf.autodiff import Tensor
from morphsdf.camera import Camera
from morphsdf.inversion import (InversionOptions, finetune_weights, landmark_error, mean_init, optimize_latents,
                                synthetic_input)
from morphsdf.networks import AvatarCodes
from morphsdf.renderer import bound_rays, render_image, sphere_trace
from morphsdf.synthdata import TextureMap

from conftest import tiny_model
from test_losses import FD_CASES, _codes, _fd, _image_fd, _pts
from test_metrics import _ssim_oracle

PROFILE = os.environ.get("MORPHSDF_ACCEPTANCE", "fast")
FAST = PROFILE != "full"
RELAX = 2.0 if FAST else 1.0


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number} [{PROFILE}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail
    return emit


def _digest(params):
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


# ---- 1. gradients against finite differences ---------------------------------------

SECOND_ORDER = {"eikonal", "normal"}


def test_1_autodiff_oracle(report, monkeypatch):
    t0 = time.time()
    model = tiny_model(seed=4)
    errs = {}
    for term, (names, fn) in FD_CASES.items():
        p = _pts(7, 6)
        errs[term] = _fd(model, lambda v: fn(model, v, _codes(model, v), p), names)
    p = np.random.default_rng(8).uniform(-1, 1, (5, 3))
    errs["silhouette"] = _fd(model, lambda v: L.silhouette_loss(model.sdf(p, _codes(model, v), v)),
                             ["f.0.W", "f.2.b"])
    errs["overshoot"] = _fd(model, lambda v: L.overshoot_loss(model.sdf(p, _codes(model, v), v)),
                            ["f.1.W", "latent.geom"])
    target = np.random.default_rng(5).uniform(0, 1, (8, 8, 3))
    mask = np.ones((8, 8), bool)
    other = np.random.default_rng(6).uniform(0, 1, (8, 8, 3))
    errs["img_l2"] = _image_fd(model, monkeypatch, lambda img: L.image_l2_loss(img, target, mask),
                               ["f.2.b", "h.1.W", "g.1.b"])
    errs["img_percep"] = _image_fd(model, monkeypatch, lambda img: L.perceptual_proxy_loss(img, target, mask),
                                   ["f.2.b", "h.1.W"])
    errs["mvc"] = _image_fd(model, monkeypatch, lambda img: L.multiview_consistency_loss(img, other, 4),
                            ["h.2.W", "f.1.W"])
    elapsed = time.time() - t0
    bad = [k for k, e in errs.items() if e >= (1e-3 if k in SECOND_ORDER else 1e-4)]
    worst1 = max(e for k, e in errs.items() if k not in SECOND_ORDER)
    worst2 = max(errs[k] for k in SECOND_ORDER)
    report(1, "autodiff oracle", not bad and elapsed < 60,
           f"{len(errs)} terms, max rel err first-order {worst1:.1e} (<1e-4), "
           f"eikonal/normal {worst2:.1e} (<1e-3), {elapsed:.1f}s (<60s)" + (f", failing {bad}" if bad else ""))


# ---- 2. sphere tracing against the closed form ---------------------------------------

def test_2_sphere_tracing_oracle(report):
    rng = np.random.default_rng(0)
    n = 10**4
    o = rng.normal(size=(n, 3))
    o *= (3.0 / np.linalg.norm(o, axis=1))[:, None]
    d = rng.uniform(-1.2, 1.2, (n, 3)) - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    tr = sphere_trace(bound_rays(o, d), lambda x: np.linalg.norm(x, axis=1) - 1.0)
    b = np.sum(o * d, axis=1)
    disc = b * b - 8.0
    closest = np.sqrt(np.maximum(9.0 - b * b, 0.0))
    both = tr.hit & (disc > 0)
    t_exact = -b[both] - np.sqrt(disc[both])
    point_err = np.abs(tr.t[both] - t_exact).max()  # unit directions: |dt| is the point error
    # hits on rays that only graze must still land within 1e-3 of the surface
    soft = tr.hit & (disc <= 0)
    soft_err = np.abs(np.linalg.norm(o[soft] + tr.t[soft, None] * d[soft], axis=1) - 1).max(initial=0.0)
    missed = ~tr.hit & (disc > 0)
    missed_depth = (1 - closest[missed]).max(initial=0.0)
    ok = point_err < 1e-3 and soft_err < 1e-3 and missed_depth < 1e-3 and tr.steps.max() <= 50
    report(2, "sphere tracing oracle", ok,
           f"{both.sum()} hits, max point err {point_err:.1e} (<1e-3); {soft.sum()} grazing hits within "
           f"{soft_err:.1e}; {missed.sum()} tangent misses within {missed_depth:.1e}; max steps {tr.steps.max()} (<=50)")


# ---- 3. single-shape fit ----------------------------------------------------------------

def test_3_single_shape_fit(report):
    ds = synthdata.sphere_dataset(num_points=4096, image_size=32)
    held = synthdata.sphere_dataset(num_points=4096, image_size=32, seed=123).samples[0]
    t0 = time.time()
    ck = trainer.train_stage1(ds, trainer.TrainConfig(steps=300, batch_size=1, threads=1))
    elapsed = time.time() - t0
    m, c = ck.model, ck.model.codes_for(0, 0)
    surf = float(L.surface_loss(m.sdf(held.points.astype(np.float32), c)).data)
    pts = np.random.default_rng(5).uniform(-1.5, 1.5, (4096, 3)).astype(np.float32)
    eik = float(L.eikonal_loss(m.sdf_and_gradient(pts, c)[1]).data)
    report(3, "single-shape fit", surf < 0.01 and eik < 0.05 and elapsed < 600,
           f"held-out surface {surf:.4f} (<0.01), eikonal {eik:.4f} (<0.05), 300 steps in {elapsed:.0f}s (<600s)")


# ---- 4. multi-subject model -------------------------------------------------------------

def _profile_setup():
    if FAST:
        ds = synthdata.make_dataset(4, 2, 4, seed=3, image_size=64, num_points=2048, texture_resolution=64)
        mc = trainer.model_config_for(ds, latent_dim=64, sdf_layers=4, sdf_width=128, uv_layers=4, uv_width=128,
                                      inv_layers=4, inv_width=128, color_layers=4, color_width=128)
        base = dict(batch_size=2, surface_points=512, eikonal_points=512, rays_per_view=1024)
        return ds, mc, trainer.TrainConfig(steps=3000, **base), trainer.TrainConfig(steps=200, **base)
    ds = synthdata.make_dataset(32, 8, 6, seed=0)
    threads = os.cpu_count() or 1
    return (ds, trainer.model_config_for(ds), trainer.TrainConfig(steps=2000, threads=threads),
            trainer.TrainConfig(steps=500, threads=threads))


@pytest.fixture(scope="module")
def trained():
    ds, mc, cfg1, cfg2 = _profile_setup()
    t0 = time.time()
    s1 = trainer.train_stage1(ds, cfg1, mc)
    s2 = trainer.train_stage2(s1, ds, cfg2)
    return ds, s2, time.time() - t0


def test_4_multi_subject_model(report, trained):
    ds, ck, elapsed = trained
    out = metrics.evaluate_correspondence(ck.model, ds)
    limits = {"uv_cycle": 0.02, "landmark_uv": 0.05, "texture": 0.05, "cycle_texture": 0.05}
    bad = [k for k, v in limits.items() if out[k] >= v * RELAX]
    budget = 20 * 60 if FAST else float("inf")
    detail = ", ".join(f"{k} {out[k]:.4f} (<{v * RELAX:g})" for k, v in limits.items())
    report(4, "multi-subject model", not bad and elapsed < budget,
           f"{detail}; training {elapsed / 60:.1f} min" + (" (<20 min)" if FAST else ""))


# ---- 5. inversion -----------------------------------------------------------------------

def _held_out():
    size = 64 if FAST else 128
    held = synthdata.make_dataset(1, 1, 1, seed=999 if FAST else 10_000, image_size=size, num_points=256,
                                  texture_resolution=64)
    view = held.samples[0].views[0]
    return view, synthetic_input(view, held.shape(0, 0))


def _fit(model, inp, opts):
    before = _digest(model.params)
    codes, _, cam = optimize_latents(model, inp, opts)
    weights_frozen = _digest(model.params) == before
    frozen = {k: v.copy() for k, v in codes.numpy().items()}
    tuned, _ = finetune_weights(model, codes, inp, opts, cam)
    codes_frozen = all(np.array_equal(codes.numpy()[k], frozen[k]) for k in frozen)
    return codes, tuned, cam, weights_frozen and codes_frozen


def test_5_inversion(report, trained):
    _, ck, _ = trained
    model = ck.model
    view, inp = _held_out()
    opts = InversionOptions()
    codes, tuned, cam, frozen_ok = _fit(model, inp, opts)
    r = render_image(tuned, codes, cam)
    both = r.mask & view.mask
    img = metrics.masked_image_l2(r.image, view.image, view.mask)
    depth = metrics.depth_l1(r.depth, view.depth, both)
    diag = float(np.hypot(*view.mask.shape))
    lm = 100 * landmark_error(tuned, codes, inp, cam) / diag

    no_lm = InversionOptions(weights=opts.weights.replace(landmark2d=0.0))
    codes2, tuned2, cam2, _ = _fit(model, inp, no_lm)
    lm_ablate = 100 * landmark_error(tuned2, codes2, inp, cam2) / diag
    init = mean_init(model)
    r0 = render_image(model, init, inp.camera)
    img_init = metrics.masked_image_l2(r0.image, view.image, view.mask)

    checks = {"image": img < 0.01 * RELAX, "depth": depth < 0.03 * RELAX, "landmarks": lm < 2 * RELAX,
              "phases frozen": frozen_ok, "landmark ablation": lm_ablate >= lm, "mean-init worse": img_init > img}
    bad = [k for k, v in checks.items() if not v]
    report(5, "inversion", not bad,
           f"masked image L2 {img:.4f} (<{0.01 * RELAX:g}), depth L1 {depth:.4f} (<{0.03 * RELAX:g}), "
           f"landmarks {lm:.3f}% of diagonal (<{2 * RELAX:g}%), phases bit-frozen {frozen_ok}, "
           f"without landmark term {lm_ablate:.3f}% (>= {lm:.3f}%), mean init only L2 {img_init:.4f} (> {img:.4f})"
           + (f"; failing {bad}" if bad else ""))


# ---- 6. animation and transfer ------------------------------------------------------------

def test_6_animation_transfer_exactness(report):
    rng = np.random.default_rng(11)
    a, b = rng.normal(size=512).astype(np.float32), rng.normal(size=512).astype(np.float32)
    ends = (animate_expression(a, b, 0).tobytes() == a.tobytes()
            and animate_expression(a, b, 1).tobytes() == b.tobytes())
    src = AvatarCodes(*(rng.normal(size=512).astype(np.float32) for _ in range(3)))
    dst = AvatarCodes(*(rng.normal(size=512).astype(np.float32) for _ in range(3)))
    transfer_ok = True
    for which, key in (("geometry", "geom"), ("color", "color"), ("expression", "expr")):
        out = transfer_attribute(src, dst, which).numpy()
        for k in ("geom", "color", "expr"):
            expect = (dst if k == key else src).numpy()[k]
            transfer_ok &= out[k].tobytes() == expect.tobytes()
    report(6, "animation/transfer exactness", ends and transfer_ok,
           f"endpoints bit-exact {ends}; transfer changes only the chosen code {transfer_ok}")


# ---- 7. asset pipeline -------------------------------------------------------------------

def test_7_asset_pipeline(report, tmp_path, trained):
    mesh = marching_cubes(lambda x: np.linalg.norm(x, axis=1) - 1.0, 128)
    area_err = abs(mesh.area() / (4 * np.pi) - 1)

    _, ck, _ = trained
    model = ck.model
    c = model.codes_for(0, 0)
    head = assign_uvs(extract_mesh(model, c, 64), model, c)
    paths = export_asset(head, bake_texture(model, c, 32), tmp_path / "head")
    back = read_obj(paths["obj"])
    round_trip = len(back.faces) == len(head.faces)

    # paint the texel hit most often in the front view, then re-import the file
    cam = Camera.orbit(0, 0, width=64, height=64)
    tex = import_texture(paths["png"])
    base = render_image(model, c, cam, texture=tex)
    i, j = tex.texel_index(base.uv[base.mask])
    cells, counts = np.unique(np.stack([j, i], 1), axis=0, return_counts=True)
    jj, ii = cells[np.argmax(counts)]
    data = tex.data.copy()
    data[jj, ii] = [1.0, 0.0, 1.0]
    TextureMap(data).save(paths["png"])
    edited = import_texture(paths["png"])
    target = model.codes_for(0, 1).expr
    exact, shown = True, []
    for t in (0.0, 0.5, 1.0):
        r = render_image(model, animate_codes(c, target, t), cam, texture=edited)
        ti, tj = edited.texel_index(r.uv[r.mask])
        inside = (ti == ii) & (tj == jj)
        magenta = np.all(r.image[r.mask] == np.float32([1, 0, 1]), axis=1)
        exact &= bool(np.array_equal(magenta, inside))
        shown.append(int(inside.sum()))
    ok = area_err < 0.02 and round_trip and exact and all(shown)
    report(7, "asset pipeline", ok,
           f"sphere area err {100 * area_err:.2f}% (<2%); OBJ round trip {round_trip}; edited texel exactly at "
           f"its footprint over 3 frames {exact} (pixels {shown})")


# ---- 8. metrics -------------------------------------------------------------------------

def test_8_metrics_self_consistency(report):
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, (8, 8))
    b = np.clip(a + rng.normal(0, 0.1, (8, 8)), 0, 1)
    same = metrics.ssim(a, a)
    d = rng.uniform(1, 3, (8, 8))
    zero = metrics.depth_l1(d, d) == 0 and metrics.depth_rmse(d, d) == 0
    gap = abs(metrics.ssim(a, b) - _ssim_oracle(a, b))
    report(8, "metrics self-consistency", same == pytest.approx(1.0, abs=1e-12) and zero and gap < 1e-6,
           f"ssim(a,a) {same:.12f}; depth errors zero {zero}; SSIM vs direct formula {gap:.1e} (<1e-6)")
