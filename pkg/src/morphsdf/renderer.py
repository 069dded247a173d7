"""Sphere tracing of analytic or learned signed distance fields."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BACKGROUND = (0.5, 0.5, 0.5)
BOUND_RADIUS = 1.5
EPS = 1e-4
MAX_STEPS = 50
GRAZING = 1e-3


@dataclass
class Rays:
    origins: np.ndarray     # (N, 3)
    directions: np.ndarray  # (N, 3) unit
    near: np.ndarray        # (N,)
    far: np.ndarray         # (N,)
    valid: np.ndarray       # (N,) ray meets the bounding sphere

    def __len__(self):
        return len(self.directions)

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.near[idx], self.far[idx], self.valid[idx])


def bound_rays(origins: np.ndarray, directions: np.ndarray, radius: float = BOUND_RADIUS) -> Rays:
    """Clip rays to the scene bounding sphere."""
    origins = np.broadcast_to(np.asarray(origins, np.float64), directions.shape).copy()
    d = np.asarray(directions, np.float64)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    b = np.sum(origins * d, axis=1)
    c = np.sum(origins * origins, axis=1) - radius**2
    disc = b * b - c
    valid = disc > 0
    root = np.sqrt(np.maximum(disc, 0))
    near = np.maximum(-b - root, 0.0)
    far = -b + root
    valid &= far > near
    return Rays(origins, d, np.where(valid, near, 0.0), np.where(valid, far, 0.0), valid)


def generate_rays(camera, pixels: np.ndarray | None = None) -> Rays:
    """One ray per pixel center (row-major), optionally only for flat ``pixels`` indices."""
    d = camera.pixel_directions()
    if pixels is not None:
        d = d[pixels]
    return bound_rays(camera.center, d)


@dataclass
class TraceResult:
    hit: np.ndarray        # mask hit: converged, or residual within 10 eps at budget end
    converged: np.ndarray  # residual <= eps; only these carry image gradients
    inside: np.ndarray     # field negative at the first sample
    t: np.ndarray
    point: np.ndarray
    steps: np.ndarray
    residual: np.ndarray
    closest_point: np.ndarray  # sample with the smallest |field| along the ray
    closest_value: np.ndarray
    closest_t: np.ndarray
    closest_back: np.ndarray   # length of the step that led to that sample

    def __len__(self):
        return len(self.hit)


def sphere_trace(rays: Rays, field, max_steps: int = MAX_STEPS, eps: float = EPS) -> TraceResult:
    """March every ray by the field value until convergence, exit or budget end.

    ``field`` maps (M, 3) points to (M,) values and must not overestimate the
    distance to the surface from outside.
    """
    n = len(rays)
    o, d = rays.origins, rays.directions
    t = rays.near.copy()
    steps = np.zeros(n, dtype=np.int32)
    hit = np.zeros(n, bool)
    converged = np.zeros(n, bool)
    inside = np.zeros(n, bool)
    residual = np.full(n, np.inf)
    best_val = np.full(n, np.inf)
    best_pt = o + t[:, None] * d
    best_t = t.copy()
    best_back = np.zeros(n)
    last_step = np.zeros(n)
    active = rays.valid.copy()
    for it in range(max_steps + 1):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        x = o[idx] + t[idx, None] * d[idx]
        s = np.asarray(field(x), dtype=np.float64).reshape(-1)
        residual[idx] = np.abs(s)
        better = np.abs(s) < best_val[idx]
        best_val[idx[better]] = np.abs(s[better])
        best_pt[idx[better]] = x[better]
        best_t[idx[better]] = t[idx[better]]
        best_back[idx[better]] = last_step[idx[better]]
        done = np.abs(s) <= eps
        if it == 0:
            first_inside = s < -eps
            inside[idx[first_inside]] = True
            done |= first_inside
        converged[idx[done]] = True
        hit[idx[done]] = True
        if it == max_steps:
            tail = ~done
            hit[idx[tail]] = residual[idx[tail]] <= 10 * eps
            active[idx] = False
            break
        go = ~done
        active[idx[done]] = False
        gi = idx[go]
        t[gi] += s[go]
        last_step[gi] = s[go]
        steps[gi] += 1
        out = t[gi] > rays.far[gi]
        active[gi[out]] = False
    polish = np.flatnonzero(hit & ~inside & (residual > 0))
    if polish.size:
        t[polish], residual[polish] = _newton_polish(field, o[polish], d[polish], t[polish], residual[polish])
        converged[polish] |= residual[polish] <= eps
    point = o + t[:, None] * d
    residual[~rays.valid] = np.inf
    return TraceResult(hit, converged, inside, t, point, steps,
                       residual, best_pt, np.where(np.isfinite(best_val), best_val, np.inf), best_t, best_back)


def _newton_polish(field, o, d, t, residual, iters: int = 3, h: float = 1e-3, max_move: float = 0.05):
    """Newton steps on f(o + t d) = 0 near a trace hit.

    Grazing rays stall at a residual of a few eps while still millimetres
    short along the ray; a couple of Newton steps with a central-difference
    slope fix that.  A step is kept only if it shrinks |f|.
    """
    def f(tt, sel):
        return np.asarray(field(o[sel] + tt[:, None] * d[sel]), np.float64).reshape(-1)

    t0 = t.copy()
    for _ in range(iters):
        sel = np.arange(len(t))
        cur = f(t, sel)
        slope = (f(t + h, sel) - f(t - h, sel)) / (2 * h)
        ok = np.abs(slope) > 1e-6
        step = np.where(ok, cur / np.where(ok, slope, 1.0), 0.0)
        cand = np.clip(t - step, t0 - max_move, t0 + max_move)
        new = f(cand, sel)
        better = ok & (np.abs(new) < np.abs(cur))
        t = np.where(better, cand, t)
        residual = np.where(better, np.abs(new), np.minimum(residual, np.abs(cur)))
    return t, residual


def closest_approach(rays: Rays, tr: TraceResult, field, idx, iters: int = 30) -> np.ndarray:
    """Minimum-|f| points of the rays ``idx``, refined between the trace samples around them.

    The best trace sample only brackets the closest approach; a golden-section
    search over [previous sample, next sample] locates it.
    """
    idx = np.asarray(idx)
    o, d = rays.origins[idx], rays.directions[idx]
    lo = np.maximum(tr.closest_t[idx] - tr.closest_back[idx], rays.near[idx])
    hi = tr.closest_t[idx] + tr.closest_value[idx]
    hi = np.where(np.isfinite(hi), np.minimum(hi, rays.far[idx]), lo)

    def g(tt):
        return np.abs(np.asarray(field(o + tt[:, None] * d), np.float64).reshape(-1))

    ratio = (np.sqrt(5) - 1) / 2
    a = hi - ratio * (hi - lo)
    b = lo + ratio * (hi - lo)
    fa, fb = g(a), g(b)
    for _ in range(iters):
        left = fa < fb
        hi = np.where(left, b, hi)
        lo = np.where(left, lo, a)
        a_new = np.where(left, hi - ratio * (hi - lo), b)
        b_new = np.where(left, a, lo + ratio * (hi - lo))
        a, b = a_new, b_new
        fa, fb = g(a), g(b)
    t = 0.5 * (lo + hi)
    # never worse than the best trace sample
    t = np.where(g(t) <= tr.closest_value[idx], t, tr.closest_t[idx])
    return o + t[:, None] * d


def deepest_point(rays: Rays, tr: TraceResult, field, idx, samples: int = 32, iters: int = 20) -> np.ndarray:
    """Minimum-f points of the hit rays ``idx`` between their hit and far bound.

    Dense samples pick the deepest one; a golden-section search between its
    neighbours refines it.
    """
    idx = np.asarray(idx)
    o, d = rays.origins[idx], rays.directions[idx]
    start, end = tr.t[idx], rays.far[idx]
    s = np.linspace(0.0, 1.0, samples)
    ts = start[:, None] + s[None, :] * (end - start)[:, None]
    vals = np.asarray(field((o[:, None, :] + ts[..., None] * d[:, None, :]).reshape(-1, 3)),
                      np.float64).reshape(len(idx), samples)
    k = np.argmin(vals, axis=1)
    rows = np.arange(len(idx))
    lo = ts[rows, np.maximum(k - 1, 0)]
    hi = ts[rows, np.minimum(k + 1, samples - 1)]

    def g(tt):
        return np.asarray(field(o + tt[:, None] * d), np.float64).reshape(-1)

    ratio = (np.sqrt(5) - 1) / 2
    a, b = hi - ratio * (hi - lo), lo + ratio * (hi - lo)
    fa, fb = g(a), g(b)
    for _ in range(iters):
        left = fa < fb
        hi = np.where(left, b, hi)
        lo = np.where(left, lo, a)
        a_new = np.where(left, hi - ratio * (hi - lo), b)
        b_new = np.where(left, a, lo + ratio * (hi - lo))
        a, b = a_new, b_new
        fa, fb = g(a), g(b)
    t = 0.5 * (lo + hi)
    t = np.where(g(t) <= vals[rows, k], t, ts[rows, k])
    return o + t[:, None] * d


def model_field(model, codes, params=None):
    """No-tape SDF evaluation for tracing."""
    view = None if params is None else {k: Tensor(v.data) for k, v in params.items()}
    c = codes.detach() if hasattr(codes, "detach") else codes

    def fn(x):
        return model.sdf(x.astype(np.float32), c, view).data

    return fn


def differentiable_hit(model, params, codes, directions: np.ndarray, points: np.ndarray):
    """Surface points as a differentiable function of the SDF parameters.

    With the traced hit ``x`` held fixed, returns ``x - d f(x) / <grad f(x), d>``
    using a detached gradient, plus the boolean mask of rays that were kept
    (grazing rays with ``|<grad f, d>| < 1e-3`` are dropped).
    """
    pts = np.asarray(points, np.float32)
    dirs = np.asarray(directions, np.float32)
    detached = {k: Tensor(v.data) for k, v in params.items()}
    _, grad = model.sdf_and_gradient(pts, codes.detach(), detached)
    denom = np.sum(grad.data * dirs, axis=1)
    keep = np.abs(denom) >= GRAZING
    pts, dirs, denom = pts[keep], dirs[keep], denom[keep]
    if len(pts) == 0:
        return None, keep
    fval = model.sdf(pts, codes, params)
    step = ad.div(fval, Tensor(denom.astype(np.float32)))
    x = ad.sub(Tensor(pts), ad.mul(ad.reshape(step, (-1, 1)), Tensor(dirs)))
    return x, keep


@dataclass
class Render:
    image: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), 0 off the mask
    mask: np.ndarray   # (H, W) bool
    uv: np.ndarray     # (H, W, 2), 0 off the mask
    trace: TraceResult


def render_image(model, codes, camera, texture=None, params=None, max_steps: int = MAX_STEPS,
                 pixels: np.ndarray | None = None, texture_filter: str = "nearest") -> Render:
    """Trace the learned surface and shade hits with ``h(g(x))`` or an override texture.

    An override texture is looked up per texel by default so painted edits
    land exactly on their texel footprint; pass ``texture_filter="bilinear"``
    for smooth lookups.  With ``pixels`` only those flat indices are
    rendered; other pixels keep background values.
    """
    h, w = camera.height, camera.width
    sel = np.arange(h * w) if pixels is None else np.asarray(pixels)
    rays = generate_rays(camera, sel)
    tr = sphere_trace(rays, model_field(model, codes, params), max_steps=max_steps)
    view = None if params is None else {k: Tensor(v.data) for k, v in params.items()}
    c = codes.detach()
    image = np.tile(np.asarray(BACKGROUND, np.float32), (h * w, 1))
    depth = np.zeros(h * w, np.float32)
    mask = np.zeros(h * w, bool)
    uv = np.zeros((h * w, 2), np.float32)
    hit_idx = sel[tr.hit]
    if hit_idx.size:
        pts = tr.point[tr.hit].astype(np.float32)
        uv_hit = model.uv(pts, c, view).data
        rgb = texture.sample(uv_hit, texture_filter == "nearest") if texture is not None else model.color(uv_hit, c, view).data
        image[hit_idx] = rgb
        depth[hit_idx] = tr.t[tr.hit]
        mask[hit_idx] = True
        uv[hit_idx] = uv_hit
    return Render(image.reshape(h, w, 3), depth.reshape(h, w), mask.reshape(h, w), uv.reshape(h, w, 2), tr)


@dataclass
class DiffRender:
    image: Tensor            # (H, W, 3), differentiable at ``grad_pixels``
    mask: np.ndarray         # (H, W) predicted hit mask
    depth: np.ndarray        # (H, W)
    trace: TraceResult
    rays: Rays
    grad_pixels: np.ndarray  # flat indices with gradient


def render_differentiable(model, params, codes, camera, pixels: np.ndarray | None = None,
                          shape: tuple[int, int] | None = None, max_steps: int = MAX_STEPS) -> DiffRender:
    """Render with image gradients flowing into ``f``, ``g``, ``h`` and the codes.

    ``pixels`` (flat indices into the camera image) select a sub-image of the
    given ``shape``; by default the full frame is rendered.
    """
    if pixels is None:
        pixels = np.arange(camera.height * camera.width)
        shape = (camera.height, camera.width)
    n = len(pixels)
    rays = generate_rays(camera, pixels)
    tr = sphere_trace(rays, model_field(model, codes, params), max_steps=max_steps)
    base = np.tile(np.asarray(BACKGROUND, np.float32), (n, 1))
    depth = np.where(tr.hit, tr.t, 0.0).astype(np.float32)
    c = codes.detach()
    detached = {k: Tensor(v.data) for k, v in params.items()}
    soft = tr.hit & ~tr.converged
    if soft.any():
        uv_soft = model.uv(tr.point[soft].astype(np.float32), c, detached).data
        base[soft] = model.color(uv_soft, c, detached).data
    grad_idx = np.flatnonzero(tr.converged & tr.hit & ~tr.inside)
    image = Tensor(base)
    kept = np.zeros(0, int)
    if grad_idx.size:
        x, keep = differentiable_hit(model, params, codes, rays.directions[grad_idx], tr.point[grad_idx])
        dropped = grad_idx[~keep]
        kept = grad_idx[keep]
        if dropped.size:
            uv_d = model.uv(tr.point[dropped].astype(np.float32), c, detached).data
            base[dropped] = model.color(uv_d, c, detached).data
        if kept.size:
            rgb = model.color(model.uv(x, codes, params), codes, params)
            image = ad.scatter(base, kept, rgb)
        else:
            image = Tensor(base)
    image = ad.reshape(image, (*shape, 3))
    return DiffRender(image, tr.hit.reshape(shape), depth.reshape(shape), tr, rays, kept)
