"""Single-image reconstruction against a trained model.

Latent codes start at the mean of the training tables and are optimized
with the network weights frozen; then the codes are frozen and the weights
get a short fine-tuning pass.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import fileio
from . import losses as L
from .camera import Camera
from .networks import CODE_KINDS, NETWORKS, AvatarCodes, Model
from .optim import Adam, cosine_lr
from .renderer import MAX_STEPS, closest_approach, deepest_point, model_field, render_differentiable, render_image
from .synthdata import LANDMARK_ANCHORS
from .trainer import ray_grid

log = logging.getLogger(__name__)


@dataclass
class InversionInput:
    image: np.ndarray           # (H, W, 3) in [0, 1]
    mask: np.ndarray            # (H, W) bool foreground
    camera: Camera
    landmark_ids: np.ndarray    # (K,) anchor ids
    landmarks: np.ndarray       # (K, 2) pixel coordinates (x, y)

    def __post_init__(self):
        self.image = np.asarray(self.image, np.float32)
        self.mask = np.asarray(self.mask, bool)
        self.landmark_ids = np.asarray(self.landmark_ids, int).reshape(-1)
        self.landmarks = np.asarray(self.landmarks, np.float64).reshape(-1, 2)
        h, w = self.mask.shape
        if self.image.shape[:2] != (h, w):
            raise ValueError(f"mask {self.mask.shape} does not match image {self.image.shape[:2]}")
        if (self.camera.height, self.camera.width) != (h, w):
            raise ValueError("camera extents do not match the image")
        if len(self.landmark_ids) != len(self.landmarks):
            raise ValueError("landmark ids and positions differ in count")
        if len(self.landmark_ids) and (self.landmark_ids.min() < 0
                                       or self.landmark_ids.max() >= len(LANDMARK_ANCHORS)):
            raise ValueError("landmark id out of range")
        xy = self.landmarks
        if np.any(xy < 0) or np.any(xy[:, 0] > w) or np.any(xy[:, 1] > h):
            raise ValueError("landmark outside the image")

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        fileio.write_png(root / "image.png", self.image)
        fileio.write_mask(root / "mask.png", self.mask)
        self.camera.save(root / "camera.json")
        with open(root / "landmarks.json", "w") as fh:
            json.dump([{"id": int(i), "xy": p.tolist()} for i, p in zip(self.landmark_ids, self.landmarks)],
                      fh, indent=1)

    @classmethod
    def load(cls, root) -> "InversionInput":
        root = Path(root)
        with open(root / "landmarks.json") as fh:
            lms = json.load(fh)
        return cls(fileio.read_png(root / "image.png")[:, :, :3], fileio.read_mask(root / "mask.png"),
                   Camera.load(root / "camera.json"), [l["id"] for l in lms],
                   np.array([l["xy"] for l in lms]).reshape(-1, 2))


def synthetic_input(view, shape, min_visible: float = 1e-3) -> InversionInput:
    """Input record for a generated view: projected ground-truth landmarks that are visible."""
    pts, _ = shape.landmarks()
    cam = view.camera
    xy = cam.project(pts)
    ids = []
    h, w = view.mask.shape
    for k, (x, y) in enumerate(xy):
        if not (0 <= x < w and 0 <= y < h):
            continue
        i, j = int(y), int(x)
        dist = np.linalg.norm(pts[k] - cam.center)
        if view.mask[i, j] and abs(view.depth[i, j] - dist) < max(0.05 * dist, min_visible):
            ids.append(k)
    return InversionInput(view.image, view.mask, cam, ids, xy[ids])


def default_weights() -> L.LossWeights:
    """Inversion terms only; the training-data terms are switched off."""
    return L.LossWeights(surface=0.0, eikonal=0.0, normal=0.0, uv=0.0, tex=0.0, landmark=0.0)


@dataclass
class InversionOptions:
    latent_steps: int = 800
    finetune_steps: int = 60
    lr_latent: float = 1e-2
    lr_finetune: float = 1e-5
    rays_per_step: int = 4096
    skip_finetune: bool = False
    refine_camera: bool = False
    camera_lr: float = 0.5          # degrees of yaw/pitch per refinement step; distance moves 0.02x this
    mvc_yaw: float = 15.0
    seed: int = 0
    trace_steps: int = MAX_STEPS
    weights: L.LossWeights = field(default_factory=default_weights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights.from_dict(self.weights)
        if self.latent_steps < 0 or self.finetune_steps < 0 or self.rays_per_step < 1:
            raise ValueError("inversion step counts must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "InversionOptions":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown inversion option keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class InversionResult:
    codes: AvatarCodes
    model: Model
    latent_log: list[L.LossReport]
    finetune_log: list[L.LossReport]
    camera: Camera
    render: object = None

    def save_codes(self, path) -> None:
        np.savez(path, **self.codes.numpy())


def mean_init(model: Model) -> AvatarCodes:
    """Componentwise mean of each latent table."""
    tables = {k: model.params[f"latent.{k}"] for k in CODE_KINDS}
    for k, t in tables.items():
        if t.shape[0] == 0:
            raise ValueError(f"latent table {k} is empty")
    return AvatarCodes(*(tables[k].mean(axis=0, dtype=np.float64).astype(np.float32) for k in CODE_KINDS))


def _step_pixels(inp: InversionInput, opts: InversionOptions, phase: int, step: int):
    h, w = inp.mask.shape
    rng = np.random.default_rng([opts.seed, 41, phase, step])
    return ray_grid(h, w, opts.rays_per_step, rng)


def inversion_terms(model: Model, params, codes: AvatarCodes, inp: InversionInput, camera: Camera,
                    pixels, grid, weights: L.LossWeights, rng: np.random.Generator | None = None,
                    mvc_yaw: float = 15.0, trace_steps: int = MAX_STEPS) -> dict[str, ad.Tensor]:
    """Image, silhouette, overshoot, consistency, 2D landmark and latent terms for one step.

    Terms with zero weight are not evaluated.
    """
    rd = render_differentiable(model, params, codes, camera, pixels, grid, trace_steps)
    target = inp.image.reshape(-1, 3)[pixels].reshape(*grid, 3)
    gt_mask = inp.mask.reshape(-1)[pixels].reshape(grid)
    terms = {"img_l2": L.image_l2_loss(rd.image, target, gt_mask)}
    if weights.img_percep > 0:
        terms["img_percep"] = L.perceptual_proxy_loss(rd.image, target, gt_mask)
    field = model_field(model, codes)
    if weights.silhouette > 0:
        miss = L.silhouette_pixels(gt_mask, rd.mask)
        closest = None
        if miss.size:
            pts = closest_approach(rd.rays, rd.trace, field, miss)
            closest = model.sdf(pts.astype(np.float32), codes, params)
        terms["silhouette"] = L.silhouette_loss(closest)
    if weights.overshoot > 0:
        over = L.overshoot_pixels(gt_mask, rd.mask)
        deepest = None
        if over.size:
            pts = deepest_point(rd.rays, rd.trace, field, over).astype(np.float32)
            pts = pts[field(pts) < 0]  # soft hits that never enter the surface add nothing
            if len(pts):
                deepest = model.sdf(pts, codes, params)
        terms["overshoot"] = L.overshoot_loss(deepest)
    if weights.mvc > 0:
        rng = rng or np.random.default_rng(0)
        yaw = float(rng.uniform(-mvc_yaw, mvc_yaw))
        other = perturbed_camera(camera, yaw, 0.0, 0.0)
        rr = render_differentiable(model, params, codes, other, pixels, grid, trace_steps)
        terms["mvc"] = L.multiview_consistency_loss(rd.image, rr.image)
    if weights.landmark2d > 0 and len(inp.landmark_ids):
        anchors = LANDMARK_ANCHORS[inp.landmark_ids].astype(np.float32)
        pts = model.inverse_uv(anchors, codes, params)
        terms["landmark2d"] = L.landmark_2d_loss(inp.landmarks, pts, camera)
    terms["reg"] = L.latent_reg(codes)
    return terms


def orbit_params(camera: Camera) -> tuple[float, float, float]:
    c = camera.center
    dist = float(np.linalg.norm(c))
    return float(np.degrees(np.arctan2(c[1], c[0]))), float(np.degrees(np.arcsin(c[2] / dist))), dist


def perturbed_camera(camera: Camera, dyaw: float, dpitch: float, ddist: float) -> Camera:
    yaw, pitch, dist = orbit_params(camera)
    return Camera.orbit(yaw + dyaw, pitch + dpitch, dist + ddist, width=camera.width, height=camera.height,
                        focal=camera.focal)


def _objective_value(model, codes, inp, camera, pixels, grid, weights, trace_steps) -> float:
    terms = inversion_terms(model, model.tensors(), codes, inp, camera, pixels, grid, weights, trace_steps=trace_steps)
    total, _ = L.combine(terms, weights)
    return float(total.data)


def _refine_camera(model, codes, inp, offset, pixels, grid, weights, opts) -> np.ndarray:
    """One central-difference descent step on the (yaw, pitch, distance) offset."""
    deltas = np.array([0.5, 0.5, 0.01])
    grad = np.zeros(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = deltas[k]
        hi = _objective_value(model, codes, inp, perturbed_camera(inp.camera, *(offset + e)), pixels, grid,
                              weights, opts.trace_steps)
        lo = _objective_value(model, codes, inp, perturbed_camera(inp.camera, *(offset - e)), pixels, grid,
                              weights, opts.trace_steps)
        grad[k] = (hi - lo) / (2 * deltas[k])
    scale = np.array([1.0, 1.0, 0.02])
    step = -opts.camera_lr * scale * np.sign(grad) * (np.abs(grad) > 0)
    return offset + step


def optimize_latents(model: Model, inp: InversionInput, opts: InversionOptions | None = None,
                     init: AvatarCodes | None = None, log_stream=None) -> tuple[AvatarCodes, list, Camera]:
    """Fit the codes with every network weight frozen."""
    opts = opts or InversionOptions()
    codes = (init or mean_init(model)).detach()
    arrays = {k: np.array(v, np.float32) for k, v in codes.numpy().items()}
    opt = Adam()
    history = []
    offset = np.zeros(3)
    camera = inp.camera
    params = model.tensors()
    for step in range(opts.latent_steps):
        pixels, grid = _step_pixels(inp, opts, 0, step)
        tape = ad.Tape()
        leaves = {k: tape.leaf(arrays[k]) for k in CODE_KINDS}
        c = AvatarCodes(leaves["geom"], leaves["color"], leaves["expr"])
        rng = np.random.default_rng([opts.seed, 43, step])
        terms = inversion_terms(model, params, c, inp, camera, pixels, grid, opts.weights, rng,
                                opts.mvc_yaw, opts.trace_steps)
        total, report = L.combine(terms, opts.weights)
        grads = tape.backward(total)
        lr = cosine_lr(opts.lr_latent, step, opts.latent_steps)
        opt.step(arrays, {k: grads.of(leaves[k]) for k in CODE_KINDS}, {k: lr for k in CODE_KINDS})
        history.append(report)
        if opts.refine_camera and step % 10 == 9:
            offset = _refine_camera(model, AvatarCodes(**arrays), inp, offset, pixels, grid, opts.weights, opts)
            camera = perturbed_camera(inp.camera, *offset)
        if log_stream is not None:
            log_stream.write(report.line(phase="latent", step=step + 1) + "\n")
    return AvatarCodes(arrays["geom"], arrays["color"], arrays["expr"]), history, camera


def finetune_weights(model: Model, codes: AvatarCodes, inp: InversionInput, opts: InversionOptions | None = None,
                     camera: Camera | None = None, log_stream=None) -> tuple[Model, list]:
    """Fine-tune every network with the codes fixed; the silhouette term is always off here."""
    opts = opts or InversionOptions()
    camera = camera or inp.camera
    weights = opts.weights.replace(silhouette=0.0)
    tuned = model.copy()
    names = tuned.network_param_names(*NETWORKS)
    fixed = codes.detach()
    opt = Adam()
    history = []
    for step in range(opts.finetune_steps):
        pixels, grid = _step_pixels(inp, opts, 1, step)
        tape = ad.Tape()
        params = tuned.tensors(tape, names)
        rng = np.random.default_rng([opts.seed, 47, step])
        terms = inversion_terms(tuned, params, fixed, inp, camera, pixels, grid, weights, rng,
                                opts.mvc_yaw, opts.trace_steps)
        total, report = L.combine(terms, weights)
        grads = tape.backward(total)
        opt.step(tuned.params, {k: grads.of(params[k]) for k in names}, {k: opts.lr_finetune for k in names})
        history.append(report)
        if log_stream is not None:
            log_stream.write(report.line(phase="finetune", step=step + 1) + "\n")
    return tuned, history


def invert(model: Model, inp: InversionInput, opts: InversionOptions | None = None,
           log_stream=None) -> InversionResult:
    opts = opts or InversionOptions()
    codes, lat_log, camera = optimize_latents(model, inp, opts, log_stream=log_stream)
    fin_log = []
    tuned = model
    if not opts.skip_finetune and opts.finetune_steps > 0:
        tuned, fin_log = finetune_weights(model, codes, inp, opts, camera, log_stream)
    result = InversionResult(codes, tuned, lat_log, fin_log, camera)
    result.render = render_image(tuned, codes, camera, max_steps=opts.trace_steps)
    return result


def landmark_error(model: Model, codes: AvatarCodes, inp: InversionInput, camera: Camera | None = None) -> float:
    """Mean reprojection distance of the anchor landmarks as a fraction of the image diagonal."""
    camera = camera or inp.camera
    if len(inp.landmark_ids) == 0:
        return 0.0
    pts = model.inverse_uv(LANDMARK_ANCHORS[inp.landmark_ids].astype(np.float32), codes).data
    err = np.linalg.norm(camera.project(pts) - inp.landmarks, axis=1)
    return float(err.mean() / camera.diagonal)
