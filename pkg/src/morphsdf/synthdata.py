"""Procedural head-like shapes with exact ground truth.

Each subject is a star-shaped surface ``|p| = r(w)`` over unit directions
``w``, where ``r`` is a base radius plus degree <= 2 real spherical harmonics.
Expressions add a few localized radial bumps.  Because the surface is a
radial graph, ground-truth UVs are simply the spherical angles of ``w`` and
every quantity the training losses consume (normals, landmarks, texture,
depth, masks) is available in closed form.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .camera import Camera
from .renderer import BACKGROUND, TraceResult, generate_rays, sphere_trace
from .spherical import gt_uv, uv_to_direction

log = logging.getLogger(__name__)

R_MIN, R_MAX = 0.6, 1.1
MAX_LIPSCHITZ = 1.9
NUM_LANDMARKS = 16
# anchors on a 4x4 grid of the UV square; the central four carry fiducial blobs
LANDMARK_ANCHORS = np.array([(u, v) for u in (0.2, 0.4, 0.6, 0.8) for v in (0.2, 0.4, 0.6, 0.8)])
FIDUCIAL_IDS = (5, 6, 9, 10)
FIDUCIAL_SIGMA = 0.09  # radians
# direction frequencies shared by all subject textures: coarse, medium, fine
TEXTURE_WAVES = np.array([[1.3, 0.9, 1.6], [-2.9, 2.2, 1.1], [4.1, -5.2, 5.7]])
DEFAULT_YAWS = (0.0, -15.0, 15.0, -30.0, 30.0)
ELEVATED_VIEW = (0.0, 25.0)


def sh_basis(w: np.ndarray) -> np.ndarray:
    """Real spherical harmonics up to degree 2 as polynomials in (x, y, z); (N, 9)."""
    x, y, z = w[:, 0], w[:, 1], w[:, 2]
    return np.stack([
        np.full_like(x, 0.28209479), 0.48860251 * y, 0.48860251 * z, 0.48860251 * x,
        1.09254843 * x * y, 1.09254843 * y * z, 0.31539157 * (3 * z * z - 1),
        1.09254843 * x * z, 0.54627422 * (x * x - y * y)], axis=1)


def sh_basis_grad(w: np.ndarray) -> np.ndarray:
    """d sh_basis / d w, shape (N, 9, 3), treating w as a free 3-vector."""
    x, y, z = w[:, 0], w[:, 1], w[:, 2]
    zero, one = np.zeros_like(x), np.ones_like(x)
    rows = [
        (zero, zero, zero),
        (zero, 0.48860251 * one, zero),
        (zero, zero, 0.48860251 * one),
        (0.48860251 * one, zero, zero),
        (1.09254843 * y, 1.09254843 * x, zero),
        (zero, 1.09254843 * z, 1.09254843 * y),
        (zero, zero, 0.31539157 * 6 * z),
        (1.09254843 * z, zero, 1.09254843 * x),
        (0.54627422 * 2 * x, -0.54627422 * 2 * y, zero),
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=1)


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    phi = np.pi * (1 + 5**0.5) * i
    s = np.sqrt(1 - z * z)
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


# ---- specs -------------------------------------------------------------

@dataclass
class TextureSpec:
    palette: np.ndarray          # (3, 3) base colors
    phases: np.ndarray           # (3,) phase of each shared wave
    fiducial_colors: np.ndarray  # (4, 3)
    detail: float = 0.1          # amplitude of the fine luminance wave

    def to_dict(self):
        return {k: np.asarray(v).tolist() for k, v in vars(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k]) for k in ("palette", "phases", "fiducial_colors")),
                   float(d.get("detail", 0.1)))


@dataclass
class SubjectSpec:
    coeffs: np.ndarray     # (9,) SH radial displacement amplitudes
    texture: TextureSpec
    r0: float = 0.85

    def to_dict(self):
        return {"coeffs": self.coeffs.tolist(), "r0": self.r0, "texture": self.texture.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["coeffs"]), TextureSpec.from_dict(d["texture"]), d["r0"])

    @classmethod
    def sphere(cls, radius: float = 1.0, color=(0.8, 0.5, 0.4)) -> "SubjectSpec":
        """Constant-radius subject with a constant texture (fiducials disabled)."""
        c = np.tile(np.asarray(color, dtype=np.float64), (3, 1))
        return cls(np.zeros(9), TextureSpec(c, np.zeros(3), np.tile(c[:1], (4, 1)), 0.0), float(radius))


@dataclass
class ExpressionSpec:
    centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    amplitudes: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sharpness: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def is_neutral(self) -> bool:
        return len(self.amplitudes) == 0 or not np.any(self.amplitudes)

    def to_dict(self):
        return {k: np.asarray(v).tolist() for k, v in vars(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["centers"]).reshape(-1, 3), np.asarray(d["amplitudes"]),
                   np.asarray(d["sharpness"]))


class Shape:
    """A subject in one expression: radial function, analytic field and texture."""

    def __init__(self, subject: SubjectSpec, expression: ExpressionSpec | None = None):
        self.subject = subject
        self.expression = expression or ExpressionSpec()
        probe = fibonacci_sphere(20000)
        r = self.radius(probe)
        grad = self.surface_gradient(probe)
        self.r_min = float(r.min())
        self.r_max = float(r.max())
        self.max_slope = float(np.linalg.norm(grad, axis=1).max()) * 1.05
        # |grad F_raw| <= sqrt(1 + G^2 / |p|^2) on the region outside the surface
        self.lipschitz = float(np.sqrt(1 + (self.max_slope / self.r_min) ** 2)) if self.max_slope > 0 else 1.0

    @property
    def admissible(self) -> bool:
        return self.r_min >= R_MIN and self.r_max <= R_MAX and self.lipschitz <= MAX_LIPSCHITZ

    def _bumps(self, w):
        e = self.expression
        if len(e.amplitudes) == 0:
            return np.zeros(len(w)), np.zeros((len(w), 3))
        k = np.exp(e.sharpness[None, :] * (w @ e.centers.T - 1.0))  # (N, B)
        val = k @ e.amplitudes
        grad = (k * (e.amplitudes * e.sharpness)[None, :]) @ e.centers
        return val, grad

    def radius(self, w: np.ndarray) -> np.ndarray:
        return self.subject.r0 + sh_basis(w) @ self.subject.coeffs + self._bumps(w)[0]

    def _radius_grad(self, w):
        g = np.einsum("nkd,k->nd", sh_basis_grad(w), self.subject.coeffs)
        return g + self._bumps(w)[1]

    def surface_gradient(self, w: np.ndarray) -> np.ndarray:
        """Tangential gradient of the radius on the unit sphere."""
        g = self._radius_grad(w)
        return g - np.sum(g * w, axis=1, keepdims=True) * w

    def field(self, p: np.ndarray) -> np.ndarray:
        """Radial level set scaled by the Lipschitz bound: never overestimates distance outside."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        r = np.linalg.norm(p, axis=1)
        out = np.full(len(p), -self.subject.r0 / self.lipschitz)
        nz = r > 0
        w = p[nz] / r[nz, None]
        out[nz] = (r[nz] - self.radius(w)) / self.lipschitz
        return out

    def field_gradient(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        r = np.linalg.norm(p, axis=1, keepdims=True)
        w = p / r
        return (w - self.surface_gradient(w) / r) / self.lipschitz

    def normal(self, p: np.ndarray) -> np.ndarray:
        g = self.field_gradient(p)
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    def surface_point(self, w: np.ndarray) -> np.ndarray:
        w = np.atleast_2d(w)
        return w * self.radius(w)[:, None]

    def gt_uv_inverse(self, uv: np.ndarray) -> np.ndarray:
        return self.surface_point(uv_to_direction(uv))

    def landmarks(self) -> tuple[np.ndarray, np.ndarray]:
        """Surface points of the shared anchors and the anchors themselves."""
        return self.gt_uv_inverse(LANDMARK_ANCHORS), LANDMARK_ANCHORS.copy()


# ---- textures ----------------------------------------------------------

def texture_color(spec: TextureSpec, w: np.ndarray) -> np.ndarray:
    """Smooth color field over unit directions, so it is seamless in UV."""
    s = 0.5 + 0.5 * np.sin(w @ TEXTURE_WAVES.T + spec.phases[None, :])
    p = spec.palette
    c = p[0] * (1 - s[:, :1]) + p[1] * s[:, :1]
    c = c * (1 - 0.5 * s[:, 1:2]) + p[2] * 0.5 * s[:, 1:2]
    c = c + spec.detail * (s[:, 2:3] - 0.5)
    anchors = uv_to_direction(LANDMARK_ANCHORS[list(FIDUCIAL_IDS)])
    for j in range(len(FIDUCIAL_IDS)):
        ang = np.arccos(np.clip(w @ anchors[j], -1, 1))
        a = np.exp(-0.5 * (ang / FIDUCIAL_SIGMA) ** 2)[:, None]
        c = c * (1 - a) + spec.fiducial_colors[j] * a
    return np.clip(c, 0.0, 1.0)


class TextureMap:
    """RGB grid over the unit UV square; ``data[j, i]`` is texel (u index i, v index j)."""

    def __init__(self, data: np.ndarray):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"texture must be (H, W, 3), got {data.shape}")
        if data.min() < 0 or data.max() > 1:
            raise ValueError("texture values must lie in [0, 1]")
        self.data = data

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @staticmethod
    def texel_centers(width: int, height: int) -> np.ndarray:
        u = (np.arange(width) + 0.5) / width
        v = (np.arange(height) + 0.5) / height
        uu, vv = np.meshgrid(u, v)
        return np.stack([uu, vv], axis=-1).reshape(-1, 2)

    @classmethod
    def from_function(cls, fn, width: int, height: int | None = None) -> "TextureMap":
        height = height or width
        rgb = fn(cls.texel_centers(width, height)).reshape(height, width, 3)
        return cls(fileio.quantize(rgb))

    def sample(self, uv: np.ndarray, nearest: bool = False) -> np.ndarray:
        """Bilinear (or nearest-texel) lookup with clamp-to-edge, (N, 2) -> (N, 3)."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        if nearest:
            i, j = self.texel_index(uv)
            return self.data[j, i].copy()
        x = np.clip(uv[:, 0] * self.width - 0.5, 0, self.width - 1)
        y = np.clip(uv[:, 1] * self.height - 0.5, 0, self.height - 1)
        x0 = np.minimum(np.floor(x).astype(int), self.width - 2) if self.width > 1 else np.zeros(len(x), int)
        y0 = np.minimum(np.floor(y).astype(int), self.height - 2) if self.height > 1 else np.zeros(len(y), int)
        x1 = np.minimum(x0 + 1, self.width - 1)
        y1 = np.minimum(y0 + 1, self.height - 1)
        fx = (x - x0)[:, None]
        fy = (y - y0)[:, None]
        d = self.data
        top = d[y0, x0] * (1 - fx) + d[y0, x1] * fx
        bot = d[y1, x0] * (1 - fx) + d[y1, x1] * fx
        return (top * (1 - fy) + bot * fy).astype(np.float32)

    def texel_index(self, uv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        uv = np.atleast_2d(uv)
        i = np.clip((uv[:, 0] * self.width).astype(int), 0, self.width - 1)
        j = np.clip((uv[:, 1] * self.height).astype(int), 0, self.height - 1)
        return i, j

    def save(self, path) -> None:
        fileio.write_png(path, self.data)

    @classmethod
    def load(cls, path) -> "TextureMap":
        img = fileio.read_png(path)
        if img.ndim != 3 or img.shape[2] < 3:
            raise ValueError(f"{path}: expected an RGB texture, got shape {img.shape}")
        return cls(img[:, :, :3])


def subject_texture_map(spec: TextureSpec, resolution: int = 256) -> TextureMap:
    return TextureMap.from_function(lambda uv: texture_color(spec, uv_to_direction(uv)), resolution)


# ---- ground-truth rendering ------------------------------------------

def render_gt(shape: Shape, texture: TextureMap, camera: Camera, max_steps: int = 50
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sphere-trace the analytic field; returns (image (H,W,3), depth (H,W), mask (H,W))."""
    rays = generate_rays(camera)
    tr = sphere_trace(rays, shape.field, max_steps=max_steps)
    h, w = camera.height, camera.width
    image = np.tile(np.asarray(BACKGROUND, np.float32), (h * w, 1))
    if tr.hit.any():
        image[tr.hit] = texture.sample(gt_uv(tr.point[tr.hit]))
    depth = np.where(tr.hit, tr.t, 0.0).astype(np.float32)
    return fileio.quantize(image).reshape(h, w, 3), depth.reshape(h, w), tr.hit.reshape(h, w)


# ---- dataset -----------------------------------------------------------

@dataclass
class View:
    image: np.ndarray   # (H, W, 3) float32 on the 8-bit grid
    depth: np.ndarray   # (H, W) float32, ray length; 0 off the mask
    mask: np.ndarray    # (H, W) bool
    camera: Camera


@dataclass
class TrainSample:
    subject: int
    expression: int
    points: np.ndarray      # (N, 3) surface samples
    normals: np.ndarray     # (N, 3)
    uvs: np.ndarray         # (N, 2) ground-truth uv
    colors: np.ndarray      # (N, 3) texture at uv
    landmark_points: np.ndarray  # (K, 3)
    landmark_uvs: np.ndarray     # (K, 2)
    texture: TextureMap
    views: list[View]


@dataclass
class GeneratorConfig:
    num_subjects: int = 32
    num_expressions: int = 8
    views_per_sample: int = 6
    seed: int = 0
    image_size: int = 128
    num_points: int = 4096
    texture_resolution: int = 256
    max_retries: int = 50

    def to_dict(self):
        return dict(vars(self))


@dataclass
class Dataset:
    config: GeneratorConfig
    subjects: list[SubjectSpec]
    expressions: dict[tuple[int, int], ExpressionSpec]
    samples: list[TrainSample]

    def __len__(self):
        return len(self.samples)

    def shape(self, subject: int, expression: int) -> Shape:
        return Shape(self.subjects[subject], self.expressions[(subject, expression)])

    def sample(self, subject: int, expression: int) -> TrainSample:
        return self.samples[subject * self.config.num_expressions + expression]


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def random_subject(rng: np.random.Generator, max_retries: int = 50) -> SubjectSpec:
    for _ in range(max_retries):
        coeffs = np.zeros(9)
        coeffs[0] = rng.uniform(-0.15, 0.15)
        coeffs[1:4] = rng.uniform(-0.06, 0.06, 3)
        coeffs[4:9] = rng.uniform(-0.1, 0.1, 5)
        coeffs[6] = rng.uniform(0.02, 0.14)  # taller than wide
        base = np.array([[0.85, 0.62, 0.5], [0.62, 0.4, 0.3], [0.9, 0.78, 0.68]])
        palette = np.clip(base + rng.uniform(-0.12, 0.12, (3, 3)), 0.05, 0.95)
        tex = TextureSpec(palette, rng.uniform(0, 2 * np.pi, 3),
                          rng.uniform(0, 1, (4, 3)) * np.array([[1.0, 0.2, 1.0]]))
        spec = SubjectSpec(coeffs, tex)
        if Shape(spec).admissible:
            return spec
    raise RuntimeError("could not draw an admissible subject")


def expression_template(seed: int, expression: int) -> ExpressionSpec:
    """Bump layout of one expression id, shared by all subjects."""
    if expression == 0:
        return ExpressionSpec()
    rng = _rng(seed, 1_000_003, expression)
    n = int(rng.integers(1, 5))
    theta = rng.uniform(0.3, 0.75, n) * np.pi
    phi = rng.uniform(-0.35, 0.35, n) * np.pi
    centers = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=1)
    return ExpressionSpec(centers, rng.uniform(-0.1, 0.1, n), rng.uniform(8.0, 18.0, n))


def random_expression(template: ExpressionSpec, rng: np.random.Generator) -> ExpressionSpec:
    if template.is_neutral:
        return ExpressionSpec()
    amps = np.clip(template.amplitudes * rng.uniform(0.7, 1.3, len(template.amplitudes)), -0.12, 0.12)
    return ExpressionSpec(template.centers.copy(), amps, template.sharpness.copy())


def make_sample(shape: Shape, texture: TextureMap, subject: int, expression: int,
                cameras: list[Camera], num_points: int, rng: np.random.Generator) -> TrainSample:
    w = rng.normal(size=(num_points, 3))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    pts = shape.surface_point(w).astype(np.float32)
    uvs = gt_uv(pts).astype(np.float32)
    lm_pts, lm_uvs = shape.landmarks()
    views = [View(*render_gt(shape, texture, cam), cam) for cam in cameras]
    return TrainSample(subject, expression, pts.astype(np.float32), shape.normal(pts).astype(np.float32),
                       uvs.astype(np.float32), texture.sample(uvs), lm_pts.astype(np.float32),
                       lm_uvs.astype(np.float32), texture, views)


def default_cameras(count: int, image_size: int, rng: np.random.Generator | None = None) -> list[Camera]:
    poses = [(y, 0.0) for y in DEFAULT_YAWS] + [ELEVATED_VIEW]
    while len(poses) < count:
        poses.append((float(rng.uniform(-40, 40)), float(rng.uniform(-15, 25))))
    return [Camera.orbit(y, p, width=image_size, height=image_size) for y, p in poses[:count]]


def make_dataset(num_subjects: int, num_expressions: int, views_per_sample: int = 6, seed: int = 0,
                 **kw) -> Dataset:
    cfg = GeneratorConfig(num_subjects, num_expressions, views_per_sample, seed, **kw)
    if min(num_subjects, num_expressions, views_per_sample) < 1:
        raise ValueError("dataset counts must be >= 1")
    subjects, expressions, samples = [], {}, []
    for s in range(num_subjects):
        subj = random_subject(_rng(seed, s), cfg.max_retries)
        subjects.append(subj)
        tex = subject_texture_map(subj.texture, cfg.texture_resolution)
        for e in range(num_expressions):
            rng = _rng(seed, s, e, 7)
            template = expression_template(seed, e)
            for _ in range(cfg.max_retries):
                expr = random_expression(template, rng)
                shape = Shape(subj, expr)
                if shape.admissible:
                    break
            else:
                raise RuntimeError(f"subject {s} expression {e}: no admissible deformation")
            expressions[(s, e)] = expr
            cams = default_cameras(views_per_sample, cfg.image_size, _rng(seed, s, e, 11))
            samples.append(make_sample(shape, tex, s, e, cams, cfg.num_points, _rng(seed, s, e, 13)))
    log.info("generated %d samples", len(samples))
    return Dataset(cfg, subjects, expressions, samples)


def sphere_dataset(radius: float = 1.0, color=(0.8, 0.5, 0.4), views_per_sample: int = 1,
                   num_points: int = 4096, image_size: int = 64, seed: int = 0,
                   texture_resolution: int = 64) -> Dataset:
    """One subject, one expression: a sphere with a constant texture."""
    cfg = GeneratorConfig(1, 1, views_per_sample, seed, image_size, num_points, texture_resolution)
    subj = SubjectSpec.sphere(radius, color)
    shape = Shape(subj)
    tex = subject_texture_map(subj.texture, texture_resolution)
    cams = default_cameras(views_per_sample, image_size, _rng(seed, 0, 0, 11))
    sample = make_sample(shape, tex, 0, 0, cams, num_points, _rng(seed, 0, 0, 13))
    return Dataset(cfg, [subj], {(0, 0): ExpressionSpec()}, [sample])


def audit_sample(shape: Shape, sample: TrainSample, tol: float = 1e-4) -> list[str]:
    """Invariant violations of one generated sample (empty when clean)."""
    problems = []
    f = np.abs(shape.field(sample.points.astype(np.float64)))
    # stored float32 coordinates carry ~6e-8 relative rounding
    if f.max() >= tol:
        problems.append(f"surface samples off the level set by {f.max():.2e}")
    n = np.linalg.norm(sample.normals, axis=1)
    if np.abs(n - 1).max() > 1e-5:
        problems.append("normals not unit length")
    if np.abs(sample.landmark_uvs - LANDMARK_ANCHORS).max() > 1e-6:
        problems.append("landmark uvs differ from the shared anchors")
    return problems


# ---- on-disk layout -----------------------------------------------------

def sample_dirname(subject: int, expression: int) -> str:
    return f"s{subject:04d}_e{expression:03d}"


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for smp in ds.samples:
        d = root / sample_dirname(smp.subject, smp.expression)
        (d / "views").mkdir(parents=True, exist_ok=True)
        fileio.write_records(d / "surface.bin", np.hstack([smp.points, smp.normals, smp.uvs]))
        smp.texture.save(d / "texture.png")
        with open(d / "landmarks.json", "w") as fh:
            json.dump([{"id": i, "p": smp.landmark_points[i].tolist(), "uv": smp.landmark_uvs[i].tolist()}
                       for i in range(len(smp.landmark_points))], fh, indent=1)
        for k, view in enumerate(smp.views):
            vd = d / "views" / str(k)
            vd.mkdir(exist_ok=True)
            fileio.write_png(vd / "image.png", view.image)
            fileio.write_depth(vd / "depth.bin", view.depth)
            fileio.write_mask(vd / "mask.png", view.mask)
            view.camera.save(vd / "camera.json")
        entries.append({"subject": smp.subject, "expression": smp.expression,
                        "path": d.name, "views": len(smp.views)})
    manifest = {"generator": ds.config.to_dict(),
                "subjects": [s.to_dict() for s in ds.subjects],
                "expressions": [{"subject": s, "expression": e, **x.to_dict()}
                                for (s, e), x in sorted(ds.expressions.items())],
                "samples": entries}
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_dataset(root) -> Dataset:
    root = Path(root)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    cfg = GeneratorConfig(**manifest["generator"])
    subjects = [SubjectSpec.from_dict(d) for d in manifest["subjects"]]
    expressions = {(d["subject"], d["expression"]): ExpressionSpec.from_dict(d)
                   for d in manifest["expressions"]}
    samples = []
    for entry in manifest["samples"]:
        d = root / entry["path"]
        rec = fileio.read_records(d / "surface.bin")
        tex = TextureMap.load(d / "texture.png")
        with open(d / "landmarks.json") as fh:
            lms = json.load(fh)
        views = []
        for k in range(entry["views"]):
            vd = d / "views" / str(k)
            views.append(View(fileio.read_png(vd / "image.png")[:, :, :3], fileio.read_depth(vd / "depth.bin"),
                              fileio.read_mask(vd / "mask.png"), Camera.load(vd / "camera.json")))
        uvs = rec[:, 6:8]
        samples.append(TrainSample(entry["subject"], entry["expression"], rec[:, :3], rec[:, 3:6], uvs,
                                   tex.sample(uvs), np.array([l["p"] for l in lms], np.float32),
                                   np.array([l["uv"] for l in lms], np.float32), tex, views))
    return Dataset(cfg, subjects, expressions, samples)
