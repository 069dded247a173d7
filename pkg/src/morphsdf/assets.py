"""Post-training asset operations: expression animation, code transfer,
mesh extraction with learned uvs, texture baking and OBJ export."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage import measure

from .networks import CODE_KINDS, AvatarCodes, Model
from .synthdata import TextureMap

log = logging.getLogger(__name__)


# ---- latent-space edits ------------------------------------------------------

def animate_expression(expr: np.ndarray, target: np.ndarray, t: float) -> np.ndarray:
    """Affine blend ``expr + t (target - expr)``; endpoints are returned exactly."""
    expr = np.asarray(expr)
    target = np.asarray(target)
    if expr.shape != target.shape:
        raise ValueError(f"expression codes differ in shape: {expr.shape} vs {target.shape}")
    if t == 0:
        return expr.copy()
    if t == 1:
        return target.copy()
    if not 0 <= t <= 1:
        log.warning("expression blend t=%g extrapolates beyond the two codes", t)
    dt = expr.dtype if expr.dtype.kind == "f" else np.float64
    return expr + np.asarray(t, dt) * (target - expr)


def animate_codes(codes: AvatarCodes, target_expr: np.ndarray, t: float) -> AvatarCodes:
    c = codes.detach()
    return c.replace(expr=animate_expression(c.expr, target_expr, t))


def transfer_attribute(source: AvatarCodes, target: AvatarCodes, which: str) -> AvatarCodes:
    """Copy of ``source`` with one code (geometry, color or expression) taken from ``target``."""
    key = {"geometry": "geom", "geom": "geom", "color": "color", "expression": "expr", "expr": "expr"}.get(which)
    if key is None:
        raise ValueError(f"unknown attribute {which!r}; expected geometry, color or expression")
    src, tgt = source.detach(), target.detach()
    return src.replace(**{key: tgt.numpy()[key].copy()})


# ---- meshes -------------------------------------------------------------------

@dataclass
class Mesh:
    vertices: np.ndarray                 # (V, 3)
    faces: np.ndarray                    # (F, 3) int
    uvs: np.ndarray | None = None        # (V, 2)
    normals: np.ndarray | None = None    # (V, 3)
    seam_faces: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0

    def area(self) -> float:
        if self.empty:
            return 0.0
        return float(measure.mesh_surface_area(self.vertices, self.faces))

    def face_normals(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return np.cross(b - a, c - a)


def evaluate_grid(field_fn, resolution: int, bounds: float = 1.5, chunk: int = 65536) -> np.ndarray:
    """Field values on a ``resolution^3`` lattice spanning ``[-bounds, bounds]^3`` (index order x, y, z)."""
    axis = np.linspace(-bounds, bounds, resolution)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), axis=-1).reshape(-1, 3)
    out = np.empty(len(grid), np.float64)
    for s in range(0, len(grid), chunk):
        out[s:s + chunk] = np.asarray(field_fn(grid[s:s + chunk])).reshape(-1)
    return out.reshape(resolution, resolution, resolution)


def marching_cubes(field_fn, resolution: int = 128, bounds: float = 1.5, gradient_fn=None) -> Mesh:
    """Zero level set of ``field_fn`` (negative inside) as a triangle mesh.

    Faces are oriented so their normals point toward increasing field
    values; ``gradient_fn``, if given, is used to double check and flip the
    winding.  A field without a sign change gives an empty mesh.
    """
    if resolution < 8:
        raise ValueError("marching cubes needs resolution >= 8")
    vol = evaluate_grid(field_fn, resolution, bounds)
    if not (vol.min() < 0 < vol.max()):
        warnings.warn("field has no sign change on the grid; mesh is empty", stacklevel=2)
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), int))
    step = 2 * bounds / (resolution - 1)
    verts, faces, normals, _ = measure.marching_cubes(vol, level=0.0, spacing=(step, step, step),
                                                      gradient_direction="ascent", method="lewiner")
    verts = verts - bounds
    mesh = Mesh(verts, faces, normals=normals)
    if gradient_fn is not None and not mesh.empty:
        centers = mesh.vertices[mesh.faces].mean(axis=1)
        agree = np.sum(mesh.face_normals() * gradient_fn(centers), axis=1)
        if np.mean(agree < 0) > 0.5:
            mesh.faces = mesh.faces[:, ::-1].copy()
    return mesh


def model_field(model: Model, codes: AvatarCodes):
    c = codes.detach()
    return lambda p: model.sdf(np.asarray(p, np.float32), c).data


def extract_mesh(model: Model, codes: AvatarCodes, resolution: int = 128, bounds: float = 1.5) -> Mesh:
    c = codes.detach()
    grad = lambda p: model.sdf_and_gradient(np.asarray(p, np.float32), c)[1].data  # noqa: E731
    return marching_cubes(model_field(model, c), resolution, bounds, grad)


def assign_uvs(mesh: Mesh, model: Model, codes: AvatarCodes, chunk: int = 65536) -> Mesh:
    """Per-vertex uv from ``g``; faces straddling a wrap-around seam get their own vertices.

    A face straddles the seam when its corner uvs span more than half the
    square along u or v.  Corners on the minority side are duplicated and
    snapped to the border of the majority side, which keeps every uv inside
    the unit square and stops the face from stretching across the texture.
    """
    c = codes.detach()
    v = mesh.vertices.astype(np.float32)
    uv = np.concatenate([model.uv(v[s:s + chunk], c).data for s in range(0, len(v), chunk)]) \
        if len(v) else np.zeros((0, 2), np.float32)
    uv = uv.astype(np.float64)
    verts, uvs = [mesh.vertices], [uv]
    normals = [mesh.normals] if mesh.normals is not None else None
    faces = mesh.faces.copy()
    corner_uv = uv[faces]                                  # (F, 3, 2)
    span = corner_uv.max(axis=1) - corner_uv.min(axis=1)   # (F, 2)
    seam = np.flatnonzero((span > 0.5).any(axis=1))
    next_index = len(mesh.vertices)
    for f in seam:
        cu = corner_uv[f].copy()
        for axis in (0, 1):
            if span[f, axis] <= 0.5:
                continue
            high = np.sum(cu[:, axis] > 0.5) >= 2
            minority = cu[:, axis] <= 0.5 if high else cu[:, axis] > 0.5
            cu[minority, axis] = 1.0 if high else 0.0
        for k in range(3):
            if np.array_equal(cu[k], uv[faces[f, k]]):
                continue
            src = mesh.faces[f, k]
            verts.append(mesh.vertices[src][None])
            uvs.append(cu[k][None])
            if normals is not None:
                normals.append(mesh.normals[src][None])
            faces[f, k] = next_index
            next_index += 1
    out = Mesh(np.vstack(verts), faces, np.clip(np.vstack(uvs), 0.0, 1.0),
               np.vstack(normals) if normals is not None else None, len(seam), dict(mesh.meta))
    if len(faces):
        log.info("uv seam: %d of %d faces (%.2f%%)", len(seam), len(faces), 100 * len(seam) / len(faces))
    return out


# ---- textures -----------------------------------------------------------------

def bake_texture(model: Model, codes: AvatarCodes, resolution: int = 512, height: int | None = None,
                 chunk: int = 65536) -> TextureMap:
    """Evaluate ``h`` at every texel center."""
    height = height or resolution
    c = codes.detach()
    centers = TextureMap.texel_centers(resolution, height).astype(np.float32)
    rgb = np.concatenate([model.color(centers[s:s + chunk], c).data for s in range(0, len(centers), chunk)])
    return TextureMap(np.clip(rgb, 0, 1).reshape(height, resolution, 3))


def import_texture(path) -> TextureMap:
    """Load an edited texture; PNG storage bounds values to [0, 1]."""
    tex = TextureMap.load(path)
    if tex.width < 1 or tex.height < 1:
        raise ValueError(f"{path}: empty texture")
    return tex


def export_asset(mesh: Mesh, texture: TextureMap, path, name: str = "avatar") -> dict[str, Path]:
    """Write ``<path>.obj`` (positions, uvs, normals), ``<path>.mtl`` and ``<path>.png``.

    OBJ texture coordinates put v=0 at the bottom row of the image, so the
    stored ``vt`` is ``(u, 1 - v)`` for our top-down texel rows.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    obj, mtl, png = path.with_suffix(".obj"), path.with_suffix(".mtl"), path.with_suffix(".png")
    texture.save(png)
    mtl.write_text(f"newmtl {name}\nKa 1 1 1\nKd 1 1 1\nKs 0 0 0\nillum 1\nmap_Kd {png.name}\n")
    lines = [f"mtllib {mtl.name}", f"o {name}"]
    lines += [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    has_uv = mesh.uvs is not None
    has_n = mesh.normals is not None
    if has_uv:
        lines += [f"vt {u:.6f} {1 - v:.6f}" for u, v in mesh.uvs]
    if has_n:
        lines += [f"vn {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.normals]
    lines.append(f"usemtl {name}")
    for tri in mesh.faces + 1:
        if has_uv and has_n:
            lines.append("f " + " ".join(f"{i}/{i}/{i}" for i in tri))
        elif has_uv:
            lines.append("f " + " ".join(f"{i}/{i}" for i in tri))
        elif has_n:
            lines.append("f " + " ".join(f"{i}//{i}" for i in tri))
        else:
            lines.append("f " + " ".join(str(i) for i in tri))
    obj.write_text("\n".join(lines) + "\n")
    return {"obj": obj, "mtl": mtl, "png": png}


def read_obj(path) -> Mesh:
    """Minimal reader for the files written by :func:`export_asset` (triangles, shared indices)."""
    verts, uvs, normals, faces = [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            u, v = (float(x) for x in parts[1:3])
            uvs.append([u, 1 - v])
        elif parts[0] == "vn":
            normals.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, int).reshape(-1, 3),
                np.array(uvs) if uvs else None, np.array(normals) if normals else None)


def codes_from_file(path) -> AvatarCodes:
    with np.load(path) as z:
        return AvatarCodes(*(z[k].astype(np.float32) for k in CODE_KINDS))
