"""Latent-conditioned networks: SDF ``f``, UV map ``g``, inverse UV map and color ``h``.

All four are plain MLPs over a positional encoding of their spatial input.
The latent codes enter through the first layer; since every point in a call
shares the same codes, their contribution is computed once and added as a
bias instead of being tiled per point.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Dual, Tensor
from .spherical import gt_uv, uv_to_direction

CODE_KINDS = ("geom", "color", "expr")


def positional_encode(p, num_freqs: int):
    """``[p, sin(2^k pi p), cos(2^k pi p)]`` for k < num_freqs, along the last axis.

    Accepts a Tensor of shape (N, d) or a Dual; returns the same kind.
    """
    if num_freqs < 0:
        raise ValueError("num_freqs must be >= 0")
    if num_freqs == 0:
        return p
    parts = [p]
    for k in range(num_freqs):
        scale = float(2.0**k * np.pi)
        if isinstance(p, Dual):
            z = p.scale(scale)
            parts += [z.sin(), z.cos()]
        else:
            z = ad.mul(p, scale)
            parts += [ad.sin(z), ad.cos(z)]
    if isinstance(p, Dual):
        return Dual.concat(parts, axis=-1)
    return ad.concat(parts, axis=-1)


def encoded_dim(in_dim: int, num_freqs: int) -> int:
    return in_dim * (1 + 2 * num_freqs)


@dataclass
class AvatarCodes:
    """Geometry, color and expression codes of one shape in one expression."""

    geom: object
    color: object
    expr: object

    def __post_init__(self):
        dims = set()
        for kind in CODE_KINDS:
            v = getattr(self, kind)
            arr = v.data if isinstance(v, Tensor) else np.asarray(v)
            if arr.ndim != 1:
                raise ValueError(f"{kind} code must be 1-d, got shape {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{kind} code has non-finite entries")
            dims.add(arr.shape[0])
        if len(dims) != 1:
            raise ValueError(f"code dimensions differ: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return len(self.numpy()["geom"])

    def numpy(self) -> dict[str, np.ndarray]:
        out = {}
        for kind in CODE_KINDS:
            v = getattr(self, kind)
            out[kind] = v.data if isinstance(v, Tensor) else np.asarray(v)
        return out

    def detach(self) -> "AvatarCodes":
        a = self.numpy()
        return AvatarCodes(a["geom"].copy(), a["color"].copy(), a["expr"].copy())

    def replace(self, **kw) -> "AvatarCodes":
        return dataclasses.replace(self, **kw)


@dataclass(frozen=True)
class MlpSpec:
    name: str
    input_kind: str            # "point" (3-d) or "uv" (2-d)
    codes: tuple[str, ...]
    num_freqs: int
    layers: int                # number of linear layers
    width: int
    out_dim: int
    activation: str = "relu"   # "softplus" or "relu"
    out_activation: str = "none"
    latent_dim: int = 512

    def __post_init__(self):
        if self.layers < 2:
            raise ValueError(f"{self.name}: an MLP needs at least 2 linear layers, got {self.layers}")
        if self.input_kind not in ("point", "uv"):
            raise ValueError(f"{self.name}: unknown input kind {self.input_kind!r}")
        if self.activation not in ("relu", "softplus") or self.out_activation not in ("none", "sigmoid"):
            raise ValueError(f"{self.name}: unknown activation")

    @property
    def raw_dim(self) -> int:
        return 3 if self.input_kind == "point" else 2

    @property
    def encoded_dim(self) -> int:
        return encoded_dim(self.raw_dim, self.num_freqs)

    @property
    def input_dim(self) -> int:
        return self.encoded_dim + self.latent_dim * len(self.codes)

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [self.width] * (self.layers - 1) + [self.out_dim]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        w = self.widths
        shapes = {}
        for i in range(self.layers):
            shapes[f"{self.name}.{i}.W"] = (w[i], w[i + 1])
            shapes[f"{self.name}.{i}.b"] = (w[i + 1],)
        return shapes

    def num_params(self) -> int:
        return int(sum(np.prod(s) for s in self.param_shapes().values()))


def init_mlp(spec: MlpSpec, rng: np.random.Generator, geometric_radius: float | None = None,
             dtype=np.float32) -> dict[str, np.ndarray]:
    """He-style init; with ``geometric_radius`` the SDF-style geometric init.

    The geometric variant makes the initial network approximate
    ``|p| - geometric_radius``: only the raw coordinates feed the first layer
    and the last layer is set up as a mean-pooling of the hidden units.
    """
    w = spec.widths
    params = {}
    for i in range(spec.layers):
        fan_in, fan_out = w[i], w[i + 1]
        last = i == spec.layers - 1
        if geometric_radius is not None:
            if last:
                W = rng.normal(np.sqrt(np.pi) / np.sqrt(fan_in), 1e-4, (fan_in, fan_out))
                b = np.full(fan_out, -geometric_radius)
            else:
                W = rng.normal(0.0, np.sqrt(2.0) / np.sqrt(fan_out), (fan_in, fan_out))
                b = np.zeros(fan_out)
                if i == 0:
                    W[3:spec.encoded_dim] = 0.0
                    W[spec.encoded_dim:] *= 0.1
        else:
            std = np.sqrt((1.0 if last else 2.0) / fan_in)
            W = rng.normal(0.0, std, (fan_in, fan_out))
            b = np.zeros(fan_out)
        params[f"{spec.name}.{i}.W"] = W.astype(dtype)
        params[f"{spec.name}.{i}.b"] = b.astype(dtype)
    return params


def _activate(h, kind: str):
    if isinstance(h, Dual):
        return h.softplus() if kind == "softplus" else h.relu()
    return ad.softplus(h) if kind == "softplus" else ad.relu(h)


def _finish(h, kind: str):
    if kind == "sigmoid":
        return h.sigmoid() if isinstance(h, Dual) else ad.sigmoid(h)
    return h


def mlp_forward(spec: MlpSpec, params: dict[str, Tensor], x, codes: Tensor):
    """Evaluate ``spec`` on points ``x`` (Tensor (N, d) or Dual) with shared ``codes``."""
    h = _hidden(spec, params, x, codes)
    last = spec.layers - 1
    W = params[f"{spec.name}.{last}.W"]
    b = params[f"{spec.name}.{last}.b"]
    h = h.matmul(W).add_const(b) if isinstance(h, Dual) else ad.add(ad.matmul(h, W), b)
    return _finish(h, spec.out_activation)


def _hidden(spec: MlpSpec, params, x, codes):
    enc = positional_encode(x, spec.num_freqs)
    W0 = params[f"{spec.name}.0.W"]
    b0 = params[f"{spec.name}.0.b"]
    e = spec.encoded_dim
    code_bias = ad.add(ad.matmul(ad.reshape(codes, (1, -1)), W0[e:]), b0)
    if isinstance(enc, Dual):
        h = enc.matmul(W0[:e]).add_const(code_bias)
    else:
        h = ad.add(ad.matmul(enc, W0[:e]), code_bias)
    for i in range(1, spec.layers - 1):
        h = _activate(h, spec.activation)
        W = params[f"{spec.name}.{i}.W"]
        b = params[f"{spec.name}.{i}.b"]
        h = h.matmul(W).add_const(b) if isinstance(h, Dual) else ad.add(ad.matmul(h, W), b)
    return _activate(h, spec.activation)


def fit_output_layer(spec: MlpSpec, params: dict[str, np.ndarray], inputs: np.ndarray,
                     targets: np.ndarray, ridge: float = 1e-3) -> None:
    """Solve the last linear layer in place by ridge regression (codes at zero).

    ``targets`` are pre-activation values of shape (N, out_dim).
    """
    view = {k: Tensor(v) for k, v in params.items()}
    codes = Tensor(np.zeros(spec.latent_dim * len(spec.codes), np.float32))
    feats = _hidden(spec, view, Tensor(inputs.astype(np.float32)), codes).data.astype(np.float64)
    A = np.hstack([feats, np.ones((len(inputs), 1))])
    sol = np.linalg.solve(A.T @ A + ridge * np.eye(A.shape[1]), A.T @ targets.reshape(len(inputs), -1))
    last = spec.layers - 1
    params[f"{spec.name}.{last}.W"] = sol[:-1].astype(np.float32)
    params[f"{spec.name}.{last}.b"] = sol[-1].astype(np.float32)


def _ball(rng, n, r_min, r_max):
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * rng.uniform(r_min**3, r_max**3, (n, 1)) ** (1 / 3)


def fit_sphere_output(spec: MlpSpec, params: dict[str, np.ndarray], radius: float,
                      rng: np.random.Generator, num_probes: int = 4096) -> None:
    """Refit the output layer of a geometrically initialized SDF net to ``|p| - radius``.

    The random hidden features only approximate a radial profile, so the
    last layer is solved against the exact one on probes in the ball of
    radius 1.5.
    """
    probes = _ball(rng, num_probes, 0.0, 1.5)
    fit_output_layer(spec, params, probes, np.linalg.norm(probes, axis=1) - radius)


def pretrain_spherical_uv(g: MlpSpec, ginv: MlpSpec, params: dict[str, np.ndarray], radius: float,
                          rng: np.random.Generator, steps: int, batch: int = 1024, lr: float = 1e-3) -> None:
    """Warm-start ``g`` on spherical coordinates and ``ginv`` on their inverse (codes at zero).

    A randomly initialized ``g`` is nearly constant, and the cycle term then
    tends to settle into a compressed ``g`` paired with a steep inverse.  The
    targets are shape-agnostic: directions on a shell for ``g`` and a sphere
    of the given radius for ``ginv``.
    """
    from .optim import Adam

    opt = Adam()
    for spec, kind in ((g, "point"), (ginv, "uv")):
        names = list(spec.param_shapes())
        codes = Tensor(np.zeros(spec.latent_dim * len(spec.codes), np.float32))
        for _ in range(steps):
            if kind == "point":
                x = _ball(rng, batch, 0.6 * radius, 1.3 * radius)
                y = gt_uv(x)
            else:
                x = rng.uniform(0, 1, (batch, 2))
                y = radius * uv_to_direction(x)
            tape = ad.Tape()
            view = {k: tape.leaf(params[k]) for k in names}
            out = mlp_forward(spec, view, Tensor(x.astype(np.float32)), codes)
            loss = ad.mean(ad.square(ad.sub(out, y.astype(np.float32))))
            grads = tape.backward(loss)
            opt.step(params, {k: grads.of(view[k]) for k in names}, {k: lr for k in names})


@dataclass
class ModelConfig:
    latent_dim: int = 512
    num_subjects: int = 1
    num_expressions: int = 1
    sdf_layers: int = 8
    sdf_width: int = 256
    uv_layers: int = 6
    uv_width: int = 256
    inv_layers: int = 6
    inv_width: int = 256
    color_layers: int = 6
    color_width: int = 256
    point_freqs: int = 6
    uv_freqs: int = 6
    init_radius: float = 0.7
    latent_init_std: float = 0.01
    uv_init_steps: int = 300

    @property
    def num_samples(self) -> int:
        return self.num_subjects * self.num_expressions

    def specs(self) -> dict[str, MlpSpec]:
        d = self.latent_dim
        return {
            "f": MlpSpec("f", "point", ("geom", "expr"), self.point_freqs, self.sdf_layers,
                         self.sdf_width, 1, "softplus", "none", d),
            "g": MlpSpec("g", "point", ("geom", "expr"), self.point_freqs, self.uv_layers,
                         self.uv_width, 2, "relu", "sigmoid", d),
            "ginv": MlpSpec("ginv", "uv", ("geom", "expr"), self.uv_freqs, self.inv_layers,
                            self.inv_width, 3, "relu", "none", d),
            "h": MlpSpec("h", "uv", ("color", "expr"), self.uv_freqs, self.color_layers,
                         self.color_width, 3, "relu", "sigmoid", d),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


NETWORKS = ("f", "g", "ginv", "h")
LATENT_NAMES = {"geom": "latent.geom", "color": "latent.color", "expr": "latent.expr"}


def _codes_tensor(codes: AvatarCodes, kinds) -> Tensor:
    return ad.concat([ad.reshape(ad._wrap(getattr(codes, k)), (-1,)) for k in kinds], axis=0)


def _points(x) -> Tensor | Dual:
    if isinstance(x, (Tensor, Dual)):
        return x
    return Tensor(np.atleast_2d(np.asarray(x, dtype=np.float32)))


class Model:
    """Parameters of the four networks plus the autodecoder latent tables.

    ``params`` is a flat name -> array dict; evaluation functions take a
    name -> Tensor view (see :meth:`tensors`) so the same code runs with and
    without a tape.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.specs = config.specs()
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        params = {}
        specs = config.specs()
        for name in NETWORKS:
            spec = specs[name]
            radius = config.init_radius if name == "f" else None
            net = init_mlp(spec, rng, geometric_radius=radius)
            if radius is not None:
                fit_sphere_output(spec, net, radius, rng)
            params.update(net)
        if config.uv_init_steps:
            pretrain_spherical_uv(specs["g"], specs["ginv"], params, 0.85, rng, config.uv_init_steps)
        d = config.latent_dim
        s = config.latent_init_std
        params["latent.geom"] = rng.normal(0, s, (config.num_subjects, d)).astype(np.float32)
        params["latent.color"] = rng.normal(0, s, (config.num_subjects, d)).astype(np.float32)
        params["latent.expr"] = rng.normal(0, s, (config.num_samples, d)).astype(np.float32)
        return cls(config, params)

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def network_param_names(self, *nets: str) -> list[str]:
        names = []
        for n in nets:
            names += list(self.specs[n].param_shapes())
        return names

    def tensors(self, tape: ad.Tape | None = None, trainable=()) -> dict[str, Tensor]:
        trainable = set(trainable)
        out = {}
        for k, v in self.params.items():
            out[k] = tape.leaf(v) if (tape is not None and k in trainable) else Tensor(v)
        return out

    # ---- latent tables ----
    def sample_index(self, subject: int, expression: int) -> int:
        return subject * self.config.num_expressions + expression

    def codes_for(self, subject: int, expression: int, params: dict[str, Tensor] | None = None
                  ) -> AvatarCodes:
        i = self.sample_index(subject, expression)
        if params is None:
            return AvatarCodes(self.params["latent.geom"][subject].copy(),
                               self.params["latent.color"][subject].copy(),
                               self.params["latent.expr"][i].copy())
        return AvatarCodes(params["latent.geom"][subject], params["latent.color"][subject],
                           params["latent.expr"][i])

    # ---- network evaluation ----
    def _view(self, params):
        return params if params is not None else self.tensors()

    def sdf(self, p, codes: AvatarCodes, params=None):
        params = self._view(params)
        x = _points(p)
        if not isinstance(x, Dual) and not np.all(np.isfinite(x.data)):
            raise ValueError("sdf: non-finite input point")
        out = mlp_forward(self.specs["f"], params, x, _codes_tensor(codes, ("geom", "expr")))
        if isinstance(out, Dual):
            return out
        return ad.reshape(out, (out.shape[0],))

    def sdf_and_gradient(self, p, codes: AvatarCodes, params=None) -> tuple[Tensor, Tensor]:
        params = self._view(params)
        c = _codes_tensor(codes, ("geom", "expr"))
        spec = self.specs["f"]
        return ad.input_gradient(lambda d: mlp_forward(spec, params, d, c), _points(p))

    def uv(self, p, codes: AvatarCodes, params=None):
        params = self._view(params)
        return mlp_forward(self.specs["g"], params, _points(p), _codes_tensor(codes, ("geom", "expr")))

    def inverse_uv(self, uv, codes: AvatarCodes, params=None):
        params = self._view(params)
        return mlp_forward(self.specs["ginv"], params, _points(uv), _codes_tensor(codes, ("geom", "expr")))

    def color(self, uv, codes: AvatarCodes, params=None):
        params = self._view(params)
        return mlp_forward(self.specs["h"], params, _points(uv), _codes_tensor(codes, ("color", "expr")))

    # ---- persistence ----
    def to_checkpoint(self, path, meta: dict | None = None, extra: dict[str, np.ndarray] | None = None):
        m = {"model": dataclasses.asdict(self.config)}
        m.update(meta or {})
        arrays = dict(self.params)
        arrays.update(extra or {})
        write_container(path, m, arrays)

    @classmethod
    def from_checkpoint(cls, path) -> tuple["Model", dict, dict[str, np.ndarray]]:
        meta, arrays = read_container(path)
        config = ModelConfig.from_dict(meta["model"])
        names = set()
        for spec in config.specs().values():
            names |= set(spec.param_shapes())
        names |= set(LATENT_NAMES.values())
        missing = names - set(arrays)
        if missing:
            raise CheckpointError(f"checkpoint missing blocks: {sorted(missing)[:5]}")
        params = {k: arrays[k] for k in arrays if k in names}
        extra = {k: arrays[k] for k in arrays if k not in names}
        return cls(config, params), meta, extra


# ---- checkpoint container ---------------------------------------------

MAGIC = b"MSDFCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Magic, version, JSON config block, then named float32 arrays (little endian)."""
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<IQ", FORMAT_VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    pos = len(MAGIC)
    try:
        version, meta_len = struct.unpack_from("<IQ", buf, pos)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported format version {version}")
        pos += 12
        meta = json.loads(buf[pos:pos + meta_len])
        pos += meta_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
            pos += 8 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        if isinstance(e, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last block")
    return meta, arrays
