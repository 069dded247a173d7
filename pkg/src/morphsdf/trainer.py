"""Two-stage autodecoder training.

Stage 1 fits geometry, the uv maps and the texture network from surface
samples and landmarks.  Stage 2 freezes both uv networks and adds an image
term through differentiable sphere tracing of the training views.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as L
from .networks import LATENT_NAMES, Model, ModelConfig
from .optim import Adam, cosine_lr
from .renderer import MAX_STEPS, render_differentiable

log = logging.getLogger(__name__)

STAGE1_TERMS = ("surface", "eikonal", "normal", "uv", "tex", "landmark", "reg")
STAGE2_TERMS = STAGE1_TERMS + ("img_l2", "img_percep")


@dataclass
class TrainConfig:
    stage: int = 1
    steps: int = 2000
    batch_size: int = 4
    surface_points: int = 512
    eikonal_points: int = 1024
    rays_per_view: int = 4096
    lr_net: float = 5e-4
    lr_latent: float = 1e-3
    lr_schedule: str = "cosine"     # or "constant"
    lr_floor: float = 0.1           # cosine end point as a fraction of the base rates
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    threads: int = 1
    trace_steps: int = MAX_STEPS
    weights: L.LossWeights = field(default_factory=L.LossWeights)

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        for name in ("steps", "batch_size", "surface_points", "eikonal_points", "rays_per_view",
                     "threads", "trace_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}")
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights.from_dict(self.weights)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    def epochs(self, num_samples: int) -> float:
        return self.steps * self.batch_size / num_samples


@dataclass
class Checkpoint:
    model: Model
    config: TrainConfig
    stage: int
    step: int
    optimizer: Adam
    history: list[L.LossReport] = field(default_factory=list)

    def save(self, path) -> None:
        meta = {"train": self.config.to_dict(), "stage": self.stage, "step": self.step,
                "adam": {"beta1": self.optimizer.beta1, "beta2": self.optimizer.beta2,
                         "eps": self.optimizer.eps, "skipped": self.optimizer.skipped}}
        self.model.to_checkpoint(path, meta, self.optimizer.state_arrays())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        model, meta, extra = Model.from_checkpoint(path)
        a = meta.get("adam", {})
        opt = Adam.from_arrays(extra, a.get("beta1", 0.9), a.get("beta2", 0.999), a.get("eps", 1e-8),
                               a.get("skipped", 0))
        cfg = TrainConfig.from_dict(meta["train"]) if "train" in meta else TrainConfig()
        return cls(model, cfg, int(meta.get("stage", 0)), int(meta.get("step", 0)), opt)


# ---- batching -------------------------------------------------------------

@dataclass
class SampleBatch:
    index: int                 # position in dataset.samples
    surface_idx: np.ndarray    # rows of the sample's surface points
    eikonal_points: np.ndarray
    view: int
    pixels: np.ndarray         # flat pixel indices of the ray subset
    grid: tuple[int, int]


def epoch_order(num_samples: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 17, epoch]).permutation(num_samples)


def ray_grid(height: int, width: int, rays: int, rng: np.random.Generator) -> tuple[np.ndarray, tuple[int, int]]:
    """Strided pixel subgrid with a random offset covering about ``rays`` pixels."""
    stride = max(1, int(round(np.sqrt(height * width / rays))))
    oy, ox = rng.integers(0, stride, 2)
    ys = np.arange(oy, height, stride)
    xs = np.arange(ox, width, stride)
    ys, xs = ys[:height // stride], xs[:width // stride]
    return (ys[:, None] * width + xs[None, :]).reshape(-1), (len(ys), len(xs))


def sample_batch(dataset, config: TrainConfig, step: int) -> list[SampleBatch]:
    """The samples and point/ray subsets used at ``step``; a pure function of (seed, step).

    Samples are drawn through a fresh permutation per epoch, so each one is
    visited exactly once per epoch.
    """
    n = len(dataset.samples)
    out = []
    for k in range(config.batch_size):
        pos = step * config.batch_size + k
        epoch, within = divmod(pos, n)
        idx = int(epoch_order(n, config.seed, epoch)[within])
        smp = dataset.samples[idx]
        rng = np.random.default_rng([config.seed, 29, config.stage, step, k])
        npts = len(smp.points)
        surf = rng.choice(npts, config.surface_points, replace=config.surface_points > npts)
        eik = L.eikonal_points(rng, smp.points, config.eikonal_points)
        view = int(rng.integers(len(smp.views)))
        h, w = smp.views[view].mask.shape
        pixels, grid = ray_grid(h, w, config.rays_per_view, rng)
        out.append(SampleBatch(idx, np.sort(surf), eik, view, pixels, grid))
    return out


# ---- per-sample objectives -----------------------------------------------

def geometry_terms(model: Model, params, codes, smp, surf_idx, eik_pts) -> dict[str, ad.Tensor]:
    """Stage-1 terms for one sample (every term of stage 1 except the latent penalty)."""
    pts = smp.points[surf_idx]
    ns = len(pts)
    allpts = np.vstack([pts, eik_pts]).astype(np.float32)
    value, grad = model.sdf_and_gradient(allpts, codes, params)
    terms = {
        "surface": L.surface_loss(value[:ns]),
        "eikonal": L.eikonal_loss(grad[ns:]),
        "normal": L.normal_loss(grad[:ns], smp.normals[surf_idx]),
    }
    lm = smp.landmark_points
    query = np.vstack([pts, lm]).astype(np.float32)
    uv = model.uv(query, codes, params)
    back = model.inverse_uv(uv, codes, params)
    terms["uv"] = L.uv_cycle_loss(pts, back[:ns])
    terms["tex"] = L.texture_loss(model.color(uv[:ns], codes, params), smp.colors[surf_idx])
    terms["landmark"] = L.landmark_uv_loss(uv[ns:], smp.landmark_uvs, lm, back[ns:])
    return terms


def image_terms(model: Model, params, codes, view, pixels, grid, trace_steps=MAX_STEPS,
                percep: bool = True):
    """Masked image terms on a pixel subset of one view, plus the render itself."""
    rd = render_differentiable(model, params, codes, view.camera, pixels, grid, trace_steps)
    target = view.image.reshape(-1, 3)[pixels].reshape(*grid, 3)
    gt_mask = view.mask.reshape(-1)[pixels].reshape(grid)
    terms = {"img_l2": L.image_l2_loss(rd.image, target, gt_mask)}
    if percep:
        terms["img_percep"] = L.perceptual_proxy_loss(rd.image, target, gt_mask)
    return terms, rd


def trainable_names(model: Model, stage: int) -> list[str]:
    nets = ("f", "g", "ginv", "h") if stage == 1 else ("f", "h")
    return model.network_param_names(*nets) + list(LATENT_NAMES.values())


def _sample_step(model, dataset, config, item: SampleBatch, trainable):
    smp = dataset.samples[item.index]
    tape = ad.Tape()
    params = model.tensors(tape, trainable)
    codes = model.codes_for(smp.subject, smp.expression, params)
    terms = geometry_terms(model, params, codes, smp, item.surface_idx, item.eikonal_points)
    terms["reg"] = L.latent_reg(codes)
    if config.stage == 2:
        img, _ = image_terms(model, params, codes, smp.views[item.view], item.pixels, item.grid,
                             config.trace_steps, config.weights.img_percep > 0)
        terms.update(img)
    total, report = L.combine(terms, config.weights)
    grads = tape.backward(total)
    return {k: grads.of(params[k]) for k in trainable}, report


def _average_reports(reports: list[L.LossReport]) -> L.LossReport:
    out = L.LossReport()
    for name in reports[0].terms:
        vals = np.array([r.terms[name] for r in reports], np.float64)
        raw, w, _ = vals.mean(axis=0)
        out.terms[name] = (float(raw), float(w), float(raw * w))
    out.total = float(np.mean([r.total for r in reports]))
    return out


def train_step(ckpt: Checkpoint, dataset, pool: ThreadPoolExecutor | None = None) -> L.LossReport:
    """One optimizer step on the batch for ``ckpt.step``; gradients are averaged over the batch."""
    config, model = ckpt.config, ckpt.model
    batch = sample_batch(dataset, config, ckpt.step)
    trainable = trainable_names(model, config.stage)
    fn = lambda item: _sample_step(model, dataset, config, item, trainable)  # noqa: E731
    results = list(pool.map(fn, batch)) if pool is not None else [fn(b) for b in batch]
    # fixed-order reduction keeps runs reproducible for any thread count
    grads = {k: sum(r[0][k] for r in results) / len(results) for k in trainable}
    rows = {}
    for kind, name in LATENT_NAMES.items():
        rows[name] = np.array([_latent_row(model, dataset.samples[b.index], kind) for b in batch])
    scale = 1.0
    if config.lr_schedule == "cosine":
        scale = cosine_lr(1.0, ckpt.step, config.steps, config.lr_floor)
    lrs = {k: scale * (config.lr_latent if k.startswith("latent.") else config.lr_net) for k in trainable}
    ckpt.optimizer.step(model.params, grads, lrs, rows)
    ckpt.step += 1
    return _average_reports([r[1] for r in results])


def _latent_row(model: Model, smp, kind: str) -> int:
    if kind == "expr":
        return model.sample_index(smp.subject, smp.expression)
    return smp.subject


def _run(ckpt: Checkpoint, dataset, steps: int, log_stream=None, checkpoint_path=None) -> Checkpoint:
    cfg = ckpt.config
    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for _ in range(steps):
            report = train_step(ckpt, dataset, pool)
            ckpt.history.append(report)
            if log_stream is not None and (ckpt.step % cfg.log_every == 0 or ckpt.step == 1):
                log_stream.write(report.line(stage=cfg.stage, step=ckpt.step) + "\n")
                log_stream.flush()
            if checkpoint_path and cfg.checkpoint_every and ckpt.step % cfg.checkpoint_every == 0:
                ckpt.save(checkpoint_path)
    finally:
        if pool is not None:
            pool.shutdown()
    if checkpoint_path:
        ckpt.save(checkpoint_path)
    return ckpt


def model_config_for(dataset, **overrides) -> ModelConfig:
    return ModelConfig(num_subjects=len(dataset.subjects), num_expressions=dataset.config.num_expressions,
                       **overrides)


def train_stage1(dataset, config: TrainConfig, model_config: ModelConfig | None = None,
                 log_stream=None, checkpoint_path=None, model_seed: int | None = None) -> Checkpoint:
    if len(dataset.samples) == 0:
        raise ValueError("train_stage1: empty dataset")
    config = dataclasses.replace(config, stage=1)
    mc = model_config or model_config_for(dataset)
    if mc.num_samples != len(dataset.samples):
        raise ValueError("model latent tables do not match the dataset size")
    model = Model.create(mc, config.seed if model_seed is None else model_seed)
    ckpt = Checkpoint(model, config, 1, 0, Adam(config.beta1, config.beta2, config.adam_eps))
    return _run(ckpt, dataset, config.steps, log_stream, checkpoint_path)


def train_stage2(stage1: Checkpoint, dataset, config: TrainConfig, log_stream=None,
                 checkpoint_path=None) -> Checkpoint:
    """Continue from a stage-1 checkpoint with image supervision; the uv networks stay fixed.

    The optimizer state carries over so network and latent moments continue
    where stage 1 left them; the step counter restarts for the batch schedule.
    """
    if stage1.stage != 1:
        raise ValueError(f"train_stage2 needs a stage-1 checkpoint, got stage {stage1.stage}")
    config = dataclasses.replace(config, stage=2)
    opt = Adam.from_arrays(stage1.optimizer.state_arrays(), config.beta1, config.beta2, config.adam_eps,
                           stage1.optimizer.skipped)
    ckpt = Checkpoint(stage1.model.copy(), config, 2, 0, opt)
    return _run(ckpt, dataset, config.steps, log_stream, checkpoint_path)
