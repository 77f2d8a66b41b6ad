"""Training loop: Adam over surfel parameters, densification and pruning, checkpoints."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .core import PARAM_FIELDS, Camera, SplatScene, orthonormalize
from .diff import backward
from .errors import FormatError, NumericError, ParameterError
from .ingest import ImageStack, init_scene
from .loss import DEFAULT_LAMBDA, LossReport
from .rasterizer import RenderBuffers, render

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
SPLIT_PIXELS = 1.5  # small/large split point, in back-projected pixel pitches
LOG_SCALED = ("scale_u", "scale_v")  # Adam steps taken on log(scale)
SCALE_FLOOR = 1e-3  # smallest scale, in pixel pitches

# learning-rate attribute for each parameter array
LR_OF = {"centers": "lr_center", "tangent_u": "lr_tangent", "tangent_v": "lr_tangent", "scale_u": "lr_scale",
         "scale_v": "lr_scale", "opacity": "lr_opacity", "albedo": "lr_albedo"}


@dataclass
class OptimConfig:
    """Optimizer settings.

    ``densify_stop`` defaults to half the iterations and ``densify_start`` to
    ``min(500, densify_stop)``. ``prune_scale`` defaults to 10 pixel pitches.
    """

    iterations: int = 7000
    lr_center: float = 2e-4
    lr_tangent: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_albedo: float = 2.5e-3
    lam: float = DEFAULT_LAMBDA
    densify_interval: int = 100
    densify_start: int | None = None
    densify_stop: int | None = None
    grad_threshold: float = 1e-3
    prune_opacity: float = 0.005
    prune_scale: float | None = None
    seed: int = 0
    init_opacity: float = 0.5
    depth_grad: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    tile_size: int = 16
    threads: int = 1
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.densify_stop is None:
            self.densify_stop = self.iterations // 2
        if self.densify_start is None:
            self.densify_start = min(500, self.densify_stop)
        self.validate()

    def validate(self) -> None:
        if self.iterations < 0:
            raise ParameterError("iterations must be non-negative")
        if not 0 <= self.densify_start <= self.densify_stop <= self.iterations:
            raise ParameterError("need 0 <= densify_start <= densify_stop <= iterations")
        if self.densify_interval < 1 or self.checkpoint_every < 1:
            raise ParameterError("densify_interval and checkpoint_every must be positive")
        for name in set(LR_OF.values()):
            if not getattr(self, name) >= 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.lam < 0:
            raise ParameterError("lambda must be non-negative")
        if not 0 < self.prune_opacity < 1:
            raise ParameterError("prune_opacity must lie in (0, 1)")
        if self.prune_scale is not None and not self.prune_scale > 0:
            raise ParameterError("prune_scale must be positive")
        if not 0 <= self.init_opacity <= 1:
            raise ParameterError("init_opacity must lie in [0, 1]")
        if self.threads < 1:
            raise ParameterError("threads must be at least 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(eq=False)
class AdamState:
    """First and second moments per parameter array plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def zeros(cls, scene: SplatScene, seed: int = 0) -> "AdamState":
        p = scene.params()
        return cls({k: np.zeros_like(a) for k, a in p.items()}, {k: np.zeros_like(a) for k, a in p.items()}, 0,
                   np.random.default_rng(seed))

    def check(self, scene: SplatScene) -> None:
        for k, a in scene.params().items():
            if self.m[k].shape != a.shape or self.v[k].shape != a.shape:
                raise ParameterError(f"optimizer state for {k} does not match the scene")

    def take(self, index: np.ndarray) -> None:
        for d in (self.m, self.v):
            for k in d:
                d[k] = d[k][index]

    def append_zeros(self, count: int) -> None:
        for d in (self.m, self.v):
            for k in d:
                d[k] = np.concatenate([d[k], np.zeros((count,) + d[k].shape[1:])])


def project(scene: SplatScene) -> None:
    """Restore scene invariants in place after an unconstrained update."""
    scene.tangent_u, scene.tangent_v = orthonormalize(scene.tangent_u, scene.tangent_v)
    np.clip(scene.opacity, 0.0, 1.0, out=scene.opacity)
    floor = SCALE_FLOOR * scene.pixel_pitch
    np.maximum(scene.scale_u, floor, out=scene.scale_u)
    np.maximum(scene.scale_v, floor, out=scene.scale_v)
    np.maximum(scene.albedo, 0.0, out=scene.albedo)


def step(scene: SplatScene, stack: ImageStack, cfg: OptimConfig, state: AdamState) -> LossReport:
    """One backward pass and Adam update; returns the loss before the update."""
    state.check(scene)
    report, grads = backward(scene, stack, cfg.lam, depth_grad=cfg.depth_grad, tile_size=cfg.tile_size,
                             threads=cfg.threads)
    g = grads.as_dict()
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** state.t, 1.0 - b2 ** state.t
    for name in PARAM_FIELDS:
        lr = getattr(cfg, LR_OF[name])
        arr = getattr(scene, name)
        grad = g[name] * arr if name in LOG_SCALED else g[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad ** 2
        if lr == 0.0:
            continue
        delta = lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if name in LOG_SCALED:
            arr *= np.exp(-delta)
        else:
            arr -= delta
    project(scene)
    dc = grads.d_center
    scene.grad_accum += np.linalg.norm(dc, axis=1)
    scene.grad_count += 1
    scene.grad_dir += dc
    return report


@dataclass(frozen=True)
class DensifySummary:
    cloned: int
    split: int
    pruned: int


def densify_and_prune(scene: SplatScene, cfg: OptimConfig, state: AdamState | None = None) -> DensifySummary:
    """Prune, then clone or split surfels whose mean positional gradient exceeds the threshold.

    Modifies ``scene`` (and ``state``) in place. New surfels are appended after
    the survivors with zero moments; densification statistics are reset.
    """
    pitch = scene.pixel_pitch
    prune_scale = cfg.prune_scale if cfg.prune_scale is not None else 10.0 * pitch
    smax = np.maximum(scene.scale_u, scene.scale_v)
    prune = (scene.opacity < cfg.prune_opacity) | (smax > prune_scale)
    mean_grad = scene.grad_accum / np.maximum(scene.grad_count, 1)
    hot = ~prune & (scene.grad_count > 0) & (mean_grad > cfg.grad_threshold)
    large = smax > SPLIT_PIXELS * pitch
    clone = hot & ~large
    split = hot & large

    rng = state.rng if state is not None else np.random.default_rng(cfg.seed)
    P = scene.params()
    new = {k: [] for k in PARAM_FIELDS}

    ci = np.nonzero(clone)[0]
    if len(ci):
        d = -scene.grad_dir[ci]
        dn = np.linalg.norm(d, axis=1, keepdims=True)
        d = np.where(dn > 0, d / np.where(dn > 0, dn, 1.0), 0.0)
        mag = rng.uniform(0.25, 0.75, size=(len(ci), 1)) * pitch
        for k in PARAM_FIELDS:
            new[k].append(P[k][ci].copy())
        new["centers"][-1] += d * mag

    si = np.nonzero(split)[0]
    if len(si):
        along_u = scene.scale_u[si] >= scene.scale_v[si]
        axis = np.where(along_u[:, None], scene.tangent_u[si], scene.tangent_v[si])
        sigma = np.where(along_u, scene.scale_u[si], scene.scale_v[si])
        for sign in (1.0, -1.0):
            for k in PARAM_FIELDS:
                new[k].append(P[k][si].copy())
            new["centers"][-1] += sign * 0.5 * sigma[:, None] * axis
            new["scale_u"][-1] /= 1.6
            new["scale_v"][-1] /= 1.6

    keep = np.nonzero(~prune & ~split)[0]
    added = len(ci) + 2 * len(si)
    for k in PARAM_FIELDS:
        setattr(scene, k, np.concatenate([P[k][keep]] + new[k]) if new[k] else P[k][keep].copy())
    if state is not None:
        state.take(keep)
        state.append_zeros(added)
    scene.reset_densify_stats()
    summary = DensifySummary(len(ci), len(si), int(prune.sum()))
    log.debug("densify: %s -> %d surfels", summary, len(scene))
    return summary


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, scene: SplatScene, state: AdamState, cfg: OptimConfig, iteration: int,
                    history: list[dict]) -> None:
    arrays = {f"p_{k}": a for k, a in scene.params().items()}
    arrays.update({f"m_{k}": a for k, a in state.m.items()})
    arrays.update({f"v_{k}": a for k, a in state.v.items()})
    arrays.update(grad_accum=scene.grad_accum, grad_count=scene.grad_count, grad_dir=scene.grad_dir)
    meta = {"version": CHECKPOINT_VERSION, "iteration": iteration, "adam_t": state.t,
            "pixel_pitch": scene.pixel_pitch, "camera": scene.camera.to_dict(), "config": cfg.to_dict(),
            "rng": state.rng.bit_generator.state, "history": history}
    path = Path(str(path).format(iteration=iteration))
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, meta=np.array(json.dumps(meta)), **arrays)
    tmp.replace(path)


def load_checkpoint(path):
    """Returns (scene, state, config, iteration, history)."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise FormatError(f"{path}: unsupported checkpoint version {meta.get('version')}")
            cam = Camera.from_dict(meta["camera"])
            p = {k: z[f"p_{k}"] for k in PARAM_FIELDS}
            scene = SplatScene(*(p[k] for k in PARAM_FIELDS), cam, float(meta["pixel_pitch"]),
                               z["grad_accum"], z["grad_count"], z["grad_dir"])
            rng = np.random.default_rng()
            rng.bit_generator.state = meta["rng"]
            state = AdamState({k: z[f"m_{k}"] for k in PARAM_FIELDS}, {k: z[f"v_{k}"] for k in PARAM_FIELDS},
                              int(meta["adam_t"]), rng)
    except (OSError, KeyError, ValueError) as exc:
        raise FormatError(f"{path}: not a readable checkpoint ({exc})") from exc
    return scene, state, OptimConfig.from_dict(meta["config"]), int(meta["iteration"]), meta["history"]


# ---------------------------------------------------------------------------

def normal_map(buffers: RenderBuffers, camera: Camera) -> np.ndarray:
    """World-space unit normals from rendered camera-space normals (zero where undefined)."""
    return buffers.unit_normals() @ camera.orientation.T


def _log_entry(iteration: int, report: LossReport, count: int) -> dict:
    return {"iteration": iteration, "L_c": report.photometric, "L_n": report.normal_reg, "total": report.total,
            "gaussians": count}


def reconstruct(stack: ImageStack, camera: Camera, cfg: OptimConfig, checkpoint=None, resume=None,
                log_path=None):
    """Fit surfels to ``stack``; returns (scene, final buffers, training log).

    ``checkpoint`` is written every ``cfg.checkpoint_every`` iterations and at
    exit; an ``{iteration}`` field in the path keeps one file per write.
    ``resume`` restarts from a checkpoint; ``cfg`` must then agree with the
    stored config except for ``iterations`` and ``threads``.
    """
    cfg.validate()
    if resume is not None:
        scene, state, saved, start, history = load_checkpoint(resume)
        mismatch = {k for k, v in saved.to_dict().items()
                    if k not in ("iterations", "threads", "densify_stop", "densify_start",
                                 "checkpoint_every") and getattr(cfg, k) != v}
        if mismatch:
            raise ParameterError(f"resume config differs from checkpoint in {sorted(mismatch)}")
        if start > cfg.iterations:
            raise ParameterError(f"checkpoint is at iteration {start}, beyond iterations={cfg.iterations}")
        if scene.camera.to_dict() != camera.to_dict():
            raise ParameterError("resume camera differs from the checkpoint camera")
    else:
        scene = init_scene(stack, camera, cfg.init_opacity)
        state = AdamState.zeros(scene, cfg.seed)
        start, history = 0, []

    out = open(log_path, "a" if resume is not None else "w") if log_path is not None else None
    try:
        for it in range(start, cfg.iterations):
            try:
                report = step(scene, stack, cfg, state)
            except NumericError as exc:
                raise NumericError(f"iteration {it + 1}: {exc}") from exc
            if not np.isfinite(report.total):
                raise NumericError(f"non-finite loss at iteration {it + 1}")
            entry = _log_entry(it + 1, report, len(scene))
            history.append(entry)
            if out is not None:
                out.write(json.dumps(entry) + "\n")
            done = it + 1
            if cfg.densify_start <= done <= cfg.densify_stop and done % cfg.densify_interval == 0:
                densify_and_prune(scene, cfg, state)
            if checkpoint is not None and done % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint, scene, state, cfg, done, history)
            if done % 500 == 0:
                log.info("iteration %d  loss %.6f  surfels %d", done, report.total, len(scene))
    finally:
        if out is not None:
            out.close()
    if checkpoint is not None:
        save_checkpoint(checkpoint, scene, state, cfg, max(start, cfg.iterations), history)
    return scene, render(scene, tile_size=cfg.tile_size, threads=cfg.threads), history
