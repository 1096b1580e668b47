"""Training schedule, scene rendering with the semantic branches, and checkpoints.

A run has two stages driven by one global step counter:

* geometry (``geometry_iters`` steps): density and appearance grids are fit
  to the RGB images. This stands in for the pretrained radiance field the
  semantic stage starts from.
* segmentation (``total_iters`` steps): density is frozen. Phase 1 trains the
  feature and label grids, the transient-query attention and the adapter.
  Phase 2 additionally fine-tunes the appearance grid at a reduced rate. The
  self-cross loss replaces the plain adapter reconstruction loss from
  ``sct_start_fraction`` on.

Each step draws its rays from ``default_rng([seed, step])``, so a run resumed
from a checkpoint replays the same batches as an uninterrupted one.
"""
from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import attention as attn
from . import autodiff as ad
from . import semantics as sem
from .autodiff import Tensor
from .dataio import SceneManifest, load_training_view, read_text
from .errors import ConfigError, DimensionError, FormatError, LoadError, NumericError
from .metrics import EvalResult, confusion_matrix, scores_from_confusion
from .optim import AdamState, adam_step
from .semantics import TextFeatureSet
from .volume import (GRID_IDS, Camera, SceneVolumes, generate_rays, interpolation_matrix, ray_box_bounds,
                     render_quantity, render_weights, stratified_samples, total_variation)

PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    total_iters: int = 3000
    phase1_fraction: float = 1 / 3
    sct_start_fraction: float = 8 / 15
    rays_per_batch: int = 512
    samples_per_ray: int = 96
    lr_grids: float = 0.02
    lr_branches: float = 1e-3
    sct_lr_scale: float = 0.3
    lr_finetune_grids: float = 5e-3
    lr_decay: float = 0.1
    alpha: float = 0.2
    beta: float = 0.3
    gamma: float = 0.5
    tau: float = 0.07
    pseudo_temperature: float = 0.07
    lambda_s: float = 1.0
    lambda_r: float = 1.0
    lambda_ce: float = 1.0
    lambda_aug: float = 1.0
    ce_to_features: bool = False
    seed: int = 0
    precision: str = "float32"
    resolution: int = 48
    tq_rank: int = 8
    attention_variant: str = "normalized"
    use_adapter: bool = True
    use_tq: bool = True
    geometry_iters: int = 600
    geometry_rays: int = 1024
    lr_geometry: float = 0.1
    geometry_lr_decay: float = 0.1
    density_scale: float = 25.0
    tv_weight: float = 0.01
    sparsity_weight: float = 0.0
    weight_threshold: float = 1e-3
    log_every: int = 200

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.total_iters < 0 or self.geometry_iters < 0:
            raise ConfigError("total_iters: iteration counts must be non-negative")
        if not 0 < self.phase1_fraction < self.sct_start_fraction < 1:
            raise ConfigError("phase1_fraction: need 0 < phase1_fraction < sct_start_fraction < 1")
        for name in ("lr_grids", "lr_branches", "lr_finetune_grids", "lr_geometry", "lr_decay",
                     "geometry_lr_decay", "sct_lr_scale", "tau", "pseudo_temperature", "density_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive")
        for name in ("alpha", "beta", "gamma"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name}: must lie in [0, 1]")
        for name in ("lambda_s", "lambda_r", "lambda_ce", "lambda_aug", "weight_threshold", "tv_weight",
                     "sparsity_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative")
        for name in ("rays_per_batch", "geometry_rays", "resolution", "tq_rank", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be at least 1")
        if self.samples_per_ray < 2:
            raise ConfigError("samples_per_ray: must be at least 2")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision: expected one of {sorted(PRECISIONS)}")
        if self.attention_variant not in attn.VARIANTS:
            raise ConfigError(f"attention_variant: expected one of {list(attn.VARIANTS)}")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def phase2_start(self) -> int:
        return int(round(self.phase1_fraction * self.total_iters))

    @property
    def sct_start(self) -> int:
        return int(round(self.sct_start_fraction * self.total_iters))

    @property
    def loss_weights(self) -> dict[str, float]:
        return {"distill": self.lambda_s, "self_cross": self.lambda_r, "reconstruction": self.lambda_r,
                "ensemble_ce": self.lambda_ce, "aug": self.lambda_aug}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in doc.items():
            if key not in known:
                raise ConfigError(f"{key}: unknown config field")
            default = known[key].default
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{key}: expected a boolean")
            elif isinstance(default, int):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"{key}: expected an integer")
            elif isinstance(default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{key}: expected a number")
                value = float(value)
            elif isinstance(default, str) and not isinstance(value, str):
                raise ConfigError(f"{key}: expected a string")
            kwargs[key] = value
        return cls(**kwargs)


def load_config(path) -> TrainConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise LoadError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return TrainConfig.from_dict(doc)


# -- model state ----------------------------------------------------------------------------

BACKGROUND_IDS = ("bg_rgb", "bg_feature", "bg_label")
OPTIMIZER_GROUPS = ("geometry", "grids", "branches", "finetune")


@dataclass
class TrainState:
    """Everything a run mutates: grids, background vectors, branch params and Adam moments."""

    volumes: SceneVolumes
    background: dict[str, Tensor]
    adapter: attn.AdapterParams
    tq: attn.AttentionParams
    optimizers: dict[str, AdamState]
    config: TrainConfig
    step: int = 0

    @property
    def feature_dim(self) -> int:
        return self.volumes.feature_dim

    def parameters(self) -> dict[str, Tensor]:
        out = {gid: self.volumes.grid(gid) for gid in GRID_IDS}
        out.update(self.background)
        out.update({f"adapter_{k}": v for k, v in self.adapter.tensors().items()})
        out.update({f"tq_{k}": v for k, v in self.tq.tensors().items()})
        return out

    def group(self, name: str) -> list[str]:
        if name == "geometry":
            return ["density", "appearance", "bg_rgb"]
        if name == "grids":
            return ["feature", "label", "bg_feature", "bg_label"]
        if name == "branches":
            return [k for k in self.parameters() if k.startswith(("adapter_", "tq_"))]
        if name == "finetune":
            return ["appearance", "bg_rgb"]
        raise KeyError(name)


def init_state(config: TrainConfig, feature_dim: int) -> TrainState:
    """Near-transparent density, small Gaussian grids, fresh optimizer moments."""
    dtype = config.dtype
    rng = np.random.default_rng([config.seed, 0])
    res = (config.resolution,) * 3
    # effective density softplus(raw) * density_scale starts near 0.1 (mostly transparent)
    volumes = SceneVolumes.initialize(res, feature_dim, rng, density_init=0.1 / config.density_scale, dtype=dtype)
    for gid in GRID_IDS:
        volumes.grid(gid).requires_grad = True
    background = {
        "bg_rgb": ad.parameter(np.zeros(3, dtype=dtype)),
        "bg_feature": ad.parameter((rng.standard_normal(feature_dim) * 0.01).astype(dtype)),
        "bg_label": ad.parameter((rng.standard_normal(feature_dim) * 0.01).astype(dtype)),
    }
    adapter = attn.AdapterParams.initialize(feature_dim, config.tq_rank, rng, alpha=config.alpha, beta=config.beta,
                                            variant=config.attention_variant, dtype=dtype)
    tq = attn.AttentionParams.initialize(feature_dim, config.tq_rank, rng, variant=config.attention_variant,
                                         dtype=dtype)
    # the sample-level attention enters through a residual, start it near zero
    tq.wv.data *= 0.1
    optimizers = {
        "geometry": AdamState(learning_rate=config.lr_geometry),
        "grids": AdamState(learning_rate=config.lr_grids),
        "branches": AdamState(learning_rate=config.lr_branches),
        "finetune": AdamState(learning_rate=config.lr_finetune_grids),
    }
    return TrainState(volumes, background, adapter, tq, optimizers, config)


# -- checkpoints ----------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"LSRC"
CHECKPOINT_VERSION = 1


def _checkpoint_entries(state: TrainState) -> list[tuple[str, np.ndarray]]:
    entries = [(f"param/{k}", v.data) for k, v in state.parameters().items()]
    for group in OPTIMIZER_GROUPS:
        opt = state.optimizers[group]
        for name in sorted(opt.first_moment):
            entries.append((f"adam/{group}/m/{name}", opt.first_moment[name]))
            entries.append((f"adam/{group}/v/{name}", opt.second_moment[name]))
    return entries


def encode_checkpoint(state: TrainState) -> bytes:
    entries = _checkpoint_entries(state)
    header = {
        "config": state.config.to_dict(),
        "step": state.step,
        "adam_steps": {g: state.optimizers[g].step_count for g in OPTIMIZER_GROUPS},
        "entries": [{"name": n, "dtype": np.dtype(a.dtype).str.lstrip("<>="), "shape": list(a.shape)}
                    for n, a in entries],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(head)), head]
    for _, arr in entries:
        parts.append(np.ascontiguousarray(arr, dtype=np.dtype(arr.dtype).newbyteorder("<")).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, feature_dim: int | None = None) -> TrainState:
    """Rebuild a :class:`TrainState`; ``feature_dim`` checks the stored D."""
    if len(buf) < 12:
        raise FormatError("checkpoint truncated in header", len(buf))
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {buf[:4]!r}", 0)
    version, head_len = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise LoadError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})")
    if 12 + head_len > len(buf):
        raise FormatError("checkpoint truncated in header", len(buf))
    try:
        header = json.loads(buf[12:12 + head_len].decode("utf-8"))
        config = TrainConfig.from_dict(header["config"])
        entries = header["entries"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed checkpoint header: {exc}", 12) from None
    offset = 12 + head_len
    arrays: dict[str, np.ndarray] = {}
    for entry in entries:
        dt = np.dtype("<" + entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + count * dt.itemsize
        if end > len(buf):
            raise FormatError(f"checkpoint truncated in '{entry['name']}'", len(buf))
        arrays[entry["name"]] = np.frombuffer(buf, dtype=dt, count=count, offset=offset).astype(
            dt.newbyteorder("="), copy=True).reshape(entry["shape"])
        offset = end
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after checkpoint data", offset)

    stored_dim = arrays["param/feature"].shape[-1]
    if feature_dim is not None and stored_dim != feature_dim:
        raise DimensionError(f"checkpoint feature dimension {stored_dim} does not match expected {feature_dim}")
    state = init_state(config, stored_dim)
    params = state.parameters()
    for name, tensor in params.items():
        key = f"param/{name}"
        if key not in arrays:
            raise FormatError(f"checkpoint lacks parameter '{name}'", 12)
        if arrays[key].shape != tensor.shape:
            raise DimensionError(f"checkpoint parameter '{name}' has shape {arrays[key].shape}, "
                                 f"expected {tensor.shape}")
        tensor.data = arrays[key]
    for group in OPTIMIZER_GROUPS:
        opt = state.optimizers[group]
        opt.step_count = int(header["adam_steps"][group])
        prefix = f"adam/{group}/m/"
        for key in arrays:
            if key.startswith(prefix):
                name = key[len(prefix):]
                opt.first_moment[name] = arrays[key]
                opt.second_moment[name] = arrays[f"adam/{group}/v/{name}"]
    state.step = int(header["step"])
    return state


def save_checkpoint(state: TrainState, path) -> None:
    try:
        Path(path).write_bytes(encode_checkpoint(state))
    except OSError as exc:
        raise LoadError(f"cannot write checkpoint {path}: {exc.strerror}") from None


def load_checkpoint(path, feature_dim: int | None = None) -> TrainState:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    return decode_checkpoint(buf, feature_dim)


# -- ray pools and rendering -------------------------------------------------------------------

@dataclass
class RayPool:
    """All pixels of a set of views flattened to rays with their supervision."""

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    hit: np.ndarray
    rgb: np.ndarray
    features: np.ndarray
    relevance: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.origins)


def clip_bounds(origins: np.ndarray, directions: np.ndarray, near: float, far: float):
    """Per-ray sampling interval: the camera range clipped to the unit cube."""
    tmin, tmax = ray_box_bounds(origins, directions)
    lo = np.maximum(tmin, near)
    hi = np.minimum(tmax, far)
    hit = hi > lo + 1e-6
    return np.where(hit, lo, near), np.where(hit, hi, near + 1.0), hit


def view_relevance(features: np.ndarray, text: TextFeatureSet) -> np.ndarray:
    """Per-view normalised relevance of the raw features against the augmented text, (H*W) x N."""
    h, w, d = features.shape
    logits = sem.relevance_logits(features.reshape(-1, d).astype(np.float64),
                                  text.for_augmentation().astype(np.float64)).data
    zbar = sem.normalize_relevance(logits.T.reshape(-1, h, w))
    return zbar.reshape(len(zbar), -1).T


def build_ray_pool(manifest: SceneManifest, indices, text: TextFeatureSet | None = None, dtype=np.float32) -> RayPool:
    parts = {k: [] for k in ("origins", "directions", "rgb", "features", "relevance")}
    for idx in indices:
        view = load_training_view(manifest, idx, with_mask=False)
        if view.features.shape[-1] != (text.dim if text is not None else view.features.shape[-1]):
            raise DimensionError(f"frame {idx}: features have D={view.features.shape[-1]}, text has D={text.dim}")
        o, d = generate_rays(view.camera)
        parts["origins"].append(o)
        parts["directions"].append(d)
        parts["rgb"].append(view.rgb.reshape(-1, 3))
        parts["features"].append(view.features.reshape(-1, view.features.shape[-1]))
        if text is not None:
            parts["relevance"].append(view_relevance(view.features, text))
    origins = np.concatenate(parts["origins"])
    directions = np.concatenate(parts["directions"])
    near, far, hit = clip_bounds(origins, directions, manifest.near, manifest.far)
    return RayPool(origins, directions, near, far, hit,
                   np.concatenate(parts["rgb"]).astype(dtype),
                   np.concatenate(parts["features"]).astype(dtype),
                   np.concatenate(parts["relevance"]).astype(dtype) if text is not None else None)


@dataclass
class RayBatch:
    """Sample geometry for a batch with the (constant) density weights already applied.

    ``interp`` maps kept samples to voxels, ``gather`` maps rays to kept samples
    with the volume-rendering weights as entries, ``composite = gather @ interp``
    and ``residual`` is the background share 1 - sum(w) per ray.
    """

    interp: sp.csr_matrix
    gather: sp.csr_matrix
    composite: sp.csr_matrix
    residual: np.ndarray


def _softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(x, 0.0)


def density_weights(volumes: SceneVolumes, positions: np.ndarray, deltas: np.ndarray,
                    interp: sp.csr_matrix | None = None) -> np.ndarray:
    """Rendering weights from the current density grid, without building a graph."""
    if interp is None:
        interp = interpolation_matrix(volumes.resolution, positions)
    raw = (interp @ volumes.density.data[..., 0].reshape(-1)).reshape(deltas.shape)
    tau = _softplus_np(raw) * deltas
    trans = np.exp(-(np.cumsum(tau, axis=1) - tau))
    return trans * -np.expm1(-tau)


def prepare_batch(volumes: SceneVolumes, origins, directions, near, far, hit, n_samples: int,
                  rng, threshold: float, dtype, density_scale: float = 1.0) -> RayBatch:
    """Frozen-density sampling: keep samples whose weight exceeds ``threshold``."""
    n_rays = len(origins)
    n_vox = int(np.prod(volumes.resolution))
    rays = np.nonzero(hit)[0]
    if len(rays):
        positions, deltas = stratified_samples(origins[rays], directions[rays], near[rays], far[rays],
                                               n_samples, seed=rng, jitter=rng is not None)
        interp_all = interpolation_matrix(volumes.resolution, positions)
        w = density_weights(volumes, positions, deltas * density_scale, interp_all)
        keep_r, keep_s = np.nonzero(w > threshold)
        flat = keep_r * n_samples + keep_s
        interp = interp_all[flat]
        weights = w[keep_r, keep_s]
        ray_index = rays[keep_r]
    else:
        interp = sp.csr_matrix((0, n_vox))
        weights = np.zeros(0)
        ray_index = np.zeros(0, dtype=np.int64)
    n_kept = len(weights)
    gather = sp.csr_matrix((weights, (ray_index, np.arange(n_kept))), shape=(n_rays, n_kept))
    residual = 1.0 - np.asarray(gather.sum(axis=1)).ravel()
    interp = interp.astype(dtype)
    gather = gather.astype(dtype)
    return RayBatch(interp, gather, (gather @ interp).tocsr(), np.clip(residual, 0.0, 1.0).astype(dtype))


def _with_background(rendered: Tensor, residual: np.ndarray, background: Tensor) -> Tensor:
    bg = ad.matmul(ad.as_tensor(residual[:, None]), ad.reshape(background, (1, -1)))
    return rendered + bg


def flat_grid(volumes: SceneVolumes, grid_id: str) -> Tensor:
    g = volumes.grid(grid_id)
    return ad.reshape(g, (-1, g.shape[-1]))


def render_features(state: TrainState, batch: RayBatch, use_tq: bool) -> Tensor:
    """Rendered feature per ray, optionally refining sample features with the transient-query attention."""
    grid = flat_grid(state.volumes, "feature")
    if use_tq and batch.interp.shape[0] > 0:
        samples = ad.spmm(batch.interp, grid)
        samples = samples + attn.lrtq_attention(samples, state.tq)
        rendered = ad.spmm(batch.gather, samples)
    else:
        rendered = ad.spmm(batch.composite, grid)
    return _with_background(rendered, batch.residual, state.background["bg_feature"])


def render_label_logits(state: TrainState, batch: RayBatch) -> Tensor:
    rendered = ad.spmm(batch.composite, flat_grid(state.volumes, "label"))
    return _with_background(rendered, batch.residual, state.background["bg_label"])


def render_colors(state: TrainState, batch: RayBatch) -> Tensor:
    """Composite of sigmoid colors; the background is the sigmoid of ``bg_rgb``."""
    colors = ad.sigmoid(ad.spmm(batch.interp, flat_grid(state.volumes, "appearance")))
    rendered = ad.spmm(batch.gather, colors)
    return _with_background(rendered, batch.residual, ad.sigmoid(state.background["bg_rgb"]))


def query_features(state: TrainState, rendered: Tensor, use_adapter: bool) -> Tensor:
    """Features compared against text at query time: alpha f(F) + (1 - alpha) F."""
    if not use_adapter:
        return rendered
    _, mixed = attn.adapter_forward(rendered, state.adapter)
    return mixed


# -- training -----------------------------------------------------------------------------------

@dataclass
class TrainReport:
    intervals: list[dict] = field(default_factory=list)
    geometry_intervals: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    metrics: dict | None = None
    checkpoint: str | None = None
    config: dict | None = None

    def to_dict(self) -> dict:
        return {"intervals": self.intervals, "geometry_intervals": self.geometry_intervals,
                "wall_time": self.wall_time, "metrics": self.metrics, "checkpoint": self.checkpoint,
                "config": self.config}


class TrainingAborted(NumericError):
    """Non-finite loss. ``checkpoint`` holds the last good state, ``term`` the offending loss."""

    def __init__(self, message: str, term: str | None, checkpoint: str | None):
        super().__init__(message)
        self.term = term
        self.checkpoint = checkpoint


def _learning_rate(base: float, step: int, total: int, decay: float) -> float:
    return base * decay ** (step / total) if total > 0 else base


def _zero_grads(params: dict[str, Tensor]) -> None:
    for t in params.values():
        t.grad = None


def _check_grads(state: TrainState, groups) -> None:
    """Raise before any update so a failed step leaves the state untouched."""
    params = state.parameters()
    for group in groups:
        for name in state.group(group):
            g = params[name].grad
            if g is not None and not np.isfinite(g.sum()) and not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter '{name}'")


def _apply(state: TrainState, group: str, lr: float) -> None:
    params = state.parameters()
    names = state.group(group)
    adam_step({n: params[n].data for n in names}, {n: params[n].grad for n in names},
              state.optimizers[group], lr)


def _offending_term(exc: NumericError) -> str | None:
    msg = str(exc)
    for name in (*sem.LOSS_TERMS, "reconstruction", "photometric"):
        if f"'{name}'" in msg:
            return name
    return None


def geometry_step(state: TrainState, pool: RayPool, step: int) -> dict[str, float]:
    """One RGB fitting step of density, appearance and background color."""
    cfg = state.config
    rng = np.random.default_rng([cfg.seed, step])
    sel = np.sort(rng.choice(len(pool), size=min(cfg.geometry_rays, len(pool)), replace=False))
    hit = pool.hit[sel]
    rays = sel[hit]
    positions, deltas = stratified_samples(pool.origins[rays], pool.directions[rays], pool.near[rays],
                                           pool.far[rays], cfg.samples_per_ray, seed=rng)
    interp = interpolation_matrix(state.volumes.resolution, positions).astype(cfg.dtype)
    n = cfg.samples_per_ray
    raw = ad.reshape(ad.spmm(interp, flat_grid(state.volumes, "density")), (len(rays), n))
    weights = render_weights(raw, (deltas * cfg.density_scale).astype(cfg.dtype))
    colors = ad.reshape(ad.sigmoid(ad.spmm(interp, flat_grid(state.volumes, "appearance"))), (len(rays), n, 3))
    hit_rgb = render_quantity(weights, colors)
    residual = 1.0 - ad.tsum(weights, axis=1, keepdims=True)
    bg = ad.sigmoid(state.background["bg_rgb"])
    hit_rgb = hit_rgb + ad.matmul(residual, ad.reshape(bg, (1, 3)))
    miss_rgb = ad.broadcast_to(ad.reshape(bg, (1, 3)), (int((~hit).sum()), 3))
    pred = ad.concat([hit_rgb, miss_rgb], axis=0)
    target = np.concatenate([pool.rgb[rays], pool.rgb[sel[~hit]]])
    diff = pred - target
    loss = ad.mean(diff * diff) * 3.0
    value = float(loss.data)
    if not np.isfinite(value):
        raise NumericError("loss term 'photometric' is not finite")
    out = {"photometric": value}
    if cfg.tv_weight > 0:
        tv = total_variation(state.volumes.density) + total_variation(state.volumes.appearance)
        out["tv"] = float(tv.data)
        loss = loss + tv * cfg.tv_weight
    if cfg.sparsity_weight > 0:
        sigma = ad.softplus(raw)
        sparsity = ad.mean(ad.log(sigma * sigma * 2.0 + 1.0))
        out["sparsity"] = float(sparsity.data)
        loss = loss + sparsity * cfg.sparsity_weight
    out["total"] = float(loss.data)
    _zero_grads(state.parameters())
    loss.backward()
    lr = _learning_rate(cfg.lr_geometry, step, cfg.geometry_iters, cfg.geometry_lr_decay)
    _check_grads(state, ["geometry"])
    _apply(state, "geometry", lr)
    return out


def segmentation_step(state: TrainState, pool: RayPool, text: TextFeatureSet, step: int) -> dict[str, float]:
    """One step of the semantic schedule; ``step`` counts from the start of this stage."""
    cfg = state.config
    dtype = cfg.dtype
    rng = np.random.default_rng([cfg.seed, cfg.geometry_iters + step])
    sel = np.sort(rng.choice(len(pool), size=min(cfg.rays_per_batch, len(pool)), replace=False))
    batch = prepare_batch(state.volumes, pool.origins[sel], pool.directions[sel], pool.near[sel], pool.far[sel],
                          pool.hit[sel], cfg.samples_per_ray, rng, cfg.weight_threshold, dtype, cfg.density_scale)
    text_base = Tensor(text.base.astype(dtype))
    dense = Tensor(pool.features[sel])

    rendered = render_features(state, batch, cfg.use_tq)
    colors = render_colors(state, batch)
    if cfg.use_adapter:
        recon, distill_target = attn.adapter_forward(dense, state.adapter)
    else:
        distill_target = dense
    terms: dict[str, Tensor | None] = {}
    terms["distill"] = sem.distill_loss(colors, pool.rgb[sel], rendered, distill_target.detach())

    z_dense = sem.relevance_logits(distill_target, text_base)
    z_rendered = sem.relevance_logits(query_features(state, rendered, cfg.use_adapter), text_base)
    label = ad.softmax(render_label_logits(state, batch), axis=-1)
    target = sem.pseudo_label(label, text_base, cfg.pseudo_temperature)
    if cfg.ce_to_features:
        terms["ensemble_ce"] = sem.ensemble_ce_loss(target, z_dense, z_rendered, cfg.gamma, cfg.tau)
    else:
        # the pseudo-label learns from the ensemble; the logits are not pulled toward it
        terms["ensemble_ce"] = sem.ensemble_ce_loss(target, z_dense.detach(), z_rendered.detach(),
                                                    cfg.gamma, cfg.tau)
    terms["aug"] = sem.aug_loss(z_rendered, pool.relevance[sel])
    if cfg.use_adapter:
        if step >= cfg.sct_start:
            terms["self_cross"] = attn.self_cross_loss(dense, rendered.detach(), state.adapter)
        else:
            terms["reconstruction"] = attn.reconstruction_loss(dense, state.adapter)

    total, breakdown = sem.total_loss(terms, cfg.loss_weights)
    _zero_grads(state.parameters())
    if total.requires_grad:
        total.backward()
    decay = (lambda base: _learning_rate(base, step, cfg.total_iters, cfg.lr_decay))
    groups = ["grids"]
    if cfg.use_adapter or cfg.use_tq:
        groups.append("branches")
    if step >= cfg.phase2_start:
        groups.append("finetune")
    _check_grads(state, groups)
    # the adapter sets the distillation target; slow it once self-cross training takes over
    branches = cfg.lr_branches * (cfg.sct_lr_scale if cfg.use_adapter and step >= cfg.sct_start else 1.0)
    rates = {"grids": cfg.lr_grids, "branches": branches, "finetune": cfg.lr_finetune_grids}
    for group in groups:
        _apply(state, group, decay(rates[group]))
    return breakdown


def _summarize(records: list[tuple[int, dict]], start: int, end: int) -> dict:
    keys = sorted({k for _, r in records for k in r})
    means = {k: float(np.mean([r[k] for _, r in records if k in r])) for k in keys}
    return {"start": start, "end": end, "losses": means}


def train(manifest: SceneManifest, config: TrainConfig, text: TextFeatureSet | None = None,
          state: TrainState | None = None, stop_at: int | None = None,
          abort_checkpoint=None, progress=None) -> tuple[TrainState, TrainReport]:
    """Run (or resume) the full schedule.

    ``state`` resumes from a checkpointed state; ``stop_at`` halts after that
    many global steps (geometry plus segmentation). On a non-finite loss the
    pre-step state is written to ``abort_checkpoint`` and
    :class:`TrainingAborted` names the term.
    """
    t0 = time.perf_counter()
    if text is None:
        if manifest.text is None:
            raise LoadError("manifest names no text feature file")
        text = read_text(manifest.path(manifest.text))
    if state is None:
        state = init_state(config, text.dim)
    elif state.config.to_dict() != config.to_dict():
        raise ConfigError("resumed state was trained with a different config")
    if state.feature_dim != text.dim:
        raise DimensionError(f"state feature dimension {state.feature_dim} does not match text D={text.dim}")
    report = TrainReport(config=config.to_dict())
    if config.total_iters == 0:
        report.wall_time = time.perf_counter() - t0
        return state, report

    train_idx = manifest.split_indices("train")
    if not train_idx:
        raise LoadError("manifest has no training frames")
    last = config.geometry_iters + config.total_iters if stop_at is None else min(
        stop_at, config.geometry_iters + config.total_iters)
    pool = None
    records: list[tuple[int, dict]] = []
    while state.step < last:
        step = state.step
        if pool is None:
            pool = build_ray_pool(manifest, train_idx, text, config.dtype)
        geometry = step < config.geometry_iters
        try:
            if geometry:
                breakdown = geometry_step(state, pool, step)
            else:
                breakdown = segmentation_step(state, pool, text, step - config.geometry_iters)
        except NumericError as exc:
            # steps validate losses and gradients before touching parameters, so this is the pre-step state
            path = None
            if abort_checkpoint is not None:
                path = str(abort_checkpoint)
                save_checkpoint(state, path)
            raise TrainingAborted(f"training aborted at step {step}: {exc}", _offending_term(exc), path) from exc
        state.step += 1
        local = step if geometry else step - config.geometry_iters
        records.append((local, breakdown))
        end_of_stage = state.step in (config.geometry_iters, config.geometry_iters + config.total_iters)
        if (local + 1) % config.log_every == 0 or end_of_stage or state.step == last:
            start = records[0][0]
            entry = _summarize(records, start, local + 1)
            (report.geometry_intervals if geometry else report.intervals).append(entry)
            records = []
            if progress is not None:
                progress("geometry" if geometry else "segmentation", entry)
    report.wall_time = time.perf_counter() - t0
    return state, report


# -- inference ----------------------------------------------------------------------------------

def render_view_features(state: TrainState, camera: Camera, near: float, far: float,
                         chunk: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Query features (H*W x D) and rendered colors for every pixel of ``camera``.

    The attention branches mix rows within a batch, so by default the whole
    view is one batch. Small chunks of neighbouring pixels see far less
    varied context than the random training batches and degrade the result.
    """
    cfg = state.config
    origins, dirs = generate_rays(camera)
    chunk = chunk or len(origins)
    lo, hi, hit = clip_bounds(origins, dirs, near, far)
    feats, colors = [], []
    for start in range(0, len(origins), chunk):
        s = slice(start, start + chunk)
        batch = prepare_batch(state.volumes, origins[s], dirs[s], lo[s], hi[s], hit[s], cfg.samples_per_ray,
                              None, cfg.weight_threshold, cfg.dtype, cfg.density_scale)
        rendered = render_features(state, batch, cfg.use_tq)
        feats.append(query_features(state, rendered, cfg.use_adapter).data)
        colors.append(render_colors(state, batch).data)
    return np.concatenate(feats), np.concatenate(colors)


def _frozen(state: TrainState):
    """Context in which parameters build no graph (cheaper inference)."""
    class _Ctx:
        def __enter__(self):
            self.flags = {k: t.requires_grad for k, t in state.parameters().items()}
            for t in state.parameters().values():
                t.requires_grad = False

        def __exit__(self, *exc):
            for k, t in state.parameters().items():
                t.requires_grad = self.flags[k]
    return _Ctx()


def predict_view(state: TrainState, camera: Camera, text: TextFeatureSet, near: float, far: float):
    """Relevance logits (H x W x N) and the argmax class map for one camera."""
    if text.dim != state.feature_dim:
        raise DimensionError(f"text features have D={text.dim}, checkpoint has D={state.feature_dim}")
    with _frozen(state):
        feats, _ = render_view_features(state, camera, near, far)
    logits = sem.relevance_logits(feats.astype(np.float64), text.base.astype(np.float64)).data
    h, w = camera.height, camera.width
    return logits.reshape(h, w, -1), sem.segmentation_map(logits).reshape(h, w)


def evaluate(state: TrainState, manifest: SceneManifest, text: TextFeatureSet, split: str = "test") -> EvalResult:
    """mIoU and accuracy over the frames of ``split`` that carry masks."""
    indices = manifest.split_indices(split)
    n = text.num_classes
    total = np.zeros((n, n), dtype=np.int64)
    per_view = []
    for idx in indices:
        view = load_training_view(manifest, idx)
        if view.mask is None:
            continue
        _, pred = predict_view(state, view.camera, text, manifest.near, manifest.far)
        cm = confusion_matrix(pred, view.mask, n)
        total += cm
        scores = scores_from_confusion(cm)
        per_view.append({"frame": idx, **scores.to_dict()})
    if not per_view:
        raise LoadError(f"no '{split}' frames with masks to evaluate")
    scores = scores_from_confusion(total)
    return EvalResult(list(text.class_names), scores.iou, scores.mean_iou, scores.accuracy, per_view)
