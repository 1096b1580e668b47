"""Dense voxel-grid scene representation and differentiable volume rendering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, NumericError

GRID_IDS = ("density", "appearance", "feature", "label")


@dataclass
class SceneVolumes:
    """Four voxel grids sharing one resolution over the unit cube.

    Each grid is a leaf :class:`Tensor` of shape ``(Rx, Ry, Rz, C)`` holding
    pre-activation values: softplus gives density, sigmoid gives color.
    Voxel ``(i, j, k)`` is centred at ``((i + .5) / Rx, (j + .5) / Ry, (k + .5) / Rz)``.
    """

    density: Tensor
    appearance: Tensor
    feature: Tensor
    label: Tensor

    def __post_init__(self):
        res = self.density.shape[:3]
        for gid in GRID_IDS:
            g = getattr(self, gid)
            if g.ndim != 4 or g.shape[:3] != res:
                raise DimensionError(f"grid '{gid}' has shape {g.shape}, expected resolution {res}")
        if self.density.shape[3] != 1 or self.appearance.shape[3] != 3:
            raise DimensionError("density grid needs 1 channel and appearance grid 3 channels")
        if self.label.shape[3] != self.feature.shape[3]:
            raise DimensionError("label grid must have the same channel count as the feature grid")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.density.shape[:3])

    @property
    def feature_dim(self) -> int:
        return self.feature.shape[3]

    @property
    def dtype(self):
        return self.density.dtype

    def grid(self, grid_id: str) -> Tensor:
        if grid_id not in GRID_IDS:
            raise ValueError(f"unknown grid id '{grid_id}' (expected one of {', '.join(GRID_IDS)})")
        return getattr(self, grid_id)

    def arrays(self) -> dict[str, np.ndarray]:
        return {gid: self.grid(gid).data for gid in GRID_IDS}

    def copy(self) -> "SceneVolumes":
        return SceneVolumes(**{gid: Tensor(self.grid(gid).data.copy()) for gid in GRID_IDS})

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "SceneVolumes":
        return cls(**{gid: Tensor(arrays[gid]) for gid in GRID_IDS})

    @classmethod
    def initialize(cls, resolution, feature_dim: int, rng: np.random.Generator,
                   density_init: float = 0.1, std: float = 0.01, dtype=np.float32) -> "SceneVolumes":
        """Near-transparent density everywhere, small Gaussian noise in the other grids."""
        rx, ry, rz = resolution
        raw_density = np.log(np.expm1(density_init))
        return cls(
            density=Tensor(np.full((rx, ry, rz, 1), raw_density, dtype=dtype)),
            appearance=Tensor((rng.standard_normal((rx, ry, rz, 3)) * std).astype(dtype)),
            feature=Tensor((rng.standard_normal((rx, ry, rz, feature_dim)) * std).astype(dtype)),
            label=Tensor((rng.standard_normal((rx, ry, rz, feature_dim)) * std).astype(dtype)),
        )


@dataclass
class Camera:
    """Pinhole camera. Pixel (row i, col j) looks through image point (j - cx, i - cy).

    The pose is camera-to-world; the camera frame has x right, y down, z forward.
    """

    focal: float
    cx: float
    cy: float
    height: int
    width: int
    pose: np.ndarray

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64).reshape(3, 4)
        if self.focal <= 0:
            raise ValueError(f"focal length must be positive, got {self.focal}")
        rot = self.pose[:, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation block is not orthonormal")

    @property
    def forward(self) -> np.ndarray:
        return self.pose[:, 2].copy()

    @property
    def center(self) -> np.ndarray:
        return self.pose[:, 3].copy()


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world pose placing the camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.column_stack([right, down, fwd, eye])


def generate_rays(camera: Camera, pixel_indices=None) -> tuple[np.ndarray, np.ndarray]:
    """World-space origins and unit directions for ``(row, col)`` pixel indices.

    ``None`` means every pixel in row-major order.
    """
    if pixel_indices is None:
        rows, cols = np.divmod(np.arange(camera.height * camera.width), camera.width)
    else:
        idx = np.asarray(pixel_indices)
        if idx.ndim != 2 or idx.shape[1] != 2:
            raise ValueError(f"pixel indices must be K x 2 (row, col), got shape {idx.shape}")
        rows, cols = idx[:, 0], idx[:, 1]
        if (rows < 0).any() or (rows >= camera.height).any() or (cols < 0).any() or (cols >= camera.width).any():
            raise ValueError(f"pixel index outside image of size {camera.height}x{camera.width}")
    d_cam = np.stack([(cols - camera.cx) / camera.focal,
                      (rows - camera.cy) / camera.focal,
                      np.ones(len(rows))], axis=-1)
    d_world = d_cam @ camera.pose[:, :3].T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.pose[:, 3], d_world.shape).copy()
    return origins, d_world


def ray_box_bounds(origins: np.ndarray, directions: np.ndarray,
                   lo: float = 0.0, hi: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Slab-test entry/exit distances for the cube [lo, hi]^3; exit < entry means a miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    return tmin, tmax


def stratified_samples(origins: np.ndarray, directions: np.ndarray, near, far, n_samples: int,
                       seed=None, jitter: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """``n_samples`` points per ray in [near, far], one per equal-width bin.

    ``near``/``far`` may be scalars or per-ray arrays. Without jitter each point
    sits at its bin centre. Returns positions (R, N, 3) and step sizes (R, N),
    the last step being the bin width.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples per ray")
    n_rays = len(origins)
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n_rays,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n_rays,))
    if (near <= 0).any() or (far <= near).any():
        raise ValueError("sampling bounds must satisfy 0 < near < far")
    width = (far - near) / n_samples
    if jitter:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        offsets = rng.random((n_rays, n_samples))
    else:
        offsets = np.full((n_rays, n_samples), 0.5)
    t = near[:, None] + (np.arange(n_samples)[None, :] + offsets) * width[:, None]
    deltas = np.empty_like(t)
    deltas[:, :-1] = np.maximum(np.diff(t, axis=1), 1e-6 * width[:, None])
    deltas[:, -1] = width
    positions = origins[:, None, :] + t[..., None] * directions[:, None, :]
    return positions, deltas


def interpolation_matrix(resolution, points: np.ndarray) -> sp.csr_matrix:
    """Sparse (P, V) trilinear weights of P points against a row-major voxel grid.

    Points outside the unit cube get an empty row. Inside the cube, lookups
    within half a voxel of a face clamp to the boundary voxels.
    """
    res = np.asarray(resolution)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n_points = len(pts)
    inside = np.all((pts >= 0.0) & (pts <= 1.0), axis=-1)
    idx = np.nonzero(inside)[0]
    u = pts[idx] * res - 0.5
    base = np.floor(u)
    frac = u - base
    base = base.astype(np.int64)
    lo = np.clip(base, 0, res - 1)
    hi = np.clip(base + 1, 0, res - 1)
    rows, cols, vals = [], [], []
    for corner in range(8):
        bits = [(corner >> axis) & 1 for axis in range(3)]
        ijk = [hi[:, a] if bits[a] else lo[:, a] for a in range(3)]
        w = np.ones(len(idx))
        for a in range(3):
            w = w * (frac[:, a] if bits[a] else 1.0 - frac[:, a])
        rows.append(idx)
        cols.append((ijk[0] * res[1] + ijk[1]) * res[2] + ijk[2])
        vals.append(w)
    mat = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(n_points, int(res.prod())))
    return mat


def sample_grid(volumes: SceneVolumes, grid_id: str, points: np.ndarray,
                interp: sp.csr_matrix | None = None) -> Tensor:
    """Trilinearly interpolated grid values at ``points`` (R, N, 3) -> (R, N, C)."""
    grid = volumes.grid(grid_id)
    lead = points.shape[:-1]
    if not np.all(np.isfinite(points)):
        raise NumericError("sample_grid: non-finite sample position")
    if interp is None:
        interp = interpolation_matrix(volumes.resolution, points)
    interp = interp.astype(grid.dtype, copy=False)
    flat = ad.reshape(grid, (-1, grid.shape[3]))
    return ad.reshape(ad.spmm(interp, flat), (*lead, grid.shape[3]))


def render_weights(raw_densities: Tensor, deltas: np.ndarray) -> Tensor:
    """w_i = exp(-sum_{j<i} s_j d_j) (1 - exp(-s_i d_i)) with s = softplus(raw)."""
    raw_densities = ad.as_tensor(raw_densities)
    if not np.all(np.isfinite(raw_densities.data)):
        raise NumericError("render_weights: non-finite density")
    deltas = np.asarray(deltas, dtype=raw_densities.dtype)
    if deltas.shape != raw_densities.shape:
        raise DimensionError(f"densities {raw_densities.shape} and deltas {deltas.shape} differ")
    if (deltas <= 0).any():
        raise ValueError("step sizes must be positive")
    tau = ad.softplus(raw_densities) * deltas
    transmittance = ad.exp(-ad.cumsum(tau, axis=-1, exclusive=True))
    return transmittance * (1.0 - ad.exp(-tau))


def render_quantity(weights: Tensor, values: Tensor) -> Tensor:
    """Per-ray weighted sum: (R, N) x (R, N, C) -> (R, C)."""
    weights, values = ad.as_tensor(weights), ad.as_tensor(values)
    if weights.shape != values.shape[:2]:
        raise DimensionError(f"weights {weights.shape} do not match values {values.shape}")
    w, v = weights.data, values.data
    out = np.einsum("rn,rnc->rc", w, v)

    def backward(g):
        gw = np.einsum("rc,rnc->rn", g, v) if weights.requires_grad else None
        gv = w[:, :, None] * g[:, None, :] if values.requires_grad else None
        return gw, gv

    return ad.record(out, (weights, values), backward)


def render_label(weights: Tensor, label_vectors: Tensor) -> Tensor:
    """Softmax over channels of the rendered label vector."""
    return ad.softmax(render_quantity(weights, label_vectors), axis=-1)


def total_variation(grid: Tensor) -> Tensor:
    """Mean squared difference between face-adjacent voxels, summed over the three axes."""
    grid = ad.as_tensor(grid)
    if grid.ndim != 4:
        raise DimensionError(f"expected an (Rx, Ry, Rz, C) grid, got shape {grid.shape}")
    g = grid.data
    diffs = [np.diff(g, axis=a) for a in range(3)]
    scale = 1.0 / g.size
    out = np.asarray(sum(float(np.sum(d * d)) for d in diffs) * scale, dtype=g.dtype)

    def backward(upstream):
        out_grad = np.zeros_like(g)
        coef = 2.0 * scale * upstream
        for a, d in enumerate(diffs):
            lo = [slice(None)] * 4
            hi = [slice(None)] * 4
            lo[a] = slice(None, -1)
            hi[a] = slice(1, None)
            out_grad[tuple(hi)] += coef * d
            out_grad[tuple(lo)] -= coef * d
        return (out_grad,)

    return ad.record(out, (grid,), backward)
