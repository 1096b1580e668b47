"""Binary file formats, scene manifests and the synthetic scene generator.

Formats (all integers and floats little-endian):

* dense feature map ``LSRF``: magic, u32 version, u32 H, u32 W, u32 C, then
  H*W*C float32 in row-major, channel-last order.
* text features ``LSRT``: magic, u32 version, u32 N, u32 D, u32 flags
  (bit 0: augmented set present), N*D float32 base rows, optional N*D float32
  augmented rows, then N names each as u32 byte length + UTF-8 bytes.
* images: binary PPM (P6) for RGB and PGM (P5) for class-index masks.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError, FormatError, LoadError
from .semantics import TextFeatureSet
from .volume import Camera, generate_rays, look_at

FEATURE_MAGIC = b"LSRF"
TEXT_MAGIC = b"LSRT"
FORMAT_VERSION = 1
FLAG_AUGMENTED = 1


# -- dense feature maps ---------------------------------------------------------

def encode_features(features: np.ndarray) -> bytes:
    arr = np.asarray(features)
    if arr.ndim != 3:
        raise DimensionError(f"feature map must be H x W x C, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature map contains non-finite values")
    h, w, c = arr.shape
    return struct.pack("<4sIIII", FEATURE_MAGIC, FORMAT_VERSION, h, w, c) + arr.astype("<f4").tobytes()


def decode_features(buf: bytes) -> np.ndarray:
    header = 20
    if len(buf) < header:
        raise FormatError("truncated feature header", len(buf))
    magic, version, h, w, c = struct.unpack_from("<4sIIII", buf)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported feature file version {version}", 4)
    if min(h, w, c) == 0:
        raise FormatError(f"degenerate feature dimensions {h}x{w}x{c}", 8)
    need = 4 * h * w * c
    have = len(buf) - header
    if need > have:
        raise FormatError(f"payload truncated: header declares {need} bytes, {have} present", len(buf))
    if need < have:
        raise FormatError(f"{have - need} unexpected trailing bytes", header + need)
    arr = np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=header).reshape(h, w, c)
    if not np.all(np.isfinite(arr)):
        bad = int(np.argmax(~np.isfinite(arr.ravel())))
        raise FormatError("non-finite feature value", header + 4 * bad)
    return arr.astype(np.float32)


def write_features(path, features: np.ndarray) -> None:
    Path(path).write_bytes(encode_features(features))


def read_features(path) -> np.ndarray:
    return decode_features(_read(path))


# -- text features ------------------------------------------------------------------

def encode_text(text: TextFeatureSet) -> bytes:
    n, d = text.base.shape
    flags = FLAG_AUGMENTED if text.augmented is not None else 0
    parts = [struct.pack("<4sIIII", TEXT_MAGIC, FORMAT_VERSION, n, d, flags), text.base.astype("<f4").tobytes()]
    if text.augmented is not None:
        parts.append(text.augmented.astype("<f4").tobytes())
    for name in text.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    return b"".join(parts)


def decode_text(buf: bytes) -> TextFeatureSet:
    if len(buf) < 20:
        raise FormatError("truncated text-feature header", len(buf))
    magic, version, n, d, flags = struct.unpack_from("<4sIIII", buf)
    if magic != TEXT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {TEXT_MAGIC!r}", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported text file version {version}", 4)
    if n == 0 or d == 0:
        raise FormatError(f"degenerate text dimensions N={n}, D={d}", 8)
    offset = 20
    blocks = 2 if flags & FLAG_AUGMENTED else 1
    need = 4 * n * d * blocks
    if offset + need > len(buf):
        raise FormatError(f"feature block truncated: needs {need} bytes", len(buf))
    base = np.frombuffer(buf, "<f4", n * d, offset).reshape(n, d).astype(np.float32)
    offset += 4 * n * d
    augmented = None
    if flags & FLAG_AUGMENTED:
        augmented = np.frombuffer(buf, "<f4", n * d, offset).reshape(n, d).astype(np.float32)
        offset += 4 * n * d
    for arr in (base, augmented):
        if arr is not None and not np.all(np.isfinite(arr)):
            raise FormatError("non-finite text feature value", 20)
    names = []
    for _ in range(n):
        if offset + 4 > len(buf):
            raise FormatError("truncated class-name length", offset)
        (length,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if offset + length > len(buf):
            raise FormatError(f"class name declares {length} bytes past end of file", offset)
        try:
            names.append(buf[offset:offset + length].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"class name is not UTF-8: {exc.reason}", offset) from None
        offset += length
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} unexpected trailing bytes", offset)
    unit = bool(np.allclose(np.linalg.norm(base, axis=1), 1.0, atol=1e-6)
                and (augmented is None or np.allclose(np.linalg.norm(augmented, axis=1), 1.0, atol=1e-6)))
    return TextFeatureSet(names, base, augmented, unit_normalized=unit)


def write_text(path, text: TextFeatureSet) -> None:
    Path(path).write_bytes(encode_text(text))


def read_text(path) -> TextFeatureSet:
    return decode_text(_read(path))


# -- PPM / PGM ----------------------------------------------------------------------------

def encode_pnm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise DimensionError(f"expected H x W or H x W x 3 image, got {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError("images must be uint8")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def decode_pnm(buf: bytes) -> np.ndarray:
    """Decode binary P5/P6 with maxval up to 65535; returns uint8 or uint16 samples."""
    if buf[:2] not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {buf[:2]!r}, expected P5 or P6", 0)
    channels = 3 if buf[:2] == b"P6" else 1
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed image header", pos)
        values.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after image header", pos)
    pos += 1
    w, h, maxval = values
    if w == 0 or h == 0 or not 0 < maxval < 65536:
        raise FormatError(f"invalid image header {w}x{h} maxval {maxval}", pos)
    sample = 1 if maxval < 256 else 2
    need = w * h * channels * sample
    if len(buf) - pos < need:
        raise FormatError(f"pixel data truncated: needs {need} bytes, {len(buf) - pos} present", len(buf))
    dtype = np.uint8 if sample == 1 else np.dtype(">u2")
    arr = np.frombuffer(buf, dtype=dtype, count=w * h * channels, offset=pos)
    arr = arr.reshape((h, w, 3) if channels == 3 else (h, w))
    if sample == 2:
        arr = arr.astype(np.uint16)
    if arr.max(initial=0) > maxval:
        raise FormatError(f"sample exceeds declared maxval {maxval}", pos)
    return arr.copy()


def pnm_maxval(buf: bytes) -> int:
    tokens = []
    for line in buf[:512].split(b"\n"):
        line = line.split(b"#")[0]
        tokens.extend(line.split())
        if len(tokens) >= 4:
            break
    return int(tokens[3])


def write_pnm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(image))


def read_pnm(path) -> np.ndarray:
    return decode_pnm(_read(path))


def read_rgb(path) -> np.ndarray:
    """PPM image as float32 in [0, 1] (scaled by 1 / maxval)."""
    buf = _read(path)
    img = decode_pnm(buf)
    if img.ndim != 3:
        raise LoadError(f"{path}: expected an RGB (P6) image")
    return (img.astype(np.float32) / np.float32(pnm_maxval(buf)))


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc.strerror}") from None


# -- manifests ------------------------------------------------------------------------------

@dataclass
class Frame:
    pose: list[float]
    rgb: str
    feat: str
    mask: str | None = None
    split: str = "train"


@dataclass
class SceneManifest:
    focal: float
    cx: float
    cy: float
    height: int
    width: int
    near: float
    far: float
    frames: list[Frame]
    text: str | None = None
    root: Path = field(default_factory=Path)

    def camera(self, index: int) -> Camera:
        frame = self.frames[index]
        return Camera(self.focal, self.cx, self.cy, self.height, self.width, np.asarray(frame.pose).reshape(3, 4))

    def split_indices(self, split: str) -> list[int]:
        return [i for i, f in enumerate(self.frames) if f.split == split]

    def path(self, rel: str) -> Path:
        return self.root / rel

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "intrinsics": {"focal": self.focal, "cx": self.cx, "cy": self.cy, "H": self.height, "W": self.width},
            "near": self.near,
            "far": self.far,
            "text": self.text,
            "frames": [{k: v for k, v in asdict(f).items() if v is not None} for f in self.frames],
        }


def save_manifest(manifest: SceneManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8")


def load_manifest(path, check_files: bool = True) -> SceneManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        intr = doc["intrinsics"]
        frames = [Frame(pose=[float(v) for v in f["pose"]], rgb=f["rgb"], feat=f["feat"], mask=f.get("mask"),
                        split=f.get("split", "train")) for f in doc["frames"]]
        manifest = SceneManifest(float(intr["focal"]), float(intr["cx"]), float(intr["cy"]), int(intr["H"]),
                                 int(intr["W"]), float(doc["near"]), float(doc["far"]), frames,
                                 text=doc.get("text"), root=path.parent)
    except OSError as exc:
        raise LoadError(f"cannot read manifest {path}: {exc.strerror}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"malformed manifest {path}: {exc}") from None
    for i, f in enumerate(manifest.frames):
        if len(f.pose) != 12:
            raise LoadError(f"frame {i}: pose must have 12 values, got {len(f.pose)}")
    if check_files:
        for i, f in enumerate(manifest.frames):
            for rel in (f.rgb, f.feat, f.mask):
                if rel is not None and not manifest.path(rel).is_file():
                    raise LoadError(f"frame {i}: missing file {rel}")
    return manifest


@dataclass
class TrainingView:
    rgb: np.ndarray
    features: np.ndarray
    camera: Camera
    mask: np.ndarray | None


def load_training_view(manifest: SceneManifest, index: int, with_mask: bool = True) -> TrainingView:
    """RGB in [0, 1], features as stored, camera from the manifest, mask or ``None``."""
    if not 0 <= index < len(manifest.frames):
        raise IndexError(f"frame index {index} outside [0, {len(manifest.frames)})")
    frame = manifest.frames[index]
    rgb = read_rgb(manifest.path(frame.rgb))
    feats = read_features(manifest.path(frame.feat))
    hw = (manifest.height, manifest.width)
    if rgb.shape[:2] != hw or feats.shape[:2] != hw:
        raise LoadError(f"frame {index}: image {rgb.shape[:2]} / features {feats.shape[:2]} do not match {hw}")
    mask = None
    if with_mask and frame.mask is not None:
        mask_path = manifest.path(frame.mask)
        if mask_path.is_file():
            mask = read_pnm(mask_path)
            if mask.ndim != 2 or mask.shape != hw:
                raise LoadError(f"frame {index}: mask shape {mask.shape} does not match {hw}")
    return TrainingView(rgb, feats, manifest.camera(index), mask)


# -- synthetic scenes -------------------------------------------------------------------------

@dataclass
class SceneObject:
    """A sphere (``size`` = radius) or axis-aligned box (``size`` = edge lengths)."""

    shape: str
    center: list[float]
    size: float | list[float]
    color: list[float]
    class_id: int
    texture: str | None = None

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, float)
        half = np.full(3, float(self.size)) if self.shape == "sphere" else np.asarray(self.size, float) / 2
        return c - half, c + half


@dataclass
class SyntheticSceneSpec:
    objects: list[SceneObject]
    background_class: int = 0
    class_names: list[str] | None = None
    feature_dim: int = 32
    feature_noise: float = 0.05
    class_features: list[list[float]] | None = None
    text_aug_noise: float = 0.05
    num_views: int = 25
    holdout_every: int = 5
    holdout_offset: int = 2
    image_size: int = 64
    fov_degrees: float = 40.0
    ring_radius: float = 0.95
    elevation_degrees: float = 70.0
    target: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.2])
    light_direction: list[float] = field(default_factory=lambda: [0.3, 0.5, 0.8])
    background_color: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    near: float = 0.1
    far: float = 3.0
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return max([o.class_id for o in self.objects] + [self.background_class]) + 1

    def validate(self) -> None:
        if not self.objects:
            raise ConfigError("objects: scene needs at least one object")
        ids = {o.class_id for o in self.objects} | {self.background_class}
        if ids != set(range(len(ids))):
            raise ConfigError(f"class_id: class ids must be contiguous from 0, got {sorted(ids)}")
        for i, obj in enumerate(self.objects):
            if obj.shape not in ("sphere", "box"):
                raise ConfigError(f"objects[{i}].shape: unknown shape '{obj.shape}'")
            lo, hi = obj.bounds()
            if (lo < -1e-9).any() or (hi > 1 + 1e-9).any():
                raise ConfigError(f"objects[{i}]: object extends outside the unit cube")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ConfigError(f"class_names: expected {self.num_classes} names, got {len(self.class_names)}")
        if self.class_features is not None:
            feats = np.asarray(self.class_features, float)
            if feats.shape != (self.num_classes, self.feature_dim):
                raise ConfigError(f"class_features: expected {self.num_classes}x{self.feature_dim}")
            if not np.allclose(np.linalg.norm(feats, axis=1), 1.0, atol=1e-6):
                raise ConfigError("class_features: rows must be unit vectors")
        if not 0 < self.near < self.far:
            raise ConfigError("near/far: need 0 < near < far")
        if self.num_views < 1 or self.image_size < 2:
            raise ConfigError("num_views/image_size: must be positive")

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSceneSpec":
        known = {f.name for f in fields(cls)}
        for key in doc:
            if key not in known:
                raise ConfigError(f"{key}: unknown scene spec field")
        obj_fields = {f.name for f in fields(SceneObject)}
        objects = []
        for i, raw in enumerate(doc.get("objects", [])):
            for key in raw:
                if key not in obj_fields:
                    raise ConfigError(f"objects[{i}].{key}: unknown object field")
            try:
                objects.append(SceneObject(**raw))
            except TypeError as exc:
                raise ConfigError(f"objects[{i}]: {exc}") from None
        spec = cls(**{**doc, "objects": objects})
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return asdict(self)


def load_scene_spec(path) -> SyntheticSceneSpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise LoadError(f"cannot read scene spec {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scene spec is not valid JSON: {exc}") from None
    return SyntheticSceneSpec.from_dict(doc)


def default_scene_spec(**overrides) -> SyntheticSceneSpec:
    """Four objects on a table slab; the table is the background class."""
    spec = dict(
        objects=[
            dict(shape="box", center=[0.5, 0.5, 0.05], size=[1.0, 1.0, 0.1], color=[0.85, 0.8, 0.7],
                 class_id=0, texture="checker"),
            dict(shape="sphere", center=[0.3, 0.3, 0.26], size=0.16, color=[0.9, 0.15, 0.1], class_id=1),
            dict(shape="box", center=[0.7, 0.3, 0.22], size=[0.24, 0.24, 0.24], color=[0.1, 0.75, 0.2],
                 class_id=2),
            dict(shape="sphere", center=[0.68, 0.7, 0.28], size=0.18, color=[0.15, 0.25, 0.9], class_id=3),
            dict(shape="box", center=[0.3, 0.7, 0.2], size=[0.2, 0.26, 0.2], color=[0.9, 0.8, 0.1],
                 class_id=4),
        ],
        class_names=["table", "red ball", "green cube", "blue ball", "yellow block"],
    )
    spec.update(overrides)
    return SyntheticSceneSpec.from_dict(spec)


def class_feature_vectors(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Random unit vectors, orthonormalised when ``num_classes <= dim``."""
    raw = rng.standard_normal((dim, num_classes))
    if num_classes <= dim:
        q, r = np.linalg.qr(raw)
        q *= np.sign(np.diag(r))
        return q.T.copy()
    return (raw / np.linalg.norm(raw, axis=0)).T.copy()


def ring_cameras(spec: SyntheticSceneSpec) -> list[Camera]:
    size = spec.image_size
    focal = (size - 1) / 2 / np.tan(np.radians(spec.fov_degrees) / 2)
    c = (size - 1) / 2
    target = np.asarray(spec.target, float)
    elev = np.radians(spec.elevation_degrees)
    cams = []
    for k in range(spec.num_views):
        az = 2 * np.pi * k / spec.num_views
        eye = target + spec.ring_radius * np.array([np.cos(az) * np.cos(elev), np.sin(az) * np.cos(elev), np.sin(elev)])
        cams.append(Camera(focal, c, c, size, size, look_at(eye, target)))
    return cams


def _intersect(obj: SceneObject, origins: np.ndarray, dirs: np.ndarray):
    """Nearest positive hit distance (inf on miss) and surface normal per ray."""
    center = np.asarray(obj.center, float)
    if obj.shape == "sphere":
        r = float(obj.size)
        oc = origins - center
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - r * r
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t = np.where(-b - sq > 1e-9, -b - sq, -b + sq)
        t = np.where((disc >= 0) & (t > 1e-9), t, np.inf)
        normal = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs - center
        normal /= np.maximum(np.linalg.norm(normal, axis=1, keepdims=True), 1e-12)
        return t, normal
    lo, hi = obj.bounds()
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origins) / dirs
        t1 = (hi - origins) / dirs
    tnear = np.minimum(t0, t1)
    tfar = np.maximum(t0, t1)
    entry = np.nanmax(tnear, axis=1)
    exit_ = np.nanmin(tfar, axis=1)
    hit = (exit_ >= entry) & (exit_ > 1e-9)
    t = np.where(hit, np.where(entry > 1e-9, entry, exit_), np.inf)
    axis = np.nanargmax(tnear, axis=1)
    normal = np.zeros_like(origins)
    normal[np.arange(len(origins)), axis] = -np.sign(dirs[np.arange(len(origins)), axis])
    return t, normal


def render_synthetic_view(spec: SyntheticSceneSpec, camera: Camera):
    """Analytic ray cast of one view: RGB in [0, 1], class mask, and hit flags."""
    origins, dirs = generate_rays(camera)
    n = len(origins)
    best_t = np.full(n, np.inf)
    best_obj = np.full(n, -1)
    best_normal = np.zeros((n, 3))
    for idx, obj in enumerate(spec.objects):
        t, normal = _intersect(obj, origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_obj = np.where(closer, idx, best_obj)
        best_normal[closer] = normal[closer]
    hit = best_obj >= 0
    light = np.asarray(spec.light_direction, float)
    light /= np.linalg.norm(light)
    rgb = np.tile(np.asarray(spec.background_color, float), (n, 1))
    mask = np.full(n, spec.background_class, dtype=np.int64)
    points = origins + np.where(hit, best_t, 0.0)[:, None] * dirs
    for idx, obj in enumerate(spec.objects):
        sel = best_obj == idx
        if not sel.any():
            continue
        shade = 0.35 + 0.65 * np.clip(best_normal[sel] @ light, 0.0, None)
        color = np.asarray(obj.color, float)[None, :] * shade[:, None]
        if obj.texture == "checker":
            cells = np.floor(points[sel] * 8.0 + 1e-6).astype(np.int64).sum(axis=1)
            color *= np.where(cells % 2 == 0, 1.0, 0.6)[:, None]
        rgb[sel] = color
        mask[sel] = obj.class_id
    h, w = camera.height, camera.width
    return np.clip(rgb, 0.0, 1.0).reshape(h, w, 3), mask.reshape(h, w), hit.reshape(h, w)


def noisy_features(mask: np.ndarray, class_vectors: np.ndarray, noise: float,
                   rng: np.random.Generator) -> np.ndarray:
    feats = class_vectors[mask]
    if noise > 0:
        feats = feats + noise * rng.standard_normal(feats.shape)
    feats /= np.maximum(np.linalg.norm(feats, axis=-1, keepdims=True), 1e-12)
    return feats.astype(np.float32)


def generate_synthetic_scene(spec: SyntheticSceneSpec, out_dir) -> SceneManifest:
    """Ray-trace every view, write images/features/masks/text and return the manifest."""
    spec.validate()
    out = Path(out_dir)
    for sub in ("rgb", "feat", "mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise LoadError(f"output directory {out} is not writable")
    rng = np.random.default_rng(spec.seed)
    n_cls = spec.num_classes
    if spec.class_features is not None:
        class_vecs = np.asarray(spec.class_features, float)
    else:
        class_vecs = class_feature_vectors(n_cls, spec.feature_dim, rng)
    aug = class_vecs + spec.text_aug_noise * np.random.default_rng([spec.seed, 1]).standard_normal(class_vecs.shape)
    aug /= np.linalg.norm(aug, axis=1, keepdims=True)
    names = spec.class_names or [f"class_{i}" for i in range(n_cls)]
    text = TextFeatureSet(list(names), class_vecs.astype(np.float32), aug.astype(np.float32), unit_normalized=True)
    write_text(out / "text.lsrt", text)

    cameras = ring_cameras(spec)
    frames = []
    for k, cam in enumerate(cameras):
        rgb, mask, _ = render_synthetic_view(spec, cam)
        feats = noisy_features(mask, class_vecs, spec.feature_noise, np.random.default_rng([spec.seed, 2, k]))
        name = f"{k:03d}"
        write_pnm(out / "rgb" / f"{name}.ppm", np.round(rgb * 255).astype(np.uint8))
        write_pnm(out / "mask" / f"{name}.pgm", mask.astype(np.uint8))
        write_features(out / "feat" / f"{name}.lsrf", feats)
        is_test = spec.holdout_every > 0 and k % spec.holdout_every == spec.holdout_offset % spec.holdout_every
        frames.append(Frame(pose=[float(v) for v in cam.pose.ravel()], rgb=f"rgb/{name}.ppm",
                            feat=f"feat/{name}.lsrf", mask=f"mask/{name}.pgm",
                            split="test" if is_test else "train"))
    cam0 = cameras[0]
    manifest = SceneManifest(cam0.focal, cam0.cx, cam0.cy, cam0.height, cam0.width, spec.near, spec.far,
                             frames, text="text.lsrt", root=out)
    save_manifest(manifest, out / "manifest.json")
    return manifest
