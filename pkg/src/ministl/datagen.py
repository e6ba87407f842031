"""Moving-MNIST style sequence synthesis and robustness perturbations.

Every sequence is a pure function of (DatasetSpec, index): sequence ``i`` of a
split draws from its own Philox sub-stream, so any subset can be regenerated
in isolation and in any order.
"""

from __future__ import annotations

import dataclasses
import gzip
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (ConfigError, ContractError, FrameSpec, SeedSpec, SequencePair, VideoBatch,
                   derive_rng, from_uint8, to_unit_uint8)

VARIANTS = ("mnist", "fashion_mnist", "mnist_cifar")
SPLITS = ("train", "test")
SPLIT_STREAM_OFFSET = {"train": 0, "test": 1 << 32}
DATA_ROOT_ENV = "MINISTL_DATA_ROOT"


class GeometryError(ValueError):
    pass


class ProvenanceError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrajectorySpec:
    sprite_id: int
    start_position: tuple[float, float]
    velocity: tuple[float, float]
    positions: np.ndarray  # (num_frames, 2) real (x, y), top-left corner of the sprite

    @property
    def pixel_positions(self) -> np.ndarray:
        return np.rint(self.positions).astype(np.int64)


def fold_into_range(u, upper: float):
    """Map unbounded coordinates onto [0, upper] by mirror reflection.

    Equivalent to moving in a straight line and bouncing off both walls: the
    unfolded path is a triangle wave with period ``2 * upper``.
    """
    u = np.asarray(u, dtype=np.float64)
    if upper <= 0:
        return np.zeros_like(u)
    p = np.mod(u, 2.0 * upper)
    return np.where(p > upper, 2.0 * upper - p, p)


def _check_fits(canvas, sprite):
    (H, W), (h, w) = canvas, sprite
    if h > H or w > W:
        raise GeometryError(f"sprite {h}x{w} does not fit in canvas {H}x{W}")
    return W - w, H - h


def sample_trajectory(rng: np.random.Generator, num_frames: int, canvas: tuple[int, int],
                      sprite: tuple[int, int], speed_range: tuple[float, float],
                      sprite_id: int = 0) -> TrajectorySpec:
    """Bouncing straight-line motion with a uniform random heading and speed."""
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    x_max, y_max = _check_fits(canvas, sprite)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    speed = rng.uniform(speed_range[0], speed_range[1])
    x0 = rng.uniform(0.0, x_max)
    y0 = rng.uniform(0.0, y_max)
    vx, vy = speed * np.cos(theta), speed * np.sin(theta)
    k = np.arange(num_frames, dtype=np.float64)
    xs = fold_into_range(x0 + k * vx, x_max)
    ys = fold_into_range(y0 + k * vy, y_max)
    return TrajectorySpec(int(sprite_id), (float(x0), float(y0)), (float(vx), float(vy)),
                          np.stack([xs, ys], axis=1))


def integrate_trajectory(start, velocity, num_frames: int, bounds: tuple[float, float],
                         rng: Optional[np.random.Generator] = None, sigma_v: float = 0.0,
                         sprite_id: int = 0) -> TrajectorySpec:
    """Step-by-step move-then-reflect integration, optionally with velocity noise.

    With ``sigma_v > 0`` Gaussian noise is added to the velocity before every
    step, which makes the motion irregular.
    """
    x_max, y_max = bounds
    pos = np.array(start, dtype=np.float64)
    vel = np.array(velocity, dtype=np.float64)
    upper = np.array([x_max, y_max], dtype=np.float64)
    out = np.empty((num_frames, 2))
    out[0] = pos
    for k in range(1, num_frames):
        if sigma_v > 0:
            vel = vel + rng.normal(0.0, sigma_v, size=2)
        pos = pos + vel
        for a in range(2):
            if upper[a] <= 0:
                pos[a], vel[a] = 0.0, 0.0
                continue
            while pos[a] < 0 or pos[a] > upper[a]:
                if pos[a] < 0:
                    pos[a] = -pos[a]
                else:
                    pos[a] = 2 * upper[a] - pos[a]
                vel[a] = -vel[a]
        out[k] = pos
    return TrajectorySpec(int(sprite_id), (float(start[0]), float(start[1])),
                          (float(velocity[0]), float(velocity[1])), out)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_frames(sprites: Sequence[np.ndarray], trajectories: Sequence[TrajectorySpec],
                  frame_spec: FrameSpec, num_frames: Optional[int] = None,
                  background: Optional[np.ndarray] = None) -> np.ndarray:
    """Composite sprites along their trajectories; returns (L, C, H, W) float32.

    Overlapping sprites combine by per-pixel max. Over a background the sprite
    layer is drawn in white with its own intensity as alpha.
    """
    if len(sprites) != len(trajectories):
        raise ContractError(f"{len(sprites)} sprites but {len(trajectories)} trajectories")
    C, H, W = frame_spec.shape
    if num_frames is None:
        if not trajectories:
            raise ContractError("num_frames is required when there are no trajectories")
        num_frames = len(trajectories[0].positions)
    layer = np.zeros((num_frames, H, W), dtype=np.float32)
    for sprite, traj in zip(sprites, trajectories):
        if len(traj.positions) != num_frames:
            raise ContractError(f"trajectory has {len(traj.positions)} positions, expected {num_frames}")
        h, w = sprite.shape
        pix = traj.pixel_positions
        if (pix.min() < 0 or (pix[:, 0] + w).max() > W or (pix[:, 1] + h).max() > H):
            raise GeometryError("sprite would be drawn outside the canvas")
        for t, (x, y) in enumerate(pix):
            region = layer[t, y:y + h, x:x + w]
            np.maximum(region, sprite, out=region)
    if background is None:
        frames = np.repeat(layer[:, None], C, axis=1)
    else:
        bg = np.asarray(background, dtype=np.float32)
        if bg.ndim == 2:
            bg = bg[None]
        if bg.shape != (C, H, W):
            raise ContractError(f"background shape {bg.shape} does not match frame {(C, H, W)}")
        a = layer[:, None]
        frames = a + (1.0 - a) * bg[None]
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def render_sequence(sprites, trajectories, background=None, frame_spec: FrameSpec = FrameSpec(),
                    num_frames: Optional[int] = None) -> VideoBatch:
    frames = render_frames(sprites, trajectories, frame_spec, num_frames, background)
    return VideoBatch(frames[None], frame_spec, "context")


# ---------------------------------------------------------------------------
# Sprite and background sources
# ---------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    """Read an IDX file (optionally gzipped), e.g. the MNIST image files."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        raw = f.read()
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise ValueError(f"{path}: not an unsigned-byte IDX file")
    dims = struct.unpack(">" + "I" * ndim, raw[4:4 + 4 * ndim])
    return np.frombuffer(raw, dtype=np.uint8, offset=4 + 4 * ndim).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, array.ndim) + struct.pack(">" + "I" * array.ndim, *array.shape)
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as f:
        f.write(header + array.tobytes())


def read_cifar_batch(path) -> np.ndarray:
    """CIFAR-10 binary batch -> (N, 3, 32, 32) uint8 (labels dropped)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 3073:
        raise ValueError(f"{path}: size is not a multiple of a CIFAR-10 record")
    return raw.reshape(-1, 3073)[:, 1:].reshape(-1, 3, 32, 32)


_IDX_NAMES = {"train": "train-images-idx3-ubyte", "test": "t10k-images-idx3-ubyte"}
_CIFAR_NAMES = {"train": [f"data_batch_{i}.bin" for i in range(1, 6)], "test": ["test_batch.bin"]}


def data_root(configured: Optional[str] = None) -> Path:
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    return Path(configured or "data")


def _find(path: Path) -> Path:
    for cand in (path, path.with_name(path.name + ".gz")):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"sprite source not found: expected {path} (or {path}.gz)")


def _resize(images: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    import torch
    import torch.nn.functional as F

    x = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
    squeeze = x.ndim == 3
    if squeeze:
        x = x[:, None]
    y = F.interpolate(x, size=size, mode="bilinear", align_corners=False).clamp(0.0, 1.0)
    return (y[:, 0] if squeeze else y).numpy()


@lru_cache(maxsize=8)
def load_sprites(variant: str, split: str, source: str, root: str) -> np.ndarray:
    """(N, 28, 28) float32 sprite pool in [0, 1]."""
    if source == "builtin":
        if variant == "fashion_mnist":
            raise ConfigError("no builtin sprite source for fashion_mnist; point data_root at the IDX files")
        from sklearn.datasets import load_digits

        digits = load_digits().images.astype(np.float32) / 16.0
        pool = digits[0::2] if split == "train" else digits[1::2]
        return _resize(pool, (28, 28))
    sub = "fashion_mnist" if variant == "fashion_mnist" else "mnist"
    path = _find(Path(root) / sub / _IDX_NAMES[split])
    return from_uint8(read_idx(path))


@lru_cache(maxsize=4)
def load_backgrounds(split: str, source: str, root: str, size: tuple[int, int] = (64, 64)) -> np.ndarray:
    """(N, 3, H, W) float32 background pool in [0, 1]."""
    if source == "builtin":
        # smooth random colour fields stand in for CIFAR images
        n = 512
        rng = derive_rng(SeedSpec(0xC1FA, SPLIT_STREAM_OFFSET[split]))
        coarse = rng.uniform(0.0, 1.0, size=(n, 3, 4, 4)).astype(np.float32)
        return _resize(coarse, size)
    batches = [read_cifar_batch(_find(Path(root) / "cifar-10-batches-bin" / name))
               for name in _CIFAR_NAMES[split]]
    return _resize(from_uint8(np.concatenate(batches)), size)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    variant: str = "mnist"
    split: str = "test"
    count: int = 10_000
    frame_spec: Optional[FrameSpec] = None
    T: int = 10
    T_prime: int = 10
    num_objects: int = 2
    speed_range: tuple[float, float] = (2.0, 5.0)
    seed: SeedSpec = field(default_factory=lambda: SeedSpec(42, 0))
    sprite_source: str = "files"
    data_root: Optional[str] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        if self.sprite_source not in ("files", "builtin"):
            raise ConfigError("sprite_source must be 'files' or 'builtin'")
        if self.count < 0 or self.T < 1 or self.T_prime < 1 or self.num_objects < 0:
            raise ConfigError("count/T/T_prime/num_objects out of range")
        lo, hi = self.speed_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"bad speed_range {self.speed_range}")
        object.__setattr__(self, "speed_range", (float(lo), float(hi)))
        if self.frame_spec is None:
            object.__setattr__(self, "frame_spec",
                               FrameSpec(3 if self.variant == "mnist_cifar" else 1, 64, 64))

    def replace(self, **changes) -> "DatasetSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["speed_range"] = list(self.speed_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown DatasetSpec key(s): {sorted(unknown)}")
        if isinstance(d.get("frame_spec"), dict):
            d["frame_spec"] = FrameSpec(**d["frame_spec"])
        if isinstance(d.get("seed"), dict):
            d["seed"] = SeedSpec(**d["seed"])
        if "speed_range" in d:
            d["speed_range"] = tuple(d["speed_range"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Provenance:
    sprites: tuple
    trajectories: tuple
    background: Optional[np.ndarray]
    frame_spec: FrameSpec
    T: int
    T_prime: int


def _pair_from_frames(frames: np.ndarray, prov: Provenance) -> SequencePair:
    frames = from_uint8(to_unit_uint8(frames))  # on-disk quantisation, so memory == disk
    fs = prov.frame_spec
    ctx = VideoBatch(frames[None, :prov.T], fs, "context")
    tgt = VideoBatch(frames[None, prov.T:prov.T + prov.T_prime], fs, "target")
    return SequencePair(ctx, tgt, prov)


class MovingObjectsDataset:
    """Index-addressable bouncing-sprite dataset."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        if spec.count:
            root = str(data_root(spec.data_root))
            self.sprites = load_sprites(spec.variant, spec.split, spec.sprite_source, root)
            fs = spec.frame_spec
            self.backgrounds = (load_backgrounds(spec.split, spec.sprite_source, root, (fs.height, fs.width))
                                if spec.variant == "mnist_cifar" else None)

    def __len__(self):
        return self.spec.count

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def stream(self, index: int) -> SeedSpec:
        return self.spec.seed.child(SPLIT_STREAM_OFFSET[self.spec.split] + index)

    def __getitem__(self, index: int) -> SequencePair:
        spec = self.spec
        if not 0 <= index < spec.count:
            raise IndexError(index)
        rng = derive_rng(self.stream(index))
        fs = spec.frame_spec
        n = spec.T + spec.T_prime
        ids = rng.integers(0, len(self.sprites), size=spec.num_objects)
        sprites = tuple(self.sprites[i] for i in ids)
        trajs = tuple(sample_trajectory(rng, n, (fs.height, fs.width), s.shape, spec.speed_range, int(i))
                      for s, i in zip(sprites, ids))
        bg = None
        if self.backgrounds is not None:
            bg = self.backgrounds[rng.integers(0, len(self.backgrounds))]
        prov = Provenance(sprites, trajs, bg, fs, spec.T, spec.T_prime)
        return _pair_from_frames(render_frames(sprites, trajs, fs, n, bg), prov)

    def arrays(self, indices=None) -> tuple[np.ndarray, np.ndarray]:
        """uint8 (N, T, C, H, W) context and (N, T', C, H, W) target arrays."""
        indices = range(len(self)) if indices is None else indices
        fs = self.spec.frame_spec
        ctx = np.zeros((len(indices), self.spec.T, *fs.shape), dtype=np.uint8)
        tgt = np.zeros((len(indices), self.spec.T_prime, *fs.shape), dtype=np.uint8)
        for k, i in enumerate(indices):
            pair = self[i]
            ctx[k] = to_unit_uint8(pair.context.data[0])
            tgt[k] = to_unit_uint8(pair.target.data[0])
        return ctx, tgt


def build_dataset(spec: DatasetSpec) -> MovingObjectsDataset:
    return MovingObjectsDataset(spec)


class ArrayDataset:
    """Dataset backed by in-memory uint8 (or float) context/target arrays.

    Also the loader hook for externally prepared data in the container format.
    """

    def __init__(self, context: np.ndarray, target: np.ndarray, frame_spec: Optional[FrameSpec] = None):
        if len(context) != len(target):
            raise ContractError("context and target hold different sequence counts")
        self.context, self.target = context, target
        self.frame_spec = frame_spec or FrameSpec(*context.shape[2:])

    def __len__(self):
        return len(self.context)

    def __getitem__(self, i) -> SequencePair:
        c, t = self.context[i], self.target[i]
        if c.dtype == np.uint8:
            c, t = from_uint8(c), from_uint8(t)
        return SequencePair(VideoBatch(c[None], self.frame_spec, "context"),
                            VideoBatch(t[None], self.frame_spec, "target"))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def arrays(self, indices=None):
        if indices is None:
            return self.context, self.target
        idx = np.asarray(list(indices), dtype=np.int64)
        return self.context[idx], self.target[idx]


# ---------------------------------------------------------------------------
# Container format
# ---------------------------------------------------------------------------

def content_hash(context: np.ndarray, target: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in (context, target):
        a = np.ascontiguousarray(a)
        h.update(f"{a.dtype.str}{a.shape}".encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_container(path, context: np.ndarray, target: np.ndarray, meta: Optional[dict] = None) -> dict:
    """Write ``<path>.npz`` (arrays "context"/"target") and ``<path>.json`` sidecar."""
    path = Path(path).with_suffix("")
    path.parent.mkdir(parents=True, exist_ok=True)
    sidecar = dict(meta or {})
    sidecar["content_hash"] = content_hash(context, target)
    sidecar["shapes"] = {"context": list(context.shape), "target": list(target.shape)}
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez_compressed(tmp, context=context, target=target)
    os.replace(tmp, path.with_suffix(".npz"))
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return sidecar


def load_container(path, verify: bool = True) -> tuple[ArrayDataset, dict]:
    path = Path(path).with_suffix("")
    with np.load(path.with_suffix(".npz")) as z:
        ctx, tgt = z["context"], z["target"]
    meta = {}
    side = path.with_suffix(".json")
    if side.exists():
        meta = json.loads(side.read_text())
        if verify and "content_hash" in meta and meta["content_hash"] != content_hash(ctx, tgt):
            raise IOError(f"{path}.npz content hash does not match its sidecar")
    return ArrayDataset(ctx, tgt), meta


def materialize(dataset: MovingObjectsDataset, path) -> dict:
    ctx, tgt = dataset.arrays()
    return save_container(path, ctx, tgt, {"dataset_spec": dataset.spec.to_dict()})


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------

PERTURBATIONS = ("missing", "dynamic", "perceptual")


@dataclass(frozen=True)
class PerturbationSpec:
    kind: str = "missing"
    p_missing: float = 0.2
    sigma_v: float = 0.5
    patch_size: int = 24
    seed: SeedSpec = field(default_factory=lambda: SeedSpec(0, 0))

    def __post_init__(self):
        if self.kind not in PERTURBATIONS:
            raise ConfigError(f"perturbation kind must be one of {PERTURBATIONS}, got {self.kind!r}")
        if not 0.0 <= self.p_missing <= 1.0:
            raise ConfigError("p_missing must lie in [0, 1]")
        if self.sigma_v < 0:
            raise ConfigError("sigma_v must be >= 0")
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")

    @property
    def label(self) -> str:
        if self.kind == "missing":
            return f"missing(p={self.p_missing:g})"
        if self.kind == "dynamic":
            return f"dynamic(sigma={self.sigma_v:g})"
        return f"perceptual({self.patch_size}x{self.patch_size})"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationSpec":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown PerturbationSpec key(s): {sorted(unknown)}")
        if isinstance(d.get("seed"), dict):
            d["seed"] = SeedSpec(**d["seed"])
        return cls(**d)


def missing_mask(rng: np.random.Generator, num_frames: int, p: float) -> np.ndarray:
    """True where a context frame is dropped."""
    return rng.random(num_frames) < p


def occlusion_corners(rng: np.random.Generator, num_frames: int, canvas: tuple[int, int],
                      patch: int) -> np.ndarray:
    """(num_frames, 2) integer (x, y) top-left corners of the occluding patches."""
    H, W = canvas
    if patch > H or patch > W:
        raise GeometryError(f"patch {patch} larger than canvas {H}x{W}")
    xs = rng.integers(0, W - patch + 1, size=num_frames)
    ys = rng.integers(0, H - patch + 1, size=num_frames)
    return np.stack([xs, ys], axis=1)


def perturb(pair: SequencePair, spec: PerturbationSpec) -> SequencePair:
    rng = derive_rng(spec.seed)
    ctx = pair.context
    if spec.kind == "missing":
        mask = missing_mask(rng, ctx.length, spec.p_missing)
        data = ctx.data.copy()
        data[:, mask] = 0.0
        return SequencePair(VideoBatch(data, ctx.spec, "context"), pair.target, pair.provenance)
    if spec.kind == "perceptual":
        fs = ctx.spec
        corners = occlusion_corners(rng, ctx.length, (fs.height, fs.width), spec.patch_size)
        data = ctx.data.copy()
        p = spec.patch_size
        for t, (x, y) in enumerate(corners):
            data[:, t, :, y:y + p, x:x + p] = 0.0
        return SequencePair(VideoBatch(data, fs, "context"), pair.target, pair.provenance)
    # dynamic: re-integrate every object's motion with a noisy velocity
    prov = pair.provenance
    if not isinstance(prov, Provenance):
        raise ProvenanceError("dynamic perturbation needs the trajectories the pair was rendered from")
    fs = prov.frame_spec
    n = prov.T + prov.T_prime
    trajs = []
    for sprite, tr in zip(prov.sprites, prov.trajectories):
        h, w = sprite.shape
        trajs.append(integrate_trajectory(tr.start_position, tr.velocity, n, (fs.width - w, fs.height - h),
                                          rng, spec.sigma_v, tr.sprite_id))
    new = dataclasses.replace(prov, trajectories=tuple(trajs))
    return _pair_from_frames(render_frames(prov.sprites, trajs, fs, n, prov.background), new)


class PerturbedDataset:
    """Applies a perturbation to every pair; pair ``i`` uses stream ``i`` of the spec's master seed."""

    def __init__(self, base, spec: PerturbationSpec):
        if spec.kind == "dynamic" and not isinstance(base, MovingObjectsDataset):
            raise ProvenanceError("dynamic perturbation needs a generated dataset with trajectories")
        self.base, self.spec = base, spec
        self.frame_spec = getattr(base, "frame_spec", None) or base.spec.frame_spec

    def __len__(self):
        return len(self.base)

    def __getitem__(self, i) -> SequencePair:
        return perturb(self.base[i], dataclasses.replace(self.spec, seed=self.spec.seed.child(i)))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def arrays(self, indices=None):
        indices = range(len(self)) if indices is None else indices
        pairs = [self[i] for i in indices]
        ctx = np.stack([to_unit_uint8(p.context.data[0]) for p in pairs]) if pairs else None
        tgt = np.stack([to_unit_uint8(p.target.data[0]) for p in pairs]) if pairs else None
        return ctx, tgt
