"""Shared data model: frame/batch containers, model configs, the model
registry and the seeding contract."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np


class ConfigError(ValueError):
    """Invalid or incompatible configuration."""


class RegistryError(KeyError):
    """Duplicate or unknown registry name."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class ContractError(ValueError):
    """Array shape or value contract violated."""


# ---------------------------------------------------------------------------
# Frames and batches
# ---------------------------------------------------------------------------

ROLES = ("context", "target", "prediction")


@dataclass(frozen=True)
class FrameSpec:
    channels: int = 1
    height: int = 64
    width: int = 64

    def __post_init__(self):
        for name in ("channels", "height", "width"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ConfigError(f"FrameSpec.{name} must be a positive integer, got {v!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)

    @property
    def pixels(self) -> int:
        return self.channels * self.height * self.width


@dataclass(frozen=True, eq=False)
class VideoBatch:
    """A (B, T, C, H, W) float array tagged with its frame spec and role.

    Context and target batches must lie in [0, 1]; predictions only need to be
    finite (models never clamp).
    """

    data: np.ndarray
    spec: FrameSpec
    role: str = "context"

    def __post_init__(self):
        if self.role not in ROLES:
            raise ContractError(f"unknown role {self.role!r}")
        d = self.data
        if d.ndim != 5:
            raise ContractError(f"expected 5 axes (B, T, C, H, W), got shape {d.shape}")
        if tuple(d.shape[2:]) != self.spec.shape:
            raise ContractError(f"frame axes {tuple(d.shape[2:])} do not match spec {self.spec.shape}")
        if d.size and not np.all(np.isfinite(d)):
            raise ContractError("batch contains non-finite values")
        if self.role != "prediction" and d.size and (d.min() < 0.0 or d.max() > 1.0):
            raise ContractError(f"{self.role} values must lie in [0, 1]")

    @property
    def batch_size(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    def save(self, path) -> None:
        """Write raw data (any dtype) plus spec/role metadata to an ``.npz``."""
        meta = {"spec": dataclasses.asdict(self.spec), "role": self.role}
        np.savez(path, data=self.data, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8))

    @classmethod
    def load(cls, path) -> "VideoBatch":
        with np.load(path) as z:
            meta = json.loads(z["meta"].tobytes().decode())
            data = z["data"]
        return cls(data, FrameSpec(**meta["spec"]), meta["role"])

    def __eq__(self, other):
        if not isinstance(other, VideoBatch):
            return NotImplemented
        return (self.spec == other.spec and self.role == other.role
                and self.data.dtype == other.data.dtype
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True, eq=False)
class SequencePair:
    """Context frames and the future frames to predict.

    ``provenance`` optionally carries what is needed to re-render the sequence
    (sprites, trajectories, background); the dynamic perturbation requires it.
    """

    context: VideoBatch
    target: VideoBatch
    provenance: Any = None

    def __post_init__(self):
        if self.context.spec != self.target.spec:
            raise ContractError("context and target frame specs differ")
        if self.context.length < 1 or self.target.length < 1:
            raise ContractError("context and target need at least one frame each")


def to_unit_uint8(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def from_uint8(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------------------
# Model configuration and registry
# ---------------------------------------------------------------------------

MODEL_KINDS = ("convlstm", "st_lstm", "metavp")
MIXER_KINDS = ("attention", "mlp_mixer", "conv_next", "gated_attention")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "metavp"
    mixer: Optional[str] = None
    hid_S: int = 64
    hid_T: int = 512
    N_S: int = 4
    N_T: int = 8
    T: int = 10
    T_prime: int = 10
    frame_spec: FrameSpec = field(default_factory=FrameSpec)
    # recurrent-free extras
    mlp_ratio: float = 8.0
    drop_path: float = 0.0
    # recurrent extras
    num_layers: int = 4
    num_hidden: int = 128
    filter_size: int = 3

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        if self.mixer is not None and self.mixer not in MIXER_KINDS:
            raise ConfigError(f"mixer must be one of {MIXER_KINDS}, got {self.mixer!r}")
        if self.kind != "metavp" and self.mixer is not None:
            raise ConfigError(f"mixer is only valid for metavp, not {self.kind}")
        if self.N_S < 2 or self.N_S % 2:
            raise ConfigError(f"N_S must be a positive even integer, got {self.N_S}")
        if self.N_T < 0:
            raise ConfigError("N_T must be >= 0")
        for name in ("hid_S", "hid_T", "T", "num_layers", "num_hidden", "filter_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.T_prime < 0:
            raise ConfigError("T_prime must be >= 0")
        if not 0.0 <= self.drop_path <= 1.0:
            raise ConfigError("drop_path must lie in [0, 1]")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        fs = d.pop("frame_spec", None)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig key(s): {sorted(unknown)}")
        if isinstance(fs, dict):
            fs = FrameSpec(**fs)
        return cls(frame_spec=fs or FrameSpec(), **d)


# Architecture presets per benchmark: (T, T', hid_S, hid_T, N_S, N_T, epochs)
# and frame shapes (C, H, W).
DATASET_PRESETS: dict[str, dict] = {
    "mmnist":    dict(T=10, T_prime=10, hid_S=64, hid_T=512, N_S=4, N_T=8, epochs=200, frame=(1, 64, 64)),
    "kitti":     dict(T=10, T_prime=1, hid_S=64, hid_T=256, N_S=2, N_T=6, epochs=100, frame=(3, 128, 160)),
    "kth":       dict(T=10, T_prime=20, hid_S=64, hid_T=256, N_S=2, N_T=6, epochs=100, frame=(1, 128, 128)),
    "human":     dict(T=4, T_prime=4, hid_S=64, hid_T=512, N_S=4, N_T=6, epochs=50, frame=(3, 128, 128)),
    "taxibj":    dict(T=4, T_prime=4, hid_S=32, hid_T=256, N_S=2, N_T=8, epochs=50, frame=(2, 32, 32)),
    "weather_s": dict(T=12, T_prime=12, hid_S=32, hid_T=256, N_S=2, N_T=8, epochs=50, frame=(1, 32, 64)),
    "weather_m": dict(T=4, T_prime=4, hid_S=32, hid_T=256, N_S=2, N_T=8, epochs=50, frame=(4, 32, 64)),
}

LR_GRID = (1e-2, 5e-3, 1e-3, 5e-4, 1e-4)
DROP_PATH_GRID = (0.0, 0.1, 0.2)


def preset_config(dataset: str = "mmnist", kind: str = "metavp", mixer: Optional[str] = None,
                  **overrides) -> ModelConfig:
    p = dict(DATASET_PRESETS[dataset])
    p.pop("epochs")
    c, h, w = p.pop("frame")
    p.update(overrides)
    return ModelConfig(kind=kind, mixer=mixer, frame_spec=FrameSpec(c, h, w), **p)


CATEGORIES = ("recurrent_based", "recurrent_free")

# Category of every method in the benchmark taxonomy, implemented or not.
TAXONOMY = {
    "ConvLSTM": "recurrent_based", "PredNet": "recurrent_based", "PredRNN": "recurrent_based",
    "PredRNN++": "recurrent_based", "MIM": "recurrent_based", "E3D-LSTM": "recurrent_based",
    "CrevNet": "recurrent_based", "PhyDNet": "recurrent_based", "MAU": "recurrent_based",
    "PredRNNv2": "recurrent_based", "DMVFN": "recurrent_based",
    "SimVP": "recurrent_free", "TAU": "recurrent_free", "SimVPv2": "recurrent_free",
}


@dataclass(frozen=True)
class RegistryEntry:
    name: str
    category: str
    builder: Callable[[ModelConfig], Any]
    kind: str = "metavp"
    mixer: Optional[str] = None

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ConfigError(f"category must be one of {CATEGORIES}")


_REGISTRY: dict[str, RegistryEntry] = {}


def register_model(entry: RegistryEntry) -> None:
    if entry.name in _REGISTRY:
        raise RegistryError(f"model {entry.name!r} is already registered")
    _REGISTRY[entry.name] = entry


def unregister_model(name: str) -> None:
    _REGISTRY.pop(name, None)


def registry_entry(name: str) -> RegistryEntry:
    _ensure_builtin_models()
    try:
        return _REGISTRY[name]
    except KeyError:
        raise RegistryError(f"unknown model {name!r}; registered: {sorted(_REGISTRY)}") from None


def registered_names() -> list[str]:
    _ensure_builtin_models()
    return sorted(_REGISTRY)


def resolve_config(name: str, config: ModelConfig) -> ModelConfig:
    """Check ``config`` against the registry entry; kind and mixer come from the entry."""
    entry = registry_entry(name)
    if entry.kind != "metavp":
        if config.mixer is not None:
            raise ConfigError(f"{name} does not take a mixer (got {config.mixer!r})")
        return config.replace(kind=entry.kind)
    if config.mixer is not None and config.mixer != entry.mixer:
        raise ConfigError(f"{name} uses mixer {entry.mixer!r}, config says {config.mixer!r}")
    return config.replace(kind="metavp", mixer=entry.mixer)


def build_model(name: str, config: ModelConfig):
    entry = registry_entry(name)
    config = resolve_config(name, config)
    model = entry.builder(config)
    model.registry_name = name
    return model


def _ensure_builtin_models():
    # importing the models package registers the built-in entries
    import ministl.models  # noqa: F401


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------

_U64 = 1 << 64


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        for name in ("master_seed", "stream_id"):
            v = getattr(self, name)
            if not 0 <= v < _U64:
                raise ConfigError(f"{name} must fit in 64 unsigned bits, got {v}")

    def child(self, stream_id: int) -> "SeedSpec":
        return SeedSpec(self.master_seed, stream_id)


def derive_rng(seed: SeedSpec) -> np.random.Generator:
    """Philox generator keyed by (master_seed, stream_id).

    Philox is counter-based, so each stream is reproducible on its own
    regardless of which other streams were drawn or in what order.
    """
    ss = np.random.SeedSequence(entropy=seed.master_seed, spawn_key=(seed.stream_id,))
    return np.random.Generator(np.random.Philox(ss))


def torch_seed(seed: SeedSpec) -> int:
    return int(derive_rng(seed).integers(0, 2**63 - 1))


def stable_hash(obj: Any) -> str:
    import hashlib

    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()
