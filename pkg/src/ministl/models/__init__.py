"""Model zoo. Importing this package registers the built-in models."""

from ..core import RegistryEntry, register_model, MIXER_KINDS, _REGISTRY
from .recurrent import ConvLSTMCell, HiddenState, RecurrentPredictor, RolloutConfig, STLSTMCell
from .recurrent_free import MetaVP, MetaFormerBlock, DropPath
from .checkpoint import load_checkpoint, save_checkpoint, CHECKPOINT_VERSION

BUILTIN_ENTRIES = [
    RegistryEntry("convlstm", "recurrent_based", RecurrentPredictor, kind="convlstm"),
    RegistryEntry("predrnn", "recurrent_based", RecurrentPredictor, kind="st_lstm"),
] + [
    RegistryEntry(f"metavp-{m}", "recurrent_free", MetaVP, kind="metavp", mixer=m) for m in MIXER_KINDS
]

for _entry in BUILTIN_ENTRIES:
    if _entry.name not in _REGISTRY:
        register_model(_entry)

__all__ = [
    "ConvLSTMCell", "STLSTMCell", "HiddenState", "RecurrentPredictor", "RolloutConfig",
    "MetaVP", "MetaFormerBlock", "DropPath", "load_checkpoint", "save_checkpoint", "CHECKPOINT_VERSION",
]
