"""Model checkpoints and their ``GLOM`` file format.

Tensors are held (and written) as little-endian float32, so a checkpoint
that went through :func:`save_checkpoint`/:func:`load_checkpoint` compares
equal bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binfmt import read_container, write_container
from .errors import CompatibilityError, FormatError
from .nn import ArchitectureSpec, Model
from .ops import BatchNormState

MAGIC = b"GLOM"
FORMAT_VERSION = 1
_STORE = np.dtype("<f4")


@dataclass(eq=False)
class ModelCheckpoint:
    spec: ArchitectureSpec
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: Model, **metadata) -> "ModelCheckpoint":
        params = {k: np.array(t.data, dtype=_STORE) for k, t in model.params.items()}
        buffers = {}
        for name, st in model.bn_state.items():
            buffers[f"{name}.running_mean"] = np.array(st.running_mean, dtype=_STORE)
            buffers[f"{name}.running_var"] = np.array(st.running_var, dtype=_STORE)
        return cls(model.spec, params, buffers, dict(metadata))

    def to_model(self, dtype=np.float64) -> Model:
        from .nn import build_architecture

        model = build_architecture(self.spec, seed=0, dtype=dtype)
        if set(model.params) != set(self.params):
            raise CompatibilityError("checkpoint tensors do not match the architecture's layer enumeration")
        for name, t in model.params.items():
            if self.params[name].shape != t.shape:
                raise CompatibilityError(f"{name}: stored shape {self.params[name].shape} != {t.shape}")
            t.data = np.array(self.params[name], dtype=dtype)
        for name, st in model.bn_state.items():
            model.bn_state[name] = BatchNormState(
                np.array(self.buffers[f"{name}.running_mean"], dtype=dtype),
                np.array(self.buffers[f"{name}.running_var"], dtype=dtype),
            )
        return model

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelCheckpoint):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.metadata == other.metadata
            and self.version == other.version
            and _same_tensors(self.params, other.params)
            and _same_tensors(self.buffers, other.buffers)
        )


def _same_tensors(a: dict, b: dict) -> bool:
    if list(a) != list(b):
        return False
    return all(a[k].dtype == b[k].dtype and a[k].shape == b[k].shape and a[k].tobytes() == b[k].tobytes() for k in a)


def save_checkpoint(source, path, **metadata) -> ModelCheckpoint:
    """Write a checkpoint (or a model, snapshotted first) to ``path``."""
    ckpt = source if isinstance(source, ModelCheckpoint) else ModelCheckpoint.from_model(source, **metadata)
    directory, chunks, offset = [], [], 0
    for kind, tensors in (("param", ckpt.params), ("buffer", ckpt.buffers)):
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype=_STORE).tobytes()
            directory.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "architecture": ckpt.spec.to_dict(),
        "tensors": directory,
        "metadata": ckpt.metadata,
        "payload_bytes": offset,
    }
    write_container(path, MAGIC, ckpt.version, header, b"".join(chunks))
    return ckpt


def load_checkpoint(path) -> ModelCheckpoint:
    version, header, payload = read_container(path, MAGIC, FORMAT_VERSION)
    try:
        spec = ArchitectureSpec.from_dict(header["architecture"])
        params, buffers = {}, {}
        for entry in header["tensors"]:
            raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
            arr = np.frombuffer(raw, dtype=_STORE).reshape(entry["shape"]).copy()
            (params if entry["kind"] == "param" else buffers)[entry["name"]] = arr
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header ({exc})") from exc
    return ModelCheckpoint(spec, params, buffers, header.get("metadata", {}), version)

