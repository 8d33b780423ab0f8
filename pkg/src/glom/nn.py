"""The four CNN architectures, their forward pass and weight transfer.

Architecture 4 is the feature extractor: six 3x3 conv blocks (16, 32, 32, 64,
64, 128 filters) each followed by batch-norm and ReLU, max-pooling plus
dropout after the first five, and a global average pool that turns the last
128 feature maps into the 128-d vector handed to the SVM.  The head is three
fully-connected layers, 128 -> 128 -> 64 -> num_classes.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import ops
from .errors import CompatibilityError, DimensionError, ValidationError
from .tensor import Tensor, no_grad

CONV_DROPOUT = 0.25
HEAD_DROPOUT = 0.5
FEATURE_DIM = 128


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | bn | relu | pool | dropout | gap
    filters: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    rate: float = 0.0


@dataclass(frozen=True)
class ArchitectureSpec:
    arch_id: int
    layers: tuple[LayerSpec, ...]
    head_widths: tuple[int, ...]
    head_activation: str = "softmax"
    num_classes: int = 2
    input_shape: tuple[int, int, int] = (3, 224, 224)
    head_dropout: float = HEAD_DROPOUT
    feature_tap: str = "backbone"  # or "fc1": first hidden FC output

    # -- introspection -----------------------------------------------------
    def count(self, kind: str) -> int:
        return sum(1 for layer in self.layers if layer.kind == kind)

    @property
    def n_fc(self) -> int:
        return len(self.head_widths) + 1

    @property
    def backbone_dim(self) -> int:
        convs = [layer.filters for layer in self.layers if layer.kind == "conv"]
        return convs[-1] if convs else self.input_shape[0]

    @property
    def feature_dim(self) -> int:
        if self.feature_tap == "fc1" and self.head_widths:
            return self.head_widths[0]
        return self.backbone_dim

    def violations(self) -> list[str]:
        problems = []
        n_conv, n_pool = self.count("conv"), self.count("pool")
        expected_conv = {1: 4, 2: 4, 3: 5, 4: 6}.get(self.arch_id)
        if expected_conv is None:
            problems.append(f"arch_id must be 1..4, got {self.arch_id}")
        elif n_conv != expected_conv:
            problems.append(f"architecture {self.arch_id} needs {expected_conv} conv layers, has {n_conv}")
        if self.arch_id == 4:
            if n_pool != 5:
                problems.append(f"architecture 4 needs 5 max-pool layers, has {n_pool}")
            if self.n_fc != 3:
                problems.append(f"architecture 4 needs 3 fully-connected layers, has {self.n_fc}")
            if self.head_activation != "softmax":
                problems.append("architecture 4 needs a softmax top")
            if self.feature_dim != FEATURE_DIM:
                problems.append(f"architecture 4 backbone must emit {FEATURE_DIM} features, emits {self.feature_dim}")
        if self.num_classes not in (2, 4):
            problems.append(f"num_classes must be 2 or 4, got {self.num_classes}")
        if self.head_activation not in ("softmax", "sigmoid"):
            problems.append(f"unknown head activation {self.head_activation!r}")
        if self.head_activation == "sigmoid" and self.num_classes != 2:
            problems.append("a sigmoid head only supports 2 classes")
        if self.feature_tap not in ("backbone", "fc1"):
            problems.append(f"unknown feature tap {self.feature_tap!r}")
        if not self.layers or self.layers[-1].kind != "gap":
            problems.append("backbone must end with global average pooling")
        size = min(self.input_shape[1:])
        for layer in self.layers:
            if layer.kind == "conv":
                size = ops.conv_output_size(size, layer.kernel, layer.stride, layer.padding)
            elif layer.kind == "pool":
                size = (size - layer.kernel) // layer.stride + 1
            if size < 1:
                problems.append(f"input {self.input_shape[1:]} collapses to nothing through the backbone")
                break
        return problems

    def validate(self) -> "ArchitectureSpec":
        problems = self.violations()
        if problems:
            raise ValidationError("invalid architecture: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layers"] = [asdict(layer) for layer in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        d["layers"] = tuple(LayerSpec(**layer) for layer in d["layers"])
        d["head_widths"] = tuple(d["head_widths"])
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


def _block(filters: int, pool: bool) -> list[LayerSpec]:
    layers = [LayerSpec("conv", filters=filters), LayerSpec("bn"), LayerSpec("relu")]
    if pool:
        layers += [LayerSpec("pool", kernel=2, stride=2, padding=0), LayerSpec("dropout", rate=CONV_DROPOUT)]
    return layers


_BACKBONES = {
    1: ((16, True), (32, True), (64, True), (128, False)),
    2: ((16, True), (32, True), (64, True), (128, True)),
    3: ((16, True), (32, True), (64, True), (64, True), (128, False)),
    4: ((16, True), (32, True), (32, True), (64, True), (64, True), (128, False)),
}
_HEADS = {1: (), 2: (64,), 3: (64,), 4: (128, 64)}


def architecture(
    arch_id: int,
    num_classes: int = 2,
    input_size: int = 224,
    head_activation: str = "softmax",
    feature_tap: str = "backbone",
) -> ArchitectureSpec:
    """Canonical spec for architecture 1-4 at a square input size."""
    if arch_id not in _BACKBONES:
        raise ValidationError(f"arch_id must be 1..4, got {arch_id}")
    layers: list[LayerSpec] = []
    for filters, pool in _BACKBONES[arch_id]:
        layers += _block(filters, pool)
    layers.append(LayerSpec("gap"))
    return ArchitectureSpec(
        arch_id=arch_id,
        layers=tuple(layers),
        head_widths=_HEADS[arch_id],
        head_activation=head_activation,
        num_classes=num_classes,
        input_shape=(3, input_size, input_size),
        feature_tap=feature_tap,
    ).validate()


class ForwardPass(NamedTuple):
    probs: Tensor
    features: Tensor
    logits: Tensor


@dataclass
class Model:
    spec: ArchitectureSpec
    params: dict[str, Tensor]
    bn_state: dict[str, ops.BatchNormState]
    dtype: np.dtype = field(default=np.dtype(np.float64))

    def forward(self, x, mode: str = "eval", rng=None, bn_sink: dict | None = None) -> ForwardPass:
        """Run the network.  With ``bn_sink``, batch-norm normalizes with batch
        statistics (recorded into the sink) while dropout stays off."""
        spec = self.spec
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
            raise DimensionError(f"expected input (N, {', '.join(map(str, spec.input_shape))}), got {x.shape}")
        if mode == "train" and rng is None:
            rng = np.random.default_rng(0)
        p = self.params
        h = x
        conv_i = 0
        layers = spec.layers
        fused = False
        for li, layer in enumerate(layers):
            if layer.kind == "conv":
                conv_i += 1
                h = ops.conv2d(h, p[f"conv{conv_i}.weight"], layer.stride, layer.padding)
            elif layer.kind == "bn":
                name = f"bn{conv_i}"
                scale, shift = p[f"{name}.scale"], p[f"{name}.shift"]
                # a directly following ReLU is folded into the normalization pass
                fused = li + 1 < len(layers) and layers[li + 1].kind == "relu"
                if bn_sink is None:
                    h = ops.batchnorm(h, scale, shift, self.bn_state[name], mode, relu=fused)
                else:
                    scratch = ops.BatchNormState.fresh(h.shape[1])
                    m = h.size // h.shape[1]
                    h = ops.batchnorm(h, scale, shift, scratch, "train", momentum=0.0, relu=fused)
                    bn_sink.setdefault(name, []).append((m, scratch.running_mean, scratch.running_var * (m - 1) / m))
            elif layer.kind == "relu":
                if not fused:
                    h = ops.relu(h)
                fused = False
            elif layer.kind == "pool":
                h = ops.maxpool2d(h, layer.kernel, layer.stride)
            elif layer.kind == "dropout" and bn_sink is None:
                h = ops.dropout(h, layer.rate, mode, rng)
            elif layer.kind == "gap":
                h = ops.global_avg_pool(h)
        features = h
        h = ops.dropout(h, spec.head_dropout, mode, rng)
        for j in range(1, spec.n_fc + 1):
            h = ops.dense(h, p[f"fc{j}.weight"], p[f"fc{j}.bias"])
            if j < spec.n_fc:
                h = ops.relu(h)
                if j == 1 and spec.feature_tap == "fc1":
                    features = h
        logits = h
        if spec.head_activation == "softmax":
            probs = ops.softmax(logits)
        else:
            pos = ops.sigmoid(logits)
            probs = pos * np.array([[-1.0, 1.0]], dtype=self.dtype) + np.array([[1.0, 0.0]], dtype=self.dtype)
        return ForwardPass(probs, features, logits)

    def loss(self, out: ForwardPass, labels) -> Tensor:
        if self.spec.head_activation == "softmax":
            return ops.softmax_cross_entropy(out.logits, labels)
        return ops.cross_entropy(out.probs, labels)

    def predict_proba(self, images, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode probabilities and features for an image array, batched."""
        probs, feats = [], []
        with no_grad():
            for start in range(0, len(images), batch_size):
                out = self.forward(np.asarray(images[start : start + batch_size], dtype=self.dtype), "eval")
                probs.append(out.probs.data)
                feats.append(out.features.data)
        k = self.spec.num_classes
        if not probs:
            return np.zeros((0, k)), np.zeros((0, self.spec.feature_dim))
        return np.concatenate(probs), np.concatenate(feats)

    def recalibrate_bn(self, images, batch_size: int = 64) -> None:
        """Replace the running statistics by exact dropout-free statistics over ``images``.

        Running averages collected while dropout is active overstate the
        activation variance seen at inference; re-estimating them without
        dropout removes that shift.
        """
        if len(images) < 2:
            raise DimensionError("recalibration needs at least two images")
        sink: dict = {}
        with no_grad():
            for start in range(0, len(images), batch_size):
                batch = np.asarray(images[start : start + batch_size], dtype=self.dtype)
                if len(batch) >= 2:
                    self.forward(batch, "train", bn_sink=sink)
        for name, parts in sink.items():
            count = sum(m for m, _, _ in parts)
            mean = sum(m * mu for m, mu, _ in parts) / count
            second = sum(m * (var + mu * mu) for m, mu, var in parts) / count
            st = self.bn_state[name]
            st.running_mean[:] = mean
            st.running_var[:] = np.maximum(second - mean * mean, 0.0) * count / (count - 1)

    def weight_names(self) -> list[str]:
        return [name for name in self.params if name.endswith(".weight")]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def _fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build_architecture(spec: ArchitectureSpec, seed: int = 0, dtype=np.float64) -> Model:
    """Instantiate ``spec`` with seed-driven fan-in-scaled uniform weights."""
    spec.validate()
    dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    bn_state: dict[str, ops.BatchNormState] = {}
    channels = spec.input_shape[0]
    conv_i = 0
    for layer in spec.layers:
        if layer.kind == "conv":
            conv_i += 1
            shape = (layer.filters, channels, layer.kernel, layer.kernel)
            w = _fan_in_uniform(rng, shape, channels * layer.kernel**2, dtype)
            params[f"conv{conv_i}.weight"] = Tensor(w, requires_grad=True)
            channels = layer.filters
        elif layer.kind == "bn":
            params[f"bn{conv_i}.scale"] = Tensor(np.ones(channels, dtype), requires_grad=True)
            params[f"bn{conv_i}.shift"] = Tensor(np.zeros(channels, dtype), requires_grad=True)
            bn_state[f"bn{conv_i}"] = ops.BatchNormState.fresh(channels, dtype)
    width = channels
    out_units = 1 if spec.head_activation == "sigmoid" else spec.num_classes
    for j, units in enumerate(list(spec.head_widths) + [out_units], start=1):
        params[f"fc{j}.weight"] = Tensor(_fan_in_uniform(rng, (units, width), width, dtype), requires_grad=True)
        params[f"fc{j}.bias"] = Tensor(np.zeros(units, dtype), requires_grad=True)
        width = units
    return Model(spec, params, bn_state, dtype)


def extract_features(source, images, batch_size: int = 64, expect: ArchitectureSpec | None = None) -> np.ndarray:
    """Eval-mode backbone features ``(N, feature_dim)``; rows follow input order."""
    from .checkpoint import ModelCheckpoint

    if isinstance(source, ModelCheckpoint):
        model = source.to_model()
    elif isinstance(source, Model):
        model = source
    else:
        raise CompatibilityError(f"cannot extract features from {type(source).__name__}")
    if expect is not None and expect != model.spec:
        raise CompatibilityError(
            f"checkpoint holds architecture {model.spec.arch_id} ({model.spec.num_classes} classes, "
            f"input {model.spec.input_shape}); expected architecture {expect.arch_id}"
        )
    images = np.asarray(images)
    if images.ndim != 4 or tuple(images.shape[1:]) != model.spec.input_shape:
        raise CompatibilityError(f"images of shape {images.shape[1:]} do not fit input {model.spec.input_shape}")
    return model.predict_proba(images, batch_size)[1]


def adapt_head(source, new_num_classes: int = 4, seed: int = 0) -> Model:
    """Copy a trained architecture-4 model and re-initialize only its output layer."""
    if isinstance(source, Model):
        # live models are copied directly; a checkpoint round trip would cast to float32
        spec, dtype = source.spec, source.dtype
        params = {k: t.data for k, t in source.params.items()}
        buffers = {}
        for k, st in source.bn_state.items():
            buffers[f"{k}.running_mean"], buffers[f"{k}.running_var"] = st.running_mean, st.running_var
    else:
        spec, dtype, params, buffers = source.spec, np.float64, source.params, source.buffers
    if spec.arch_id != 4:
        raise CompatibilityError(f"head adaptation needs architecture 4, got {spec.arch_id}")
    new_spec = replace(spec, num_classes=new_num_classes, head_activation="softmax").validate()
    model = build_architecture(new_spec, seed=seed, dtype=dtype)
    final = f"fc{new_spec.n_fc}."
    for name, t in model.params.items():
        if not name.startswith(final):
            t.data = np.array(params[name], dtype=dtype)
    for name, st in model.bn_state.items():
        st.running_mean[:] = buffers[f"{name}.running_mean"]
        st.running_var[:] = buffers[f"{name}.running_var"]
    return model
