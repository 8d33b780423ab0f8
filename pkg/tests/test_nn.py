import numpy as np
import pytest

from glom.checkpoint import ModelCheckpoint
from glom.data import LabeledImageSet
from glom.errors import CompatibilityError, DataError, DimensionError, ParameterError, ValidationError
from glom.nn import FEATURE_DIM, adapt_head, architecture, build_architecture, extract_features
from glom.optim import AdamState, adam_step
from glom.tensor import Tensor
from glom.train import TrainConfig, train

from gradtools import TOL
from glom.gradcheck import numeric_gradient, relative_error


@pytest.mark.parametrize("arch,convs,pools,fcs", [(1, 4, 3, 1), (2, 4, 4, 2), (3, 5, 4, 2), (4, 6, 5, 3)])
def test_architecture_shapes(arch, convs, pools, fcs):
    spec = architecture(arch, 2, 64)
    assert spec.count("conv") == convs and spec.count("pool") == pools and spec.n_fc == fcs
    assert spec.feature_dim == 128


def test_architecture_four_rejects_tiny_input():
    with pytest.raises(ValidationError):
        architecture(4, 2, 16)


def test_invalid_class_count():
    with pytest.raises(ValidationError):
        architecture(4, 3, 64)


def test_spec_dict_round_trip():
    spec = architecture(4, 4, 32)
    assert type(spec).from_dict(spec.to_dict()) == spec


def test_build_is_seeded():
    a = build_architecture(architecture(4, 2, 32), seed=1)
    b = build_architecture(architecture(4, 2, 32), seed=1)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


def test_forward_shapes_and_probabilities():
    model = build_architecture(architecture(4, 4, 32), seed=0)
    out = model.forward(np.random.default_rng(0).random((3, 3, 32, 32)))
    assert out.probs.shape == (3, 4) and out.features.shape == (3, FEATURE_DIM)
    np.testing.assert_allclose(out.probs.data.sum(axis=1), 1.0)


def test_forward_rejects_wrong_input():
    model = build_architecture(architecture(4, 2, 32))
    with pytest.raises(DimensionError):
        model.forward(np.zeros((1, 3, 64, 64)))


def test_whole_network_gradient():
    """End-to-end tape check through every layer kind of architecture 4 (dropout off)."""
    spec = architecture(4, 2, 32)
    model = build_architecture(spec, seed=4)
    rng = np.random.default_rng(0)
    x = rng.random((2, 3, 32, 32))
    y = np.array([0, 1])
    name = "fc2.weight"
    out = model.forward(x, "eval")
    loss = model.loss(out, y)
    model.zero_grad()
    loss.backward()
    w = model.params[name]

    def f(arr):
        saved = w.data
        w.data = arr
        try:
            return float(model.loss(model.forward(x, "eval"), y).data)
        finally:
            w.data = saved

    num = numeric_gradient(f, w.data.copy())
    assert relative_error(w.grad, num) < TOL


def test_recalibration_matches_batch_statistics():
    model = build_architecture(architecture(4, 2, 32), seed=0)
    images = np.random.default_rng(2).random((10, 3, 32, 32))
    model.recalibrate_bn(images, batch_size=4)
    st = model.bn_state["bn1"]
    from glom import ops

    h = ops.conv2d(Tensor(images), model.params["conv1.weight"], 1, 1).data
    np.testing.assert_allclose(st.running_mean, h.mean(axis=(0, 2, 3)), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(st.running_var, h.var(axis=(0, 2, 3), ddof=1), rtol=1e-10)


def test_adapt_head_keeps_backbone():
    src = build_architecture(architecture(4, 2, 32), seed=0)
    new = adapt_head(src, 4, seed=1)
    assert new.spec.num_classes == 4
    for name, t in new.params.items():
        if name.startswith("fc3."):
            assert t.shape[0] == 4 or t.shape == (4,)
        else:
            np.testing.assert_array_equal(t.data, src.params[name].data)


def test_adapt_head_needs_architecture_four():
    with pytest.raises(CompatibilityError):
        adapt_head(build_architecture(architecture(2, 2, 32)), 4)


def test_extract_features_checks_shape():
    model = build_architecture(architecture(4, 2, 32))
    with pytest.raises(CompatibilityError):
        extract_features(model, np.zeros((1, 3, 40, 40)))
    with pytest.raises(CompatibilityError):
        extract_features(model, np.zeros((1, 3, 32, 32)), expect=architecture(4, 4, 32))


def test_adam_first_step_is_lr_sign():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    adam_step(p, {"w": np.array([0.5, -3.0, 1e-3])}, AdamState(), TrainConfig(learning_rate=0.1))
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 2.9], atol=1e-5)


def test_adam_step_size_decays():
    cfg = TrainConfig(learning_rate=0.1, decay=1.0)
    p, st = {"w": np.zeros(1)}, AdamState()
    adam_step(p, {"w": np.ones(1)}, st, cfg)
    first = p["w"].copy()
    adam_step(p, {"w": np.ones(1)}, st, cfg)
    np.testing.assert_allclose(p["w"] - first, -0.05, rtol=1e-4)


@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(learning_rate=-1), dict(bn_recalibrate=1), dict(dtype="int8")])
def test_train_config_validation(kwargs):
    with pytest.raises(ParameterError):
        TrainConfig(**kwargs)


def _toy(n=16, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.random((n, 3, 32, 32)) * 0.2
    images[labels == 1, :, 8:24, 8:24] += 0.7
    return LabeledImageSet(images, labels, [f"t{i}" for i in range(n)], ["a", "b"])


def test_train_learns_toy_task_and_is_deterministic():
    data = _toy()
    cfg = TrainConfig(epochs=6, learning_rate=3e-3, seed=0, bn_recalibrate=16)

    def run():
        model = build_architecture(architecture(4, 2, 32), seed=0)
        return train(model, data, data, cfg)

    t1, c1 = run()
    t2, c2 = run()
    assert len(t1) == 6
    assert t1.train_loss[-1] < t1.train_loss[0]
    assert t1.peak_val_acc >= 0.9
    assert c1 == c2 and c1.metadata["epoch"] == t1.best_epoch()
    assert isinstance(c1, ModelCheckpoint)


def test_train_rejects_empty_validation():
    with pytest.raises(DataError):
        train(build_architecture(architecture(4, 2, 32)), _toy(), _toy().subset([]), TrainConfig(epochs=1))
