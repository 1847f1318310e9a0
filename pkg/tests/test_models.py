import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hseg import checkpoint as C
from hseg import losses as L
from hseg import models as M
from hseg.errors import ConfigError, FormatError, GeometryError
from hseg.gradcheck import max_relative_error, numeric_grad
from hseg.tensor import Tape, Tensor


def small_hunet(seed=0, depth=2, base=4):
    return M.build_hunet(*M.default_configs(depth, base), seed=seed)


def test_same_seed_bit_identical():
    a, b = small_hunet(3), small_hunet(3)
    assert list(a.params) == list(b.params)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_different_seed_differs():
    a, b = small_hunet(3), small_hunet(4)
    assert any(not np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_parameter_count_closed_form():
    # widths 8, 16, 32; each conv contributes F*C*k*k + F
    lnet = (8 * 1 + 8            # adapter 1 -> 8
            + 8 * 8 * 9 + 8 + 8 * 8 * 9 + 8          # enc0
            + 16 * 8 * 9 + 16 + 16 * 16 * 9 + 16     # enc1
            + 32 * 16 * 9 + 32 + 32 * 32 * 9 + 32    # bottleneck
            + 16 * 48 * 9 + 16 + 16 * 16 * 9 + 16    # dec1 (upsampled 32 + skip 16)
            + 8 * 24 * 9 + 8 + 8 * 8 * 9 + 8         # dec0 (16 + 8)
            + 1 * 8 + 1)                             # head
    cnet = lnet + 8 + 3 * 8 + 3  # adapter takes 2 channels, head emits 4
    assert lnet == 30137 and cnet == 30172
    model = M.build_hunet(*M.default_configs(2, 8, 3), seed=0)
    assert model.parameter_count() == lnet + cnet == 60309
    lcfg, ccfg = M.default_configs(2, 8, 3)
    assert lcfg.parameter_count() + ccfg.parameter_count() == 60309


def test_he_initialisation_scale():
    model = M.build_hunet(*M.default_configs(3, 8), seed=1)
    w = model.params["cnet.mid.conv2.w"]
    fan_in = w.shape[1] * w.shape[2] * w.shape[3]
    assert w.std() == pytest.approx(np.sqrt(2 / fan_in), rel=0.05)
    assert not np.any(model.params["cnet.mid.conv2.b"])


def test_cnet_input_width():
    model = small_hunet()
    assert model.params["cnet.adapter.w"].shape[1] == 2
    assert model.params["lnet.adapter.w"].shape[1] == 1


@pytest.mark.parametrize("kw", [{"depth": 0}, {"kernel_size": 4}, {"base_channels": 0}])
def test_bad_unet_config(kw):
    with pytest.raises(ConfigError):
        M.UNetConfig(**kw)


def test_forward_outputs():
    model = small_hunet()
    img = np.random.default_rng(0).random((2, 1, 8, 12)).astype(np.float32)
    lung, cls = M.hunet_forward(model, img)
    assert lung.shape == (2, 1, 8, 12) and cls.shape == (2, 4, 8, 12)
    assert np.all((lung.data > 0) & (lung.data < 1))
    assert np.allclose(cls.data.sum(axis=1), 1, atol=1e-5)


def test_forward_indivisible():
    with pytest.raises(GeometryError, match="divisible by 4"):
        M.hunet_forward(small_hunet(), np.zeros((1, 1, 8, 10), np.float32))


def test_zero_lung_mask_still_valid():
    model = small_hunet()
    model.params["lnet.head.b"] = np.array([-1e4], np.float32)
    lung, cls = M.hunet_forward(model, np.random.default_rng(1).random((1, 1, 8, 8)))
    assert np.all(lung.data == 0)
    assert np.all(np.isfinite(cls.data)) and np.allclose(cls.data.sum(axis=1), 1, atol=1e-5)


def _cnet_loss_fn(model, image, target, cfg):
    names = list(model.params)

    def fn(*tensors):
        _, cls = model.forward(Tensor(image, dtype=tensors[0].dtype), dict(zip(names, tensors)))
        return L.cnet_total_loss(cls, target, cfg)
    return names, fn


def test_cnet_loss_reaches_lnet_encoder():
    rng = np.random.default_rng(2)
    model = small_hunet(seed=5)
    image = rng.random((1, 1, 8, 8))
    target = L.one_hot(rng.integers(0, 4, (1, 8, 8)), dtype=np.float64)
    cfg = L.LossConfig(class_weights=(1, 1, 1, 1))
    names, fn = _cnet_loss_fn(model, image, target, cfg)
    leaves = model.leaves(dtype=np.float64)
    with Tape() as tape:
        loss = fn(*leaves.values())
    grads = tape.backward(loss)
    assert all(np.all(np.isfinite(g)) for g in grads.values())
    key = "lnet.enc0.conv1.w"
    g = grads[leaves[key]]
    assert np.abs(g).max() > 0
    arrays = [model.params[n].astype(np.float64) for n in names]
    idx = names.index(key)
    entries = list(np.argsort(-np.abs(g).reshape(-1))[:5])
    num = numeric_grad(fn, arrays, idx, h=1e-4, entries=entries)
    assert np.all(np.abs(num.reshape(-1)[entries]) > 0)
    assert max_relative_error(g, num) < 1e-3


# checkpoints

def test_checkpoint_roundtrip(tmp_path):
    for model in (small_hunet(7), M.build_model("flat", 2, 4, seed=7)):
        path = tmp_path / f"{model.kind}.hseg"
        C.save_checkpoint(model, path)
        back = C.load_checkpoint(path)
        assert type(back) is type(model)
        assert list(back.params) == list(model.params)
        assert all(np.array_equal(back.params[k], model.params[k]) for k in model.params)
        assert C.encode(back.params) == path.read_bytes()


def test_checkpoint_size_formula(tmp_path):
    model = small_hunet()
    path = tmp_path / "m.hseg"
    C.save_checkpoint(model, path)
    expected = 4 + 4 + 4
    for name, arr in model.params.items():
        expected += 2 + len(name) + 1 + 4 * arr.ndim + 4 * arr.size
    assert path.stat().st_size == expected


def test_checkpoint_layout_by_hand():
    params = {"a.w": np.array([[1.5, -2.0]], np.float32)}
    expected = (b"HSEG" + struct.pack("<II", 1, 1) + struct.pack("<H", 3) + b"a.w"
                + bytes([2]) + struct.pack("<II", 1, 2) + struct.pack("<2f", 1.5, -2.0))
    assert C.encode(params) == expected
    assert np.array_equal(C.decode(expected)["a.w"], params["a.w"])


def test_checkpoint_bad_magic(tmp_path):
    model = small_hunet()
    buf = bytearray(C.encode(model.params))
    buf[:4] = b"HSEX"
    path = tmp_path / "bad.hseg"
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatError, match="byte 0"):
        C.load_checkpoint(path)


def test_checkpoint_bad_version():
    buf = bytearray(C.encode(small_hunet().params))
    buf[4:8] = struct.pack("<I", 2)
    with pytest.raises(FormatError, match="byte 4"):
        C.decode(bytes(buf))


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_checkpoint_truncation_anywhere(data):
    buf = C.encode(small_hunet(depth=1, base=2).params)
    cut = data.draw(st.integers(0, len(buf) - 1))
    with pytest.raises(FormatError):
        C.decode(buf[:cut])


def test_checkpoint_trailing_bytes():
    buf = C.encode(small_hunet().params)
    with pytest.raises(FormatError, match="trailing"):
        C.decode(buf + b"\x00")


def test_checkpoint_foreign_layout():
    params = dict(small_hunet().params)
    params.pop("cnet.head.b")
    with pytest.raises(FormatError):
        C.model_from_params(params)
