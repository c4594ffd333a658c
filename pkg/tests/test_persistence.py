import csv
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qatts.autograd import OptimizerState, adam_step
from qatts.errors import CorruptFileError, FormatError, StructureError, VersionError
from qatts.intinfer import QuantizedLinearRecord, int_linear_forward, lower_model
from qatts.model import ModelConfig, TransformerModel
from qatts.persistence import (
    append_metrics,
    dump_text,
    export_quantized,
    import_quantized,
    load_checkpoint,
    predicted_quantized_size,
    read_checkpoint,
    save_checkpoint,
)
from qatts.roles import cross_attn
from qatts.train import EpochRecord

from conftest import TINY, calibrated_qat_model


def params_bytes(model):
    return {name: t.data.tobytes() for name, t, _ in model.named_parameters()}


def perturbed_model(seed):
    model = TransformerModel(ModelConfig(**TINY, seed=seed))
    rng = np.random.default_rng(seed)
    for _, t, _ in model.named_parameters():
        t.data = rng.standard_normal(t.shape).astype(np.float32)
    return model


def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = perturbed_model(1)
    opt = OptimizerState(lr=3e-4)
    params = model.parameters()
    adam_step(params, {k: np.ones_like(v.data) for k, v in params.items()}, opt)
    path = tmp_path / "m.qfts"
    save_checkpoint(model, path, opt, meta={"epochs": 3}, seed=9, rng_state={"a": 1})
    ck = read_checkpoint(path)
    assert params_bytes(ck.model) == params_bytes(model)
    assert ck.model.config == model.config
    assert (ck.meta, ck.seed, ck.rng_state) == ({"epochs": 3}, 9, {"a": 1})
    assert ck.optimizer.step == 1 and ck.optimizer.lr == 3e-4
    for name in params:
        assert ck.optimizer.m[name].tobytes() == opt.m[name].astype(np.float32).tobytes()
    assert load_checkpoint(path).param_count() == model.param_count()


def test_checkpoint_roundtrip_with_observers(tmp_path):
    model = calibrated_qat_model(bits=4)
    path = tmp_path / "q.qfts"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.policy == model.policy
    for role, lin in model.linears.items():
        other = back.linears[role].quantizer
        if lin.quantizer is None:
            assert other is None
        else:
            assert other.observer == lin.quantizer.observer and other.frozen
    x = np.random.default_rng(0).standard_normal((2, 48)).astype(np.float32)
    assert back.eval().predict(x).tobytes() == model.predict(x).tobytes()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.sampled_from([None, 2, 8]))
def test_checkpoint_roundtrip_property(tmp_path_factory, seed, bits):
    model = perturbed_model(seed) if bits is None else calibrated_qat_model(bits=bits, seed=seed)
    path = tmp_path_factory.mktemp("ck") / "m.qfts"
    save_checkpoint(model, path)
    assert params_bytes(load_checkpoint(path)) == params_bytes(model)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.qfts"
    path.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(FormatError):
        read_checkpoint(path)
    with pytest.raises(FormatError):
        import_quantized(path)
    with pytest.raises(FormatError):
        dump_text(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "m.qfts"
    save_checkpoint(perturbed_model(0), path)
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(VersionError):
        read_checkpoint(path)


def test_truncated_file(tmp_path):
    path = tmp_path / "m.qfts"
    save_checkpoint(perturbed_model(0), path)
    data = path.read_bytes()
    path.write_bytes(data[: int(len(data) * 0.9)])
    with pytest.raises(CorruptFileError):
        read_checkpoint(path)
    path.write_bytes(data + b"\0")
    with pytest.raises(CorruptFileError):
        read_checkpoint(path)


def test_checkpoint_structure_mismatch(tmp_path):
    path = tmp_path / "m.qfts"
    model = perturbed_model(0)
    save_checkpoint(model, path)
    data = path.read_bytes()
    # rename one parameter in place (same length, so offsets stay valid)
    old = b"enc.0.ff.1.weight"
    assert old in data
    path.write_bytes(data.replace(old, b"enc.0.ff.9.weight", 1))
    with pytest.raises(StructureError):
        read_checkpoint(path)


@pytest.mark.parametrize("flags", [dict(), dict(quantize_bias_by_scale_product=False), dict(shift_approximation=True)])
def test_quantized_roundtrip(tmp_path, flags):
    model = calibrated_qat_model(bits=2, **flags)
    lowered = lower_model(model)
    lowered.meta = {"data": {"column": "OT"}}
    path = tmp_path / "m.qftq"
    export_quantized(lowered, path)
    back = import_quantized(path)
    assert back.meta == lowered.meta and back.policy == lowered.policy
    rng = np.random.default_rng(1)
    for a, b in zip(lowered.layers, back.layers):
        assert a.role == b.role and type(a) is type(b)
        if isinstance(a, QuantizedLinearRecord):
            assert a.q_weights.tobytes() == b.q_weights.tobytes()
            assert a.q_bias.tobytes() == b.q_bias.tobytes()
            assert (a.s_w, a.s_x, a.z_x, a.shift, a.requant, a.bias_mode) == (b.s_w, b.s_x, b.z_x, b.shift, b.requant, b.bias_mode)
            x = rng.standard_normal((5, a.in_features)).astype(np.float32)
            assert int_linear_forward(a, x).tobytes() == int_linear_forward(b, x).tobytes()
    x = rng.standard_normal((3, 48)).astype(np.float32)
    assert lowered.forward(x).tobytes() == back.forward(x).tobytes()
    assert back.compression().ratio == lowered.compression().ratio


def test_quantized_size_accounting(tmp_path):
    lowered = lower_model(calibrated_qat_model(bits=2))
    path = tmp_path / "m.qftq"
    export_quantized(lowered, path)
    size = path.stat().st_size
    assert size == predicted_quantized_size(lowered)
    payload = 0
    for layer in lowered.layers:
        if isinstance(layer, QuantizedLinearRecord):
            payload += layer.q_weights.size * 1 + layer.q_bias.size * 4
        else:
            payload += 4 * (layer.weight.size + layer.bias.size)
    payload += sum(4 * (g.size + b.size) for g, b in lowered.norms.values())
    overhead = size - payload
    assert 0 < overhead < 4096


def test_import_role_mismatch(tmp_path):
    lowered = lower_model(calibrated_qat_model(bits=8))
    lowered.layers[-2].role = cross_attn(0, "q")
    path = tmp_path / "m.qftq"
    export_quantized(lowered, path)
    with pytest.raises(StructureError):
        import_quantized(path)


def test_metrics_csv(tmp_path):
    path = tmp_path / "metrics.csv"
    append_metrics(path, EpochRecord(1, "train", 0.123456789, 1.5))
    append_metrics(path, EpochRecord(2, "val", 12345.678, 0.25))
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    rows = list(csv.reader(lines))
    assert rows[0] == ["epoch", "split", "mse", "seconds"]
    assert rows[1][:3] == ["1", "train", "0.123457"]
    assert rows[2][2] == "12345.7"


def test_dump_text(tmp_path):
    model = calibrated_qat_model(bits=8)
    save_checkpoint(model, tmp_path / "m.qfts")
    export_quantized(lower_model(model), tmp_path / "m.qftq")
    assert "observer" in dump_text(tmp_path / "m.qfts")
    text = dump_text(tmp_path / "m.qftq")
    assert "int " in text and "float" in text
