"""On-disk formats: float checkpoints (``QFTS``), quantized exports (``QFTQ``)
and the metrics CSV.

Binary layout is fixed little-endian with explicit widths:

    magic[4] version:u32 config:json
    ...section payloads (see the writers below)

Strings are ``u16 length + utf-8``, JSON blobs ``u32 length + utf-8``.
Quantized weights sit in one signed byte each regardless of their logical
bit-width; the compression report counts logical bits instead.
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autograd import OptimizerState
from .errors import CorruptFileError, FormatError, StructureError, VersionError
from .intinfer import (
    BIAS_FLOAT,
    BIAS_OWN,
    BIAS_PRODUCT,
    EXACT,
    SHIFT,
    FloatLinear,
    LoweredModel,
    QuantizedLinearRecord,
)
from .model import ModelConfig, TransformerModel
from .quant import ObserverState, QuantPolicy
from .roles import LayerRole, enumerate_roles

CHECKPOINT_MAGIC = b"QFTS"
QUANTIZED_MAGIC = b"QFTQ"
CHECKPOINT_VERSION = 1
QUANTIZED_VERSION = 1

_REQUANT = {EXACT: 0, SHIFT: 1}
_BIAS = {BIAS_PRODUCT: 0, BIAS_OWN: 1, BIAS_FLOAT: 2}

# per-record fixed header after the role string: see _write_record
QRECORD_FIXED = struct.calcsize("<BBBffiBBBBfII")
FRECORD_FIXED = struct.calcsize("<BII")


class _Writer:
    def __init__(self):
        self.buf = bytearray()

    def pack(self, fmt: str, *vals) -> None:
        self.buf += struct.pack("<" + fmt, *vals)

    def string(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.pack("H", len(raw))
        self.buf += raw

    def blob(self, obj) -> None:
        raw = json.dumps(obj, sort_keys=True).encode("utf-8")
        self.pack("I", len(raw))
        self.buf += raw

    def array(self, a: np.ndarray, dtype: str) -> None:
        self.buf += np.ascontiguousarray(a, dtype=np.dtype(dtype).newbyteorder("<")).tobytes()


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptFileError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals if len(vals) > 1 else vals[0]

    def string(self) -> str:
        return self.take(self.unpack("H")).decode("utf-8")

    def blob(self):
        try:
            return json.loads(self.take(self.unpack("I")).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CorruptFileError(f"{self.path}: bad JSON block: {exc}") from None

    def array(self, dtype: str, shape) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(n * dt.itemsize), dtype=dt).astype(np.dtype(dtype)).reshape(shape)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise CorruptFileError(f"{self.path}: {len(self.data) - self.pos} trailing bytes")


def _open(path, magic: bytes, version: int) -> _Reader:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    if len(data) < 4 or data[:4] != magic:
        raise FormatError(f"{path}: not a {magic.decode()} file")
    r.take(4)
    found = r.unpack("I")
    if found != version:
        raise VersionError(f"{path}: format version {found}, expected {version}")
    return r


# checkpoints


@dataclass
class Checkpoint:
    model: TransformerModel
    optimizer: OptimizerState | None = None
    meta: dict = field(default_factory=dict)
    seed: int = 0
    rng_state: dict | None = None


def save_checkpoint(
    model: TransformerModel,
    path,
    optimizer: OptimizerState | None = None,
    meta: dict | None = None,
    seed: int = 0,
    rng_state: dict | None = None,
) -> None:
    w = _Writer()
    w.buf += CHECKPOINT_MAGIC
    w.pack("I", CHECKPOINT_VERSION)
    w.blob({"model": model.config.to_dict(), "meta": meta or {}})
    params = list(model.named_parameters())
    w.pack("I", len(params))
    for name, t, role in params:
        w.string(name)
        w.string("" if role is None else str(role))
        w.pack("B", t.data.ndim)
        for dim in t.data.shape:
            w.pack("I", dim)
        w.array(t.data, "f4")
    w.pack("B", optimizer is not None)
    if optimizer is not None:
        w.pack("ddddQ", optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps, optimizer.step)
        for name, t, _ in params:
            zeros = np.zeros_like(t.data)
            w.array(optimizer.m.get(name, zeros), "f4")
            w.array(optimizer.v.get(name, zeros), "f4")
    w.pack("B", model.policy is not None)
    if model.policy is not None:
        w.blob(model.policy.to_dict())
        quantized = [(r, lin.quantizer) for r, lin in model.linears.items() if lin.quantizer is not None]
        w.pack("I", len(quantized))
        for role, q in quantized:
            o = q.observer
            w.string(str(role))
            w.pack("dddBB", o.running_min, o.running_max, o.momentum, o.initialized, q.frozen)
    w.pack("Q", seed)
    w.blob(rng_state)
    Path(path).write_bytes(bytes(w.buf))


def read_checkpoint(path) -> Checkpoint:
    r = _open(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    header = r.blob()
    try:
        model = TransformerModel(ModelConfig(**header["model"]))
    except (KeyError, TypeError) as exc:
        raise CorruptFileError(f"{path}: bad config record: {exc}") from None
    expected = {name: (t, role) for name, t, role in model.named_parameters()}
    count = r.unpack("I")
    names = []
    for _ in range(count):
        name, role = r.string(), r.string()
        ndim = r.unpack("B")
        shape = tuple(r.unpack("I") for _ in range(ndim))
        values = r.array("f4", shape)
        if name not in expected:
            raise StructureError(f"{path}: unexpected parameter {name!r}")
        t, want_role = expected[name]
        if role != ("" if want_role is None else str(want_role)) or shape != t.shape:
            raise StructureError(f"{path}: parameter {name!r} role/shape mismatch")
        t.data = values.copy()
        names.append(name)
    if set(names) != set(expected):
        raise StructureError(f"{path}: parameter table incomplete")
    optimizer = None
    if r.unpack("B"):
        lr, b1, b2, eps, step = r.unpack("ddddQ")
        optimizer = OptimizerState(lr, b1, b2, eps, step)
        for name in names:
            shape = expected[name][0].shape
            optimizer.m[name] = r.array("f4", shape).copy()
            optimizer.v[name] = r.array("f4", shape).copy()
    if r.unpack("B"):
        policy = QuantPolicy.from_dict(r.blob())
        model.enable_qat(policy)
        for _ in range(r.unpack("I")):
            role = LayerRole.parse(r.string())
            lo, hi, mom, init, frozen = r.unpack("dddBB")
            q = model.linears[role].quantizer
            if q is None:
                raise StructureError(f"{path}: observer for unquantized layer {role}")
            q.observer = ObserverState(lo, hi, mom, bool(init))
            q.frozen = bool(frozen)
    seed = r.unpack("Q")
    rng_state = r.blob()
    r.finish()
    return Checkpoint(model, optimizer, header.get("meta", {}), seed, rng_state)


def load_checkpoint(path) -> TransformerModel:
    return read_checkpoint(path).model


# quantized export


def _write_record(w: _Writer, rec: QuantizedLinearRecord) -> None:
    out_f, in_f = rec.q_weights.shape
    w.pack(
        "BBBffiBBBBfII",
        1,
        rec.b_w,
        rec.b_x,
        rec.s_w,
        rec.s_x,
        rec.z_x,
        _REQUANT[rec.requant],
        rec.shift,
        rec.frac_bits,
        _BIAS[rec.bias_mode],
        rec.bias_scale,
        out_f,
        in_f,
    )
    w.array(rec.q_weights, "i1")
    w.array(rec.q_bias, "f4" if rec.bias_mode == BIAS_FLOAT else "i4")


def export_quantized(lowered: LoweredModel, path) -> None:
    w = _Writer()
    w.buf += QUANTIZED_MAGIC
    w.pack("I", QUANTIZED_VERSION)
    w.blob({"model": lowered.config.to_dict(), "meta": lowered.meta})
    w.blob(lowered.policy.to_dict())
    w.pack("I", len(lowered.layers))
    for layer in lowered.layers:
        w.string(str(layer.role))
        if isinstance(layer, QuantizedLinearRecord):
            _write_record(w, layer)
        else:
            out_f, in_f = layer.weight.shape
            w.pack("BII", 0, out_f, in_f)
            w.array(layer.weight, "f4")
            w.array(layer.bias, "f4")
    w.pack("I", len(lowered.norms))
    for name, (gamma, beta) in lowered.norms.items():
        w.string(name)
        w.pack("I", gamma.size)
        w.array(gamma, "f4")
        w.array(beta, "f4")
    Path(path).write_bytes(bytes(w.buf))


def import_quantized(path) -> LoweredModel:
    r = _open(path, QUANTIZED_MAGIC, QUANTIZED_VERSION)
    header = r.blob()
    try:
        config = ModelConfig(**header["model"])
    except (KeyError, TypeError) as exc:
        raise CorruptFileError(f"{path}: bad config record: {exc}") from None
    policy = QuantPolicy.from_dict(r.blob())
    expected = enumerate_roles(config.enc_layers, config.dec_layers)
    n_layers = r.unpack("I")
    if n_layers != len(expected):
        raise StructureError(f"{path}: {n_layers} layers, configuration implies {len(expected)}")
    layers: list = []
    inv_req = {v: k for k, v in _REQUANT.items()}
    inv_bias = {v: k for k, v in _BIAS.items()}
    for want in expected:
        try:
            role = LayerRole.parse(r.string())
        except ValueError as exc:
            raise StructureError(f"{path}: {exc}") from None
        if role != want:
            raise StructureError(f"{path}: layer {role} found where {want} expected")
        kind = r.unpack("B")
        if kind == 0:
            out_f, in_f = r.unpack("II")
            layers.append(FloatLinear(role, r.array("f4", (out_f, in_f)).copy(), r.array("f4", (out_f,)).copy()))
        elif kind == 1:
            b_w, b_x, s_w, s_x, z_x, req, k, frac, bmode, bscale, out_f, in_f = r.unpack("BBffiBBBBfII")
            q_w = r.array("i1", (out_f, in_f)).copy()
            mode = inv_bias.get(bmode)
            if mode is None or req not in inv_req:
                raise CorruptFileError(f"{path}: bad record flags for {role}")
            q_b = r.array("f4" if mode == BIAS_FLOAT else "i4", (out_f,)).copy()
            layers.append(
                QuantizedLinearRecord(role, q_w, q_b, s_w, s_x, z_x, b_w, b_x, inv_req[req], k, mode, bscale, frac)
            )
        else:
            raise CorruptFileError(f"{path}: unknown layer kind {kind}")
        if policy.quantizes(role) != (kind == 1):
            raise StructureError(f"{path}: layer {role} disagrees with the stored policy")
    norms = {}
    for _ in range(r.unpack("I")):
        name = r.string()
        d = r.unpack("I")
        norms[name] = (r.array("f4", (d,)).copy(), r.array("f4", (d,)).copy())
    r.finish()
    return LoweredModel(config, policy, layers, norms, header.get("meta", {}))


def predicted_quantized_size(lowered: LoweredModel) -> int:
    """File size implied by the layer table alone."""
    def blob(obj) -> int:
        return 4 + len(json.dumps(obj, sort_keys=True).encode("utf-8"))

    size = 8 + blob({"model": lowered.config.to_dict(), "meta": lowered.meta}) + blob(lowered.policy.to_dict()) + 4
    for layer in lowered.layers:
        size += 2 + len(str(layer.role).encode("utf-8"))
        if isinstance(layer, QuantizedLinearRecord):
            size += QRECORD_FIXED + layer.q_weights.size + 4 * layer.q_bias.size
        else:
            size += FRECORD_FIXED + 4 * (layer.weight.size + layer.bias.size)
    size += 4
    for name, (gamma, beta) in lowered.norms.items():
        size += 2 + len(name.encode("utf-8")) + 4 + 4 * (gamma.size + beta.size)
    return size


# metrics

METRICS_HEADER = ["epoch", "split", "mse", "seconds"]


def append_metrics(path, record) -> None:
    """Append one row; the header is written when the file is created. Single writer per file."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(METRICS_HEADER)
        writer.writerow([record.epoch, record.split, f"{record.mse:.6g}", f"{record.seconds:.3f}"])


def dump_text(path) -> str:
    """Human-readable summary of a checkpoint or quantized model file."""
    magic = Path(path).read_bytes()[:4]
    lines = [f"file: {path}"]
    if magic == CHECKPOINT_MAGIC:
        ck = read_checkpoint(path)
        lines.append(f"checkpoint v{CHECKPOINT_VERSION}, config {ck.model.config.to_dict()}")
        for name, t, _ in ck.model.named_parameters():
            lines.append(f"  {name:<32} {str(t.shape):<12} mean {float(t.data.mean()):+.5f}")
        if ck.model.policy is not None:
            lines.append(f"policy {ck.model.policy.to_dict()}")
            for role, lin in ck.model.linears.items():
                if lin.quantizer is not None:
                    o = lin.quantizer.observer
                    lines.append(f"  observer {str(role):<24} [{o.running_min:+.5f}, {o.running_max:+.5f}] frozen={lin.quantizer.frozen}")
    elif magic == QUANTIZED_MAGIC:
        low = import_quantized(path)
        lines.append(f"quantized v{QUANTIZED_VERSION}, config {low.config.to_dict()}")
        for layer in low.layers:
            if isinstance(layer, QuantizedLinearRecord):
                lines.append(
                    f"  int   {str(layer.role):<24} w{layer.b_w}/x{layer.b_x} s_w={layer.s_w:.6g} s_x={layer.s_x:.6g} "
                    f"z_x={layer.z_x} k={layer.shift} bias={layer.bias_mode} {layer.requant}"
                )
            else:
                lines.append(f"  float {str(layer.role):<24} {layer.weight.shape}")
    else:
        raise FormatError(f"{path}: unrecognized file magic {magic!r}")
    return "\n".join(lines)
