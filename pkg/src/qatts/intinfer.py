"""Fixed-point execution of the quantized linear layers.

A QAT model is lowered into :class:`QuantizedLinearRecord` objects (integer
weights, int32 bias, scales, zero-point, optional shift). The records run
with integer matmuls and a 32-bit accumulator; everything else (attention
arithmetic, softmax, layer norm, exempt linears) stays in float32.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import LoweringError, QuantizationOverflowError, ShapeError
from .model import ModelConfig, TransformerModel
from .quant import (
    INT32_MAX,
    INT32_MIN,
    CompressionReport,
    LayerInventory,
    QParams,
    QuantPolicy,
    Scheme,
    compression_report,
    dequantize,
    grid,
    observe_minmax,
    qparams_symmetric,
    quantize,
    quantize_bias,
    rounding_right_shift,
    scale_product,
    shift_exponent,
)
from .roles import LayerRole, enumerate_roles

EXACT = "exact"
SHIFT = "shift"

BIAS_PRODUCT = "product"  # int32 at s_x*s_w, added inside the accumulator
BIAS_OWN = "own"  # own symmetric scale, added after requantization
BIAS_FLOAT = "float"


@dataclass
class QuantizedLinearRecord:
    role: LayerRole
    q_weights: np.ndarray  # int8 container, [out, in]
    q_bias: np.ndarray  # int32 (or float32 when bias_mode == "float")
    s_w: float
    s_x: float
    z_x: int
    b_w: int
    b_x: int
    requant: str = EXACT
    shift: int = 0
    bias_mode: str = BIAS_PRODUCT
    bias_scale: float = 0.0
    frac_bits: int = 31  # fractional bits kept by the shift path; 31 keeps every k exact

    def __post_init__(self):
        lo, hi = grid(self.b_w, Scheme.SYMMETRIC)
        if self.q_weights.size and (self.q_weights.min() < lo or self.q_weights.max() > hi):
            raise ValueError(f"{self.role}: weights outside the {self.b_w}-bit symmetric grid")
        lo, hi = grid(self.b_x, Scheme.ASYMMETRIC)
        if not lo <= self.z_x <= hi:
            raise ValueError(f"{self.role}: zero-point {self.z_x} outside the {self.b_x}-bit grid")
        if not 0 <= self.shift <= 31:
            raise ValueError("shift must be within [0, 31]")
        if self.requant not in (EXACT, SHIFT) or self.bias_mode not in (BIAS_PRODUCT, BIAS_OWN, BIAS_FLOAT):
            raise ValueError("bad requant or bias mode")

    @property
    def input_qparams(self) -> QParams:
        return QParams(self.b_x, self.s_x, self.z_x, Scheme.ASYMMETRIC)

    @property
    def weight_qparams(self) -> QParams:
        return QParams(self.b_w, self.s_w)

    @property
    def out_features(self) -> int:
        return self.q_weights.shape[0]

    @property
    def in_features(self) -> int:
        return self.q_weights.shape[1]


@dataclass
class FloatLinear:
    role: LayerRole
    weight: np.ndarray
    bias: np.ndarray

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (np.matmul(x, self.weight.T) + self.bias).astype(np.float32)


def _accumulate(q_w: np.ndarray, xc: np.ndarray) -> np.ndarray:
    """Integer dot products with a 32-bit accumulator; overflow of any partial sum is an error."""
    q_w = q_w.astype(np.int64)
    acc = np.matmul(xc, q_w.T)
    bound = np.matmul(np.abs(xc), np.abs(q_w).T)
    if bound.size and bound.max() > INT32_MAX:
        partial = np.cumsum(xc[..., None, :] * q_w, axis=-1)  # j ascending
        if partial.min() < INT32_MIN or partial.max() > INT32_MAX:
            raise QuantizationOverflowError("32-bit accumulator overflow in integer linear layer")
    return acc


def int_linear_forward(record: QuantizedLinearRecord, x) -> np.ndarray:
    """Quantize ``x``, run the integer matmul, requantize and return float32."""
    x = np.asarray(x, dtype=np.float32)
    if x.shape[-1] != record.in_features:
        raise ShapeError(f"{record.role}: input width {x.shape[-1]} != {record.in_features}")
    q_x = quantize(x, record.input_qparams)
    acc = _accumulate(record.q_weights, q_x - record.z_x)
    if record.bias_mode == BIAS_PRODUCT:
        acc = acc + record.q_bias.astype(np.int64)
        if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
            raise QuantizationOverflowError(f"{record.role}: accumulator overflow after bias")
    return requantize(record, acc)


def requantize(record: QuantizedLinearRecord, acc: np.ndarray) -> np.ndarray:
    if record.requant == EXACT:
        out = acc.astype(np.float32) * np.float32(scale_product(record.s_x, record.s_w))
    else:
        f = record.frac_bits
        fixed = rounding_right_shift(acc.astype(np.int64) << f, record.shift)
        out = fixed.astype(np.float32) * np.float32(2.0**-f)
    if record.bias_mode == BIAS_OWN:
        out = out + dequantize(record.q_bias, QParams(32, record.bias_scale))
    elif record.bias_mode == BIAS_FLOAT:
        out = out + record.q_bias.astype(np.float32)
    return out.astype(np.float32)


@dataclass
class LoweredModel:
    config: ModelConfig
    policy: QuantPolicy
    layers: list[QuantizedLinearRecord | FloatLinear]
    norms: dict[str, tuple[np.ndarray, np.ndarray]]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self._by_role = {layer.role: layer for layer in self.layers}
        self._shell: TransformerModel | None = None

    def records(self) -> list[QuantizedLinearRecord]:
        return [layer for layer in self.layers if isinstance(layer, QuantizedLinearRecord)]

    def float_linears(self) -> list[FloatLinear]:
        return [layer for layer in self.layers if isinstance(layer, FloatLinear)]

    def layer(self, role: LayerRole):
        return self._by_role[role]

    def apply_layer(self, role: LayerRole, x: np.ndarray) -> np.ndarray:
        layer = self._by_role[role]
        if isinstance(layer, QuantizedLinearRecord):
            return int_linear_forward(layer, x)
        return layer(x)

    def compression(self) -> CompressionReport:
        """Compression report recomputed from the layer headers alone."""
        inv = []
        for layer in self.layers:
            w = layer.q_weights if isinstance(layer, QuantizedLinearRecord) else layer.weight
            b = layer.q_bias if isinstance(layer, QuantizedLinearRecord) else layer.bias
            inv.append(LayerInventory(layer.role, w.size, b.size))
        other = sum(g.size + b.size for g, b in self.norms.values())
        return compression_report(inv, self.policy, other)

    def _model_shell(self) -> TransformerModel:
        if self._shell is None:
            shell = TransformerModel(self.config)
            for name, (gamma, beta) in self.norms.items():
                shell.norms[name].gamma.data = gamma
                shell.norms[name].beta.data = beta
            self._shell = shell.eval()
        return self._shell

    def forward(self, history) -> np.ndarray:
        def lin(role: LayerRole, x: Tensor) -> Tensor:
            return Tensor(self.apply_layer(role, x.data))

        with ag.no_grad():
            return self._model_shell().forward(history, linear=lin).data

    __call__ = forward


def lower_model(model: TransformerModel, policy: QuantPolicy | None = None, requant: str | None = None) -> LoweredModel:
    """Turn every non-exempt linear of a QAT model into an integer record."""
    policy = policy or model.policy
    if policy is None:
        raise LoweringError("model has no quantization policy; run QAT first")
    roles = model.roles()
    if roles != enumerate_roles(model.config.enc_layers, model.config.dec_layers):
        raise LoweringError("model roles do not match its configuration")
    policy.check_roles(roles)
    quantized = [r for r in roles if policy.quantizes(r)]
    if quantized:
        if model.policy is None or model.policy.to_dict() != policy.to_dict():
            raise LoweringError("policy differs from the one the model was trained with")
        if not policy.quantize_inputs:
            raise LoweringError("integer execution needs quantized layer inputs (quantize_inputs)")
    if requant is None:
        requant = SHIFT if policy.shift_approximation else EXACT
    layers: list[QuantizedLinearRecord | FloatLinear] = []
    for role in roles:
        lin = model.linears[role]
        if not policy.quantizes(role):
            layers.append(FloatLinear(role, lin.weight.data.copy(), lin.bias.data.copy()))
            continue
        q = lin.quantizer
        if q is None or not q.frozen or not q.observer.initialized:
            raise LoweringError(f"{role}: input observer not frozen; finish QAT before lowering")
        sw = q.weight_qparams(lin.weight.data)
        sx = q.input_qparams()
        q_w = quantize(lin.weight.data, sw).astype(np.int8)
        bias_scale = 0.0
        if policy.quantize_bias_by_scale_product:
            mode = BIAS_PRODUCT
            q_b, _ = quantize_bias(lin.bias.data, sx.scale, sw.scale)
            q_b = q_b.astype(np.int32)
        elif policy.bias_bits is not None:
            mode = BIAS_OWN
            bq = qparams_symmetric(*observe_minmax(lin.bias.data), policy.bias_bits)
            q_b, bias_scale = quantize(lin.bias.data, bq).astype(np.int32), bq.scale
        else:
            mode = BIAS_FLOAT
            q_b = lin.bias.data.astype(np.float32).copy()
        layers.append(
            QuantizedLinearRecord(
                role=role,
                q_weights=q_w,
                q_bias=q_b,
                s_w=sw.scale,
                s_x=sx.scale,
                z_x=sx.zero_point,
                b_w=policy.weight_bits,
                b_x=policy.input_bits,
                requant=requant,
                shift=shift_exponent(sx.scale, sw.scale),
                bias_mode=mode,
                bias_scale=bias_scale,
                frac_bits=policy.shift_frac_bits,
            )
        )
    norms = {name: (ln.gamma.data.copy(), ln.beta.data.copy()) for name, ln in model.norms.items()}
    return LoweredModel(model.config, policy, layers, norms)


@dataclass
class EquivalenceReport:
    requant: str
    max_abs_diff: float
    per_layer: dict[str, float]
    tolerance: float

    @property
    def max_layer_diff(self) -> float:
        return max(self.per_layer.values(), default=0.0)

    @property
    def passed(self) -> bool | None:
        """None when the shift path is active: drift is reported, not bounded."""
        if self.requant != EXACT:
            return None
        return self.max_layer_diff < self.tolerance

    def summary(self) -> str:
        verdict = {True: "PASS", False: "FAIL", None: "report-only"}[self.passed]
        return (
            f"equivalence ({self.requant}): max per-layer diff {self.max_layer_diff:.3e}, "
            f"end-to-end diff {self.max_abs_diff:.3e}, tolerance {self.tolerance:g} -> {verdict}"
        )


def equivalence_check(
    model: TransformerModel,
    lowered: LoweredModel,
    n_samples: int = 100,
    tolerance: float = 1e-4,
    seed: int = 0,
    inputs: np.ndarray | None = None,
    chunk: int = 100,
) -> EquivalenceReport:
    """Compare the fake-quant float path with the fixed-point path.

    Each integer layer is fed exactly the input its fake-quant twin saw, so
    per-layer diffs isolate arithmetic differences from upstream drift.
    """
    if [layer.role for layer in lowered.layers] != model.roles():
        raise LoweringError("lowered model does not match the source model's layers")
    if inputs is None:
        inputs = np.random.default_rng(seed).standard_normal((n_samples, model.config.n)).astype(np.float32)
    records = {r.role: r for r in lowered.records()}
    per_layer = {str(r): 0.0 for r in records}
    end_to_end = 0.0
    model.eval()
    for i in range(0, len(inputs), chunk):
        batch = inputs[i : i + chunk]

        def recording(role: LayerRole, x: Tensor) -> Tensor:
            y = model.linear(role, x)
            if role in records:
                d = np.abs(int_linear_forward(records[role], x.data) - y.data).max()
                per_layer[str(role)] = max(per_layer[str(role)], float(d))
            return y

        with ag.no_grad():
            ref = model.forward(batch, linear=recording).data
        end_to_end = max(end_to_end, float(np.abs(lowered.forward(batch) - ref).max()))
    requant = records and next(iter(records.values())).requant or EXACT
    return EquivalenceReport(requant, end_to_end, per_layer, tolerance)
