"""Quantizer math, range observers, straight-through fake quantization,
the layer-exemption policy and compression-rate accounting.

All rounding goes through :func:`round_half_away` so the training-time fake
quantization and the integer engine produce identical integers.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

from .autograd import Tensor, apply, as_tensor, matmul, register_gradient, transpose
from .errors import ConfigError, QuantizationOverflowError
from .roles import DECODER_INPUT, ENCODER_INPUT, OUTPUT_PROJECTION, ATTN_PROJ, LayerRole, cross_attn

log = logging.getLogger(__name__)

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1


class Scheme(str, Enum):
    SYMMETRIC = "symmetric"
    ASYMMETRIC = "asymmetric"


def round_half_away(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def grid(bits: int, scheme: Scheme) -> tuple[int, int]:
    """Integer range. The symmetric grid drops -2^(b-1) so that it is closed under negation."""
    if scheme is Scheme.SYMMETRIC:
        top = 2 ** (bits - 1) - 1
        return -top, top
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


@dataclass(frozen=True)
class QParams:
    bits: int
    scale: float
    zero_point: int = 0
    scheme: Scheme = Scheme.SYMMETRIC

    def __post_init__(self):
        if self.bits < 2:
            raise ValueError("bit-width must be at least 2")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        lo, hi = self.qrange
        if self.scheme is Scheme.SYMMETRIC and self.zero_point != 0:
            raise ValueError("symmetric quantization has zero_point 0")
        if not lo <= self.zero_point <= hi:
            raise ValueError(f"zero_point {self.zero_point} outside [{lo}, {hi}]")

    @property
    def qrange(self) -> tuple[int, int]:
        return grid(self.bits, self.scheme)

    @property
    def qmin(self) -> int:
        return self.qrange[0]

    @property
    def qmax(self) -> int:
        return self.qrange[1]


def qparams_symmetric(lo: float, hi: float, bits: int) -> QParams:
    max_abs = max(abs(float(lo)), abs(float(hi)))
    if max_abs == 0.0:
        return QParams(bits, 1.0)
    return QParams(bits, float(np.float32(max_abs / (2 ** (bits - 1) - 1))))


def qparams_asymmetric(lo: float, hi: float, bits: int) -> QParams:
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi == lo:
        return QParams(bits, 1.0, 0, Scheme.ASYMMETRIC)
    qmin, qmax = grid(bits, Scheme.ASYMMETRIC)
    levels = 2**bits - 1
    scale = float(np.float32((hi - lo) / levels))
    # zero-point from the exact ratio, not the float32-rounded scale
    z = int(qmin - round_half_away(lo * levels / (hi - lo)))
    return QParams(bits, scale, min(max(z, qmin), qmax), Scheme.ASYMMETRIC)


def _scaled(x: np.ndarray, p: QParams) -> np.ndarray:
    """round(x/s) + z before clamping, with the division done in x's own precision."""
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float32)
    return round_half_away(x / x.dtype.type(p.scale)) + p.zero_point


def quantize(x, p: QParams) -> np.ndarray:
    return np.clip(_scaled(x, p), p.qmin, p.qmax).astype(np.int64)


def dequantize(q, p: QParams, dtype=np.float32) -> np.ndarray:
    return (np.asarray(q, dtype=np.int64) - p.zero_point).astype(dtype) * dtype(p.scale)


def fake_quant_ste(x: Tensor, p: QParams) -> Tensor:
    """Quantize-dequantize in the forward pass; identity gradient inside the grid, zero outside."""
    x = as_tensor(x)
    raw = _scaled(x.data, p)
    inside = (raw >= p.qmin) & (raw <= p.qmax)
    q = np.clip(raw, p.qmin, p.qmax).astype(np.int64)
    return apply("fake_quant", dequantize(q, p, x.data.dtype.type), (x,), {"inside": inside})


@register_gradient("fake_quant")
def _fake_quant_grad(out, g):
    return (g * out.ctx["inside"],)


# observers


@dataclass
class ObserverState:
    running_min: float = 0.0
    running_max: float = 0.0
    momentum: float = 0.99
    initialized: bool = False
    mode: str = "moving_average"  # or "minmax"


def observe_minmax(x) -> tuple[float, float]:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.size == 0:
        raise ValueError("cannot observe an empty tensor")
    return float(data.min()), float(data.max())


def observe_ema_update(state: ObserverState, x) -> ObserverState:
    lo, hi = observe_minmax(x)
    if not state.initialized or state.mode == "minmax":
        return dataclasses.replace(state, running_min=lo, running_max=hi, initialized=True)
    m = state.momentum
    return dataclasses.replace(
        state,
        running_min=m * state.running_min + (1.0 - m) * lo,
        running_max=m * state.running_max + (1.0 - m) * hi,
    )


# bias and requantization


def scale_product(s_x: float, s_w: float) -> float:
    """s_x * s_w rounded to float32, the single value both execution paths use."""
    return float(np.float32(np.float32(s_x) * np.float32(s_w)))


def quantize_bias(bias, s_x: float, s_w: float) -> tuple[np.ndarray, float]:
    if not (s_x > 0 and s_w > 0):
        raise ValueError("scales must be positive")
    s_b = scale_product(s_x, s_w)
    q = round_half_away(np.asarray(bias, dtype=np.float32) / np.float32(s_b))
    if q.size and (q.min() < INT32_MIN or q.max() > INT32_MAX):
        raise QuantizationOverflowError(
            f"bias needs {np.abs(q).max():.3g} at scale {s_b:.3g}, beyond the 32-bit range"
        )
    return q.astype(np.int64), s_b


def shift_exponent(s_x: float, s_w: float, warn: bool = True) -> int:
    prod = float(s_x) * float(s_w)
    if not prod > 0:
        raise ValueError("scale product must be positive")
    k = int(round_half_away(-math.log2(prod)))
    if warn and (prod > 1.0 or k > 31):
        log.warning("scale product %.3g outside (2^-31, 1]; shift clamped", prod)
    return min(max(k, 0), 31)


def rounding_right_shift(acc, k: int) -> np.ndarray:
    acc = np.asarray(acc, dtype=np.int64)
    if k == 0:
        return acc
    return (acc + (1 << (k - 1))) >> k


# policy


@dataclass
class QuantPolicy:
    """Which linear layers get quantized, and how.

    ``bias_bits`` applies only without scale-product bias quantization: an int
    means biases get their own symmetric Min-Max scale at that width, ``None``
    keeps them as floats.
    """

    weight_bits: int = 2
    input_bits: int = 2
    exempt_roles: frozenset[LayerRole] = field(default_factory=frozenset)
    quantize_inputs: bool = True
    quantize_bias_by_scale_product: bool = True
    shift_approximation: bool = False
    bias_bits: int | None = 32
    ema_momentum: float = 0.99
    shift_frac_bits: int = 31

    def __post_init__(self):
        self.exempt_roles = frozenset(LayerRole.parse(r) if isinstance(r, str) else r for r in self.exempt_roles)
        for name in ("weight_bits", "input_bits"):
            if not 2 <= getattr(self, name) <= 8:
                raise ConfigError(f"{name} must be within [2, 8]")
        if self.bias_bits is not None and not 2 <= self.bias_bits <= 32:
            raise ConfigError("bias_bits must be within [2, 32]")
        if not 0.0 < self.ema_momentum <= 1.0:
            raise ConfigError("ema_momentum must lie in (0, 1]")
        if self.quantize_bias_by_scale_product and not self.quantize_inputs:
            raise ConfigError("scale-product bias quantization needs quantized inputs")
        if self.shift_approximation and not self.quantize_inputs:
            raise ConfigError("shift approximation needs quantized inputs")
        if not 0 <= self.shift_frac_bits <= 31:
            raise ConfigError("shift_frac_bits must be within [0, 31]")

    def quantizes(self, role: LayerRole) -> bool:
        return role not in self.exempt_roles

    def check_roles(self, roles: Iterable[LayerRole]) -> None:
        unknown = self.exempt_roles - set(roles)
        if unknown:
            raise ConfigError(f"exempt roles not present in model: {sorted(map(str, unknown))}")

    @classmethod
    def empty(cls, roles: Iterable[LayerRole]) -> QuantPolicy:
        return cls(exempt_roles=frozenset(roles), quantize_inputs=False, quantize_bias_by_scale_product=False)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["exempt_roles"] = sorted(str(r) for r in self.exempt_roles)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> QuantPolicy:
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown policy fields: {sorted(extra)}")
        return cls(**d)


def default_exempt_roles(dec_layers: int) -> frozenset[LayerRole]:
    last = dec_layers - 1
    return frozenset({OUTPUT_PROJECTION, ENCODER_INPUT, DECODER_INPUT} | {cross_attn(last, w) for w in ATTN_PROJ})


def default_paper_policy(model, bits: int = 2, **flags) -> QuantPolicy:
    """Exempt the output layer, both input embeddings and the final decoder layer's context attention."""
    roles = list(model.roles()) if model is not None else []
    dec_layers = model.config.dec_layers if model is not None else 0
    if not roles or dec_layers < 1:
        raise ConfigError("the default exemption policy needs a model with at least one decoder layer")
    policy = QuantPolicy(weight_bits=bits, input_bits=bits, exempt_roles=default_exempt_roles(dec_layers), **flags)
    policy.check_roles(roles)
    return policy


def stage_policies(model, bits: int = 2) -> dict[str, QuantPolicy]:
    """The three successive configurations: weights only, + input qparams, + scale-product bias."""
    return {
        "weights": default_paper_policy(model, bits, quantize_inputs=False, quantize_bias_by_scale_product=False),
        "weights+inputs": default_paper_policy(model, bits, quantize_inputs=True, quantize_bias_by_scale_product=False),
        "weights+inputs+bias": default_paper_policy(model, bits, quantize_inputs=True, quantize_bias_by_scale_product=True),
    }


# fake-quantized linear


class LinearQuantizer:
    """Fake-quant state of one linear layer: its input observer plus the policy knobs."""

    def __init__(self, policy: QuantPolicy):
        self.policy = policy
        self.observer = ObserverState(momentum=policy.ema_momentum)
        self.frozen = False

    def weight_qparams(self, w) -> QParams:
        return qparams_symmetric(*observe_minmax(w), self.policy.weight_bits)

    def input_qparams(self) -> QParams:
        if not self.observer.initialized:
            raise RuntimeError("input observer has not seen any data")
        return qparams_asymmetric(self.observer.running_min, self.observer.running_max, self.policy.input_bits)

    def bias_qparams(self, b) -> QParams:
        return qparams_symmetric(*observe_minmax(b), self.policy.bias_bits)

    def __call__(self, x: Tensor, weight: Tensor, bias: Tensor, training: bool) -> Tensor:
        pol = self.policy
        sw = self.weight_qparams(weight)
        w = fake_quant_ste(weight, sw)
        if pol.quantize_inputs:
            if training and not self.frozen:
                self.observer = observe_ema_update(self.observer, x)
            sx = self.input_qparams()
            x = fake_quant_ste(x, sx)
        y = matmul(x, transpose(w))
        if pol.quantize_bias_by_scale_product:
            s_b = scale_product(sx.scale, sw.scale)
            y = y + fake_quant_ste(bias, QParams(32, s_b))
            rest = None
        elif pol.bias_bits is not None:
            rest = fake_quant_ste(bias, self.bias_qparams(bias.data))
        else:
            rest = bias
        if pol.shift_approximation:
            k = shift_exponent(sx.scale, sw.scale, warn=False)
            y = y * float(2.0**-k / scale_product(sx.scale, sw.scale))
        return y if rest is None else y + rest


# compression accounting

FLOAT_BITS = 32
CONST_BITS = 32


@dataclass
class LayerInventory:
    role: LayerRole | str
    weight_count: int
    bias_count: int


@dataclass
class CompressionRow:
    name: str
    quantized: bool
    params: int
    fp_bits: int
    quant_bits: int
    constants: int = 0


@dataclass
class CompressionReport:
    fp_bits_total: int
    quant_bits_total: int
    rows: list[CompressionRow]

    @property
    def ratio(self) -> float:
        return self.fp_bits_total / self.quant_bits_total

    def exempt(self) -> list[str]:
        return [r.name for r in self.rows if not r.quantized and r.name != "other"]

    def table(self) -> str:
        lines = [f"{'layer':<24} {'quant':>5} {'params':>8} {'fp_bits':>10} {'q_bits':>10} {'consts':>6}"]
        for r in self.rows:
            lines.append(
                f"{r.name:<24} {'yes' if r.quantized else 'no':>5} {r.params:>8} {r.fp_bits:>10} {r.quant_bits:>10} {r.constants:>6}"
            )
        lines.append(f"total fp bits {self.fp_bits_total}, quantized bits {self.quant_bits_total}, ratio {self.ratio:.5f}x")
        return "\n".join(lines)


def layer_bits(inv: LayerInventory, policy: QuantPolicy) -> CompressionRow:
    params = inv.weight_count + inv.bias_count
    fp = FLOAT_BITS * params
    role = LayerRole.parse(inv.role) if isinstance(inv.role, str) else inv.role
    if not policy.quantizes(role):
        return CompressionRow(str(role), False, params, fp, fp)
    consts = 1  # weight scale
    bits = inv.weight_count * policy.weight_bits
    if policy.quantize_inputs:
        consts += 2  # input scale, zero-point
    if policy.quantize_bias_by_scale_product:
        bits += inv.bias_count * 32  # int32, scale derived from s_x*s_w
    elif policy.bias_bits is not None:
        bits += inv.bias_count * policy.bias_bits
        consts += 1
    else:
        bits += inv.bias_count * FLOAT_BITS
    if policy.shift_approximation:
        consts += 1
    return CompressionRow(str(role), True, params, fp, bits + consts * CONST_BITS, consts)


def compression_report(layers: Iterable[LayerInventory], policy: QuantPolicy, other_params: int = 0) -> CompressionReport:
    rows = [layer_bits(inv, policy) for inv in layers]
    if other_params:
        rows.append(CompressionRow("other", False, other_params, FLOAT_BITS * other_params, FLOAT_BITS * other_params))
    return CompressionReport(sum(r.fp_bits for r in rows), sum(r.quant_bits for r in rows), rows)


def compression_rate(model, policy: QuantPolicy) -> CompressionReport:
    """Bits at full precision over bits after quantization, stored constants included."""
    policy.check_roles(model.roles())
    layers = [LayerInventory(r, lin.weight.data.size, lin.bias.data.size) for r, lin in model.linears.items()]
    return compression_report(layers, policy, model.other_param_count())
