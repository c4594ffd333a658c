"""Encoder-decoder transformer for 48-in / 24-out univariate forecasting.

The decoder is generative: it receives the last ``token_len`` known points
followed by ``M`` zero placeholders and emits every horizon step in one pass.
Each linear layer is addressed by its :class:`~qatts.roles.LayerRole`.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .quant import LinearQuantizer, QuantPolicy
from .roles import (
    DECODER_INPUT,
    ENCODER_INPUT,
    OUTPUT_PROJECTION,
    LayerRole,
    cross_attn,
    enumerate_roles,
    feed_forward,
    self_attn,
)


@dataclass
class ModelConfig:
    n: int = 48
    m: int = 24
    token_len: int = 24
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("n", "m", "d_model", "n_heads", "d_ff", "enc_layers", "dec_layers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for sinusoidal position encoding")
        if not 0 <= self.token_len <= self.n:
            raise ConfigError("token_len must lie in [0, N]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def param_count(self) -> int:
        """Closed-form parameter count."""
        d, f = self.d_model, self.d_ff
        attn = 4 * (d * d + d)
        ff = (d * f + f) + (f * d + d)
        enc = self.enc_layers * (attn + ff + 2 * 2 * d)
        dec = self.dec_layers * (2 * attn + ff + 3 * 2 * d)
        return 2 * (2 * d) + enc + dec + (d + 1)


def positional_encoding(length: int, d_model: int) -> np.ndarray:
    if d_model % 2:
        raise ValueError("positional encoding needs an even d_model")
    pos = np.arange(length, dtype=np.float64)[:, None]
    div = np.power(10000.0, np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.zeros((length, d_model))
    pe[:, 0::2] = np.sin(pos / div)
    pe[:, 1::2] = np.cos(pos / div)
    return pe.astype(np.float32)


def build_decoder_input(history: np.ndarray, token_len: int, m: int) -> np.ndarray:
    """Last ``token_len`` history points followed by ``m`` zeros, along the last axis."""
    history = np.asarray(history, dtype=np.float32)
    if token_len > history.shape[-1]:
        raise ValueError(f"token_len {token_len} exceeds history length {history.shape[-1]}")
    start = history[..., history.shape[-1] - token_len :]
    return np.concatenate([start, np.zeros(history.shape[:-1] + (m,), np.float32)], axis=-1)


def causal_mask(length: int) -> np.ndarray:
    """True where attention is forbidden (future positions)."""
    return np.triu(np.ones((length, length), dtype=bool), k=1)


class Linear:
    def __init__(self, role: LayerRole, d_in: int, d_out: int, rng: np.random.Generator):
        limit = math.sqrt(6.0 / (d_in + d_out))
        self.role = role
        self.weight = Tensor(rng.uniform(-limit, limit, (d_out, d_in)), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out), requires_grad=True)
        self.quantizer: LinearQuantizer | None = None

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if self.quantizer is not None:
            return self.quantizer(x, self.weight, self.bias, training)
        return ag.matmul(x, ag.transpose(self.weight)) + self.bias


class LayerNorm:
    def __init__(self, d: int):
        self.gamma = Tensor(np.ones(d), requires_grad=True)
        self.beta = Tensor(np.zeros(d), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.gamma, self.beta, 1e-5)


LinearFn = Callable[[LayerRole, Tensor], Tensor]


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    n_heads: int,
    proj: Callable[[str, Tensor], Tensor],
    mask: np.ndarray | None = None,
    keep: dict | None = None,
) -> Tensor:
    """Scaled dot-product attention over ``n_heads`` heads.

    ``proj(which, x)`` applies the Q/K/V/Out projection named ``which``.
    Inputs are ``[..., L, d_model]``; masked positions get -inf scores.
    """
    d_model = q_in.shape[-1]
    if d_model % n_heads:
        raise ShapeError(f"d_model {d_model} not divisible by {n_heads} heads")
    dh = d_model // n_heads
    lq, lk = q_in.shape[-2], kv_in.shape[-2]
    if mask is not None and mask.shape != (lq, lk):
        raise ShapeError(f"mask shape {mask.shape} != ({lq}, {lk})")
    lead = q_in.shape[:-2]

    def heads(x: Tensor, length: int) -> Tensor:
        x = x.reshape(lead + (length, n_heads, dh))
        nd = x.ndim
        return ag.transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))

    q = heads(proj("q", q_in), lq)
    k = heads(proj("k", kv_in), lk)
    v = heads(proj("v", kv_in), lk)
    nd = k.ndim
    scores = ag.matmul(q, ag.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))) * (1.0 / math.sqrt(dh))
    if mask is not None:
        scores = ag.masked_fill(scores, np.broadcast_to(mask, scores.shape), -np.inf)
    weights = ag.softmax(scores, axis=-1)
    if keep is not None:
        keep["weights"] = weights.data
    ctx = ag.matmul(weights, v)
    nd = ctx.ndim
    ctx = ag.transpose(ctx, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)).reshape(lead + (lq, d_model))
    return proj("out", ctx)


class TransformerModel:
    def __init__(self, config: ModelConfig | None = None):
        self.config = cfg = config or ModelConfig()
        rng = np.random.default_rng(cfg.seed)
        self.linears: dict[LayerRole, Linear] = {}
        for role in enumerate_roles(cfg.enc_layers, cfg.dec_layers):
            d_in, d_out = self._dims(role)
            self.linears[role] = Linear(role, d_in, d_out, rng)
        self.norms: dict[str, LayerNorm] = {}
        for i in range(cfg.enc_layers):
            for j in (1, 2):
                self.norms[f"enc.{i}.norm{j}"] = LayerNorm(cfg.d_model)
        for i in range(cfg.dec_layers):
            for j in (1, 2, 3):
                self.norms[f"dec.{i}.norm{j}"] = LayerNorm(cfg.d_model)
        self.training = False
        self.policy: QuantPolicy | None = None
        self._drop_rng = np.random.default_rng(cfg.seed + 1)
        self._enc_pe = positional_encoding(cfg.n, cfg.d_model)
        self._dec_pe = positional_encoding(cfg.token_len + cfg.m, cfg.d_model)

    def _dims(self, role: LayerRole) -> tuple[int, int]:
        d, f = self.config.d_model, self.config.d_ff
        if role in (ENCODER_INPUT, DECODER_INPUT):
            return 1, d
        if role == OUTPUT_PROJECTION:
            return d, 1
        if role.kind == "ff":
            return (d, f) if role.which == "1" else (f, d)
        return d, d

    # parameter bookkeeping

    def roles(self) -> list[LayerRole]:
        return list(self.linears)

    def named_parameters(self) -> Iterator[tuple[str, Tensor, LayerRole | None]]:
        for role, lin in self.linears.items():
            yield f"{role}.weight", lin.weight, role
            yield f"{role}.bias", lin.bias, role
        for name, ln in self.norms.items():
            yield f"{name}.gamma", ln.gamma, None
            yield f"{name}.beta", ln.beta, None

    def parameters(self) -> dict[str, Tensor]:
        return {name: t for name, t, _ in self.named_parameters()}

    def param_count(self) -> int:
        return sum(t.data.size for _, t, _ in self.named_parameters())

    def other_param_count(self) -> int:
        return sum(2 * ln.gamma.data.size for ln in self.norms.values())

    def zero_grad(self) -> None:
        for _, t, _ in self.named_parameters():
            t.grad = None

    def train(self, mode: bool = True) -> TransformerModel:
        self.training = mode
        return self

    def eval(self) -> TransformerModel:
        return self.train(False)

    # quantization hooks

    def enable_qat(self, policy: QuantPolicy) -> None:
        policy.check_roles(self.roles())
        self.policy = policy
        for role, lin in self.linears.items():
            lin.quantizer = LinearQuantizer(policy) if policy.quantizes(role) else None

    def disable_qat(self) -> None:
        self.policy = None
        for lin in self.linears.values():
            lin.quantizer = None

    def freeze_observers(self, frozen: bool = True) -> None:
        for lin in self.linears.values():
            if lin.quantizer is not None:
                lin.quantizer.frozen = frozen

    @property
    def observers_frozen(self) -> bool:
        qs = [lin.quantizer for lin in self.linears.values() if lin.quantizer is not None]
        return all(q.frozen for q in qs)

    # forward

    def linear(self, role: LayerRole, x: Tensor) -> Tensor:
        return self.linears[role](x, self.training)

    def forward(
        self,
        history,
        linear: LinearFn | None = None,
        keep: dict | None = None,
        decoder_input: np.ndarray | None = None,
    ) -> Tensor:
        """Map ``[..., N]`` history to ``[..., M]`` predictions.

        ``linear`` overrides how each role's layer is applied; the integer
        engine uses it to swap in fixed-point records.
        """
        cfg = self.config
        lin = linear or self.linear
        history = history.data if isinstance(history, Tensor) else np.asarray(history, np.float32)
        if history.shape[-1] != cfg.n:
            raise ShapeError(f"expected input length {cfg.n}, got {history.shape[-1]}")
        train = self.training

        def drop(x: Tensor) -> Tensor:
            return ag.dropout(x, cfg.dropout, self._drop_rng, train)

        def attend(stack, layer, kind, q_in, kv_in, mask=None):
            make = (lambda w: cross_attn(layer, w)) if kind == "cross" else (lambda w: self_attn(stack, layer, w))
            return multi_head_attention(q_in, kv_in, cfg.n_heads, lambda w, x: lin(make(w), x), mask)

        def ff(stack, layer, x):
            h = ag.relu(lin(feed_forward(stack, layer, "1"), x))
            return lin(feed_forward(stack, layer, "2"), h)

        x = Tensor(history[..., None])
        h = drop(lin(ENCODER_INPUT, x) + self._enc_pe)
        for i in range(cfg.enc_layers):
            h = self.norms[f"enc.{i}.norm1"](h + drop(attend("enc", i, "self", h, h)))
            h = self.norms[f"enc.{i}.norm2"](h + drop(ff("enc", i, h)))
        memory = h

        dec_in = build_decoder_input(history, cfg.token_len, cfg.m) if decoder_input is None else decoder_input
        g = drop(lin(DECODER_INPUT, Tensor(dec_in[..., None])) + self._dec_pe)
        mask = causal_mask(dec_in.shape[-1])
        for i in range(cfg.dec_layers):
            g = self.norms[f"dec.{i}.norm1"](g + drop(attend("dec", i, "self", g, g, mask)))
            if keep is not None:
                keep[f"dec.{i}.self"] = g.data
            g = self.norms[f"dec.{i}.norm2"](g + drop(attend("dec", i, "cross", g, memory)))
            g = self.norms[f"dec.{i}.norm3"](g + drop(ff("dec", i, g)))
        out = lin(OUTPUT_PROJECTION, g[..., cfg.token_len :, :])
        return out.reshape(out.shape[:-1])

    __call__ = forward

    def predict(self, history) -> np.ndarray:
        with ag.no_grad():
            return self.forward(history).data

