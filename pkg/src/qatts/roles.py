"""Role tags that uniquely name every linear layer of the transformer.

Roles serialize to short dotted strings (``dec.1.cross_attn.q``) which are
what configs, policies and file headers carry.
"""

from __future__ import annotations

from dataclasses import dataclass

ATTN_PROJ = ("q", "k", "v", "out")
FF_PROJ = ("1", "2")

_SINGLETONS = {"encoder_input", "decoder_input", "output_projection"}
_BLOCK_KINDS = {"self_attn": ATTN_PROJ, "cross_attn": ATTN_PROJ, "ff": FF_PROJ}


@dataclass(frozen=True, order=True)
class LayerRole:
    kind: str
    stack: str | None = None
    layer: int | None = None
    which: str | None = None

    def __post_init__(self):
        if self.kind in _SINGLETONS:
            if (self.stack, self.layer, self.which) != (None, None, None):
                raise ValueError(f"role {self.kind} takes no stack/layer/which")
            return
        if self.kind not in _BLOCK_KINDS:
            raise ValueError(f"unknown role kind {self.kind!r}")
        if self.stack not in ("enc", "dec") or self.layer is None or self.layer < 0:
            raise ValueError(f"bad stack/layer for role {self.kind}")
        if self.kind == "cross_attn" and self.stack != "dec":
            raise ValueError("cross attention exists only in the decoder")
        if self.which not in _BLOCK_KINDS[self.kind]:
            raise ValueError(f"bad projection {self.which!r} for {self.kind}")

    def __str__(self) -> str:
        if self.kind in _SINGLETONS:
            return self.kind
        return f"{self.stack}.{self.layer}.{self.kind}.{self.which}"

    @classmethod
    def parse(cls, text: str) -> LayerRole:
        text = text.strip()
        if text in _SINGLETONS:
            return cls(text)
        try:
            stack, layer, kind, which = text.split(".")
            return cls(kind, stack, int(layer), which)
        except ValueError:
            raise ValueError(f"cannot parse layer role {text!r}") from None


ENCODER_INPUT = LayerRole("encoder_input")
DECODER_INPUT = LayerRole("decoder_input")
OUTPUT_PROJECTION = LayerRole("output_projection")


def self_attn(stack: str, layer: int, which: str) -> LayerRole:
    return LayerRole("self_attn", stack, layer, which)


def cross_attn(layer: int, which: str) -> LayerRole:
    return LayerRole("cross_attn", "dec", layer, which)


def feed_forward(stack: str, layer: int, which: str) -> LayerRole:
    return LayerRole("ff", stack, layer, which)


def enumerate_roles(enc_layers: int, dec_layers: int) -> list[LayerRole]:
    """All linear roles in forward-execution order."""
    roles = [ENCODER_INPUT]
    for i in range(enc_layers):
        roles += [self_attn("enc", i, w) for w in ATTN_PROJ]
        roles += [feed_forward("enc", i, w) for w in FF_PROJ]
    roles.append(DECODER_INPUT)
    for i in range(dec_layers):
        roles += [self_attn("dec", i, w) for w in ATTN_PROJ]
        roles += [cross_attn(i, w) for w in ATTN_PROJ]
        roles += [feed_forward("dec", i, w) for w in FF_PROJ]
    roles.append(OUTPUT_PROJECTION)
    return roles
