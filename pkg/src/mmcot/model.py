"""Toy encoder-decoder with the fusion block between encoding and decoding.

Deliberately small: learned token + positional embeddings, one
self-attention encoder layer with a feed-forward sublayer, the gated
multi-hop fusion block onto frozen image features, and one decoder
layer (causal self-attention, cross-attention onto the fused states,
feed-forward) followed by the output projection. Residual connections,
no normalization layers; capacity is not the point at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import RunConfig
from .errors import ContractError, ShapeError, VocabularyError
from .fusion import FusionParams, FusionTrace, MhaParams, mha, multi_hop
from .tensor import Tensor
from .vocab import Vocab

_NEG_INF = -1e9


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, d: int, hidden: int, rng: np.random.Generator,
             scale: float = 0.1) -> "FeedForwardParams":
        u = lambda *shape: Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True)
        return cls(w1=u(d, hidden), b1=u(hidden), w2=u(hidden, d), b2=u(d))

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}/w1": self.w1, f"{prefix}/b1": self.b1,
                f"{prefix}/w2": self.w2, f"{prefix}/b2": self.b2}

    def apply(self, x: Tensor) -> Tensor:
        hidden = T.relu(T.add_bias(T.matmul(x, self.w1), self.b1))
        return T.add_bias(T.matmul(hidden, self.w2), self.b2)


@dataclass
class EncoderParams:
    attn: MhaParams
    ffn: FeedForwardParams

    def parameters(self) -> list[Tensor]:
        return self.attn.parameters() + self.ffn.parameters()

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.named(f"{prefix}/attn")
        out.update(self.ffn.named(f"{prefix}/ffn"))
        return out


@dataclass
class DecoderParams:
    self_attn: MhaParams
    cross_attn: MhaParams
    ffn: FeedForwardParams
    out_w: Tensor
    out_b: Tensor

    def parameters(self) -> list[Tensor]:
        return (self.self_attn.parameters() + self.cross_attn.parameters()
                + self.ffn.parameters() + [self.out_w, self.out_b])

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.self_attn.named(f"{prefix}/self_attn")
        out.update(self.cross_attn.named(f"{prefix}/cross_attn"))
        out.update(self.ffn.named(f"{prefix}/ffn"))
        out[f"{prefix}/out_w"] = self.out_w
        out[f"{prefix}/out_b"] = self.out_b
        return out


@dataclass
class ToyModel:
    """One stage's parameter set plus its forward passes."""

    vocab: Vocab
    d: int
    max_positions: int
    embed: Tensor
    pos: Tensor
    encoder: EncoderParams
    fusion: FusionParams
    decoder: DecoderParams

    @classmethod
    def init(cls, vocab: Vocab, cfg: RunConfig, rng: np.random.Generator) -> "ToyModel":
        d = cfg.d
        s = cfg.init_scale
        u = lambda *shape: Tensor(rng.uniform(-s, s, size=shape), requires_grad=True)
        hidden = cfg.ffn_mult * d
        encoder = EncoderParams(attn=MhaParams.init(d, cfg.heads, rng, scale=s),
                                ffn=FeedForwardParams.init(d, hidden, rng, scale=s))
        # the fusion block keeps its own fixed init range
        fusion = FusionParams.init(d, cfg.hops, cfg.heads, rng, gate_bias=cfg.gate_bias)
        decoder = DecoderParams(
            self_attn=MhaParams.init(d, cfg.heads, rng, scale=s),
            cross_attn=MhaParams.init(d, cfg.heads, rng, scale=s),
            ffn=FeedForwardParams.init(d, hidden, rng, scale=s),
            out_w=u(d, len(vocab)),
            out_b=u(len(vocab)),
        )
        return cls(vocab=vocab, d=d, max_positions=cfg.max_positions,
                   embed=u(len(vocab), d), pos=u(cfg.max_positions, d),
                   encoder=encoder, fusion=fusion, decoder=decoder)

    def parameters(self) -> list[Tensor]:
        return ([self.embed, self.pos] + self.encoder.parameters()
                + self.fusion.parameters() + self.decoder.parameters())

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}/embed": self.embed, f"{prefix}/pos": self.pos}
        out.update(self.encoder.named(f"{prefix}/encoder"))
        out.update(self.fusion.named(f"{prefix}/fusion"))
        out.update(self.decoder.named(f"{prefix}/decoder"))
        return out

    # -- forward passes ----------------------------------------------------

    def _embed_sequence(self, tokens: Sequence[int]) -> Tensor:
        ids = list(tokens)
        if not ids:
            raise ShapeError("cannot embed an empty token sequence")
        if len(ids) > self.max_positions:
            raise ContractError(
                f"sequence of {len(ids)} tokens exceeds the position cap {self.max_positions}")
        for t in ids:
            if not 0 <= t < len(self.vocab):
                raise VocabularyError(f"unknown token id {t} (vocab size {len(self.vocab)})")
        tok = T.embed_rows(self.embed, ids)
        pos = T.embed_rows(self.pos, list(range(len(ids))))
        return T.add(tok, pos)

    def encode_text(self, tokens: Sequence[int]) -> Tensor:
        """Contextual states feeding the fusion block."""
        x = self._embed_sequence(tokens)
        attn_out, _ = mha(x, x, x, self.encoder.attn)
        x = T.add(x, attn_out)
        return T.add(x, self.encoder.ffn.apply(x))

    def fuse(self, h_t0: Tensor, h_img: Tensor) -> tuple[Tensor, FusionTrace]:
        if h_img.data.ndim != 2 or h_img.shape[1] != self.d:
            raise ShapeError(f"image features must be (S, {self.d}), got {h_img.shape}")
        return multi_hop(h_t0, h_img, self.fusion)

    def decode_states(self, memory: Tensor, prefix_tokens: Sequence[int]) -> Tensor:
        """Decoder hidden states for a teacher-forced / generated prefix."""
        x = self._embed_sequence(prefix_tokens)
        t = x.shape[0]
        causal = np.triu(np.full((t, t), _NEG_INF), k=1)
        self_out, _ = mha(x, x, x, self.decoder.self_attn, mask=Tensor(causal))
        x = T.add(x, self_out)
        cross_out, _ = mha(x, memory, memory, self.decoder.cross_attn)
        x = T.add(x, cross_out)
        return T.add(x, self.decoder.ffn.apply(x))

    def logits(self, dec_states: Tensor) -> Tensor:
        return T.add_bias(T.matmul(dec_states, self.decoder.out_w), self.decoder.out_b)
