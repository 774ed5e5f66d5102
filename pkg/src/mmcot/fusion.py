"""Multi-hop cross-modal attention with sigmoid-gated aggregation.

Text hidden states repeatedly attend onto frozen image features. Each
hop computes multi-head attention (text as query, image as key/value),
then blends the previous text state with the attention output through a
learned sigmoid gate:

    a      = attention(h_prev -> image)
    g      = sigmoid(W [h_prev, a] + b)
    h_next = (1 - g) * h_prev + g * a

so every hop output is an elementwise convex combination of its inputs.
Gate values live strictly in (0, 1); hop count 0 is the exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class MhaParams:
    """Per-head q/k/v projections plus the shared output projection.

    Head count ``h`` and head width ``d_h`` must satisfy ``h * d_h == d``
    so concatenated heads map back to model width.
    """

    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor

    def __post_init__(self):
        h = len(self.wq)
        if h < 1 or len(self.wk) != h or len(self.wv) != h:
            raise ShapeError("q/k/v projection lists must be non-empty and equal length")
        d, dh = self.wq[0].shape
        for w in (*self.wq, *self.wk, *self.wv):
            if w.shape != (d, dh):
                raise ShapeError("all head projections must share shape (d, d_h)")
        if h * dh != d:
            raise ShapeError(f"heads*head_dim must equal width: {h}*{dh} != {d}")
        if self.wo.shape != (h * dh, d):
            raise ShapeError(f"output projection must be ({h * dh}, {d}), got {self.wo.shape}")

    @property
    def num_heads(self) -> int:
        return len(self.wq)

    @property
    def width(self) -> int:
        return self.wq[0].shape[0]

    @property
    def head_dim(self) -> int:
        return self.wq[0].shape[1]

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator,
             scale: float = 0.1) -> "MhaParams":
        if heads < 1 or d % heads != 0:
            raise ShapeError(f"width {d} not divisible into {heads} heads")
        dh = d // heads

        def w(rows, cols):
            return Tensor(rng.uniform(-scale, scale, size=(rows, cols)), requires_grad=True)

        return cls(
            wq=[w(d, dh) for _ in range(heads)],
            wk=[w(d, dh) for _ in range(heads)],
            wv=[w(d, dh) for _ in range(heads)],
            wo=w(heads * dh, d),
        )

    def parameters(self) -> list[Tensor]:
        return [*self.wq, *self.wk, *self.wv, self.wo]

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i in range(self.num_heads):
            out[f"{prefix}/head{i}/wq"] = self.wq[i]
            out[f"{prefix}/head{i}/wk"] = self.wk[i]
            out[f"{prefix}/head{i}/wv"] = self.wv[i]
        out[f"{prefix}/wo"] = self.wo
        return out


@dataclass
class HopParams:
    """One hop: its attention layer and gate weight (optional bias)."""

    attn: MhaParams
    gate_w: Tensor
    gate_b: Tensor | None = None

    def __post_init__(self):
        d = self.attn.width
        if self.gate_w.shape != (2 * d, d):
            raise ShapeError(f"gate weight must be ({2 * d}, {d}), got {self.gate_w.shape}")
        if self.gate_b is not None and self.gate_b.shape != (d,):
            raise ShapeError(f"gate bias must be ({d},), got {self.gate_b.shape}")

    def parameters(self) -> list[Tensor]:
        ps = self.attn.parameters() + [self.gate_w]
        if self.gate_b is not None:
            ps.append(self.gate_b)
        return ps


@dataclass
class FusionParams:
    """Per-hop parameters of the whole fusion block (K hops, K >= 0)."""

    hops: list[HopParams] = field(default_factory=list)

    def __post_init__(self):
        widths = {hp.attn.width for hp in self.hops}
        if len(widths) > 1:
            raise ShapeError(f"hops disagree on model width: {sorted(widths)}")

    @property
    def num_hops(self) -> int:
        return len(self.hops)

    @classmethod
    def init(cls, d: int, num_hops: int, heads: int, rng: np.random.Generator,
             gate_bias: bool = True) -> "FusionParams":
        hops = []
        for _ in range(num_hops):
            gw = Tensor(rng.uniform(-0.1, 0.1, size=(2 * d, d)), requires_grad=True)
            gb = Tensor(rng.uniform(-0.1, 0.1, size=(d,)), requires_grad=True) if gate_bias else None
            hops.append(HopParams(attn=MhaParams.init(d, heads, rng), gate_w=gw, gate_b=gb))
        return cls(hops=hops)

    def parameters(self) -> list[Tensor]:
        return [p for hp in self.hops for p in hp.parameters()]

    def named(self, prefix: str = "fusion") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for k, hp in enumerate(self.hops):
            out.update(hp.attn.named(f"{prefix}/hop{k}/attn"))
            out[f"{prefix}/hop{k}/gate_w"] = hp.gate_w
            if hp.gate_b is not None:
                out[f"{prefix}/hop{k}/gate_b"] = hp.gate_b
        return out


@dataclass
class HopTrace:
    """Diagnostics from one hop: raw numpy copies, not tape-connected."""

    attention: list[np.ndarray]  # per head, rows are queries and sum to 1
    gate: np.ndarray
    state: np.ndarray


@dataclass
class FusionTrace:
    hops: list[HopTrace] = field(default_factory=list)


def mha(query: Tensor, key: Tensor, value: Tensor, params: MhaParams,
        mask: Tensor | None = None) -> tuple[Tensor, list[np.ndarray]]:
    """Scaled dot-product multi-head attention.

    Scores are divided by sqrt(head width) before the softmax over the
    key axis; heads are concatenated and output-projected. Returns the
    projected output and a per-head copy of the attention weights.
    ``mask`` (optional, query x key) is added to the scores before the
    softmax; the fusion block never uses it, the decoder's causal
    self-attention does.
    """
    d = params.width
    for name, t in (("query", query), ("key", key), ("value", value)):
        if t.data.ndim != 2 or t.shape[1] != d:
            raise ShapeError(f"{name} width must be {d}, got shape {t.shape}")
    if key.shape[0] == 0:
        raise ShapeError("attention needs at least one key row")
    if key.shape[0] != value.shape[0]:
        raise ShapeError(f"key/value row counts disagree: {key.shape} vs {value.shape}")
    if mask is not None and mask.shape != (query.shape[0], key.shape[0]):
        raise ShapeError(f"mask must be (T, S), got {mask.shape}")

    inv_scale = 1.0 / np.sqrt(params.head_dim)
    head_outs: list[Tensor] = []
    weights: list[np.ndarray] = []
    for i in range(params.num_heads):
        q = T.matmul(query, params.wq[i])
        k = T.matmul(key, params.wk[i])
        v = T.matmul(value, params.wv[i])
        scores = T.scale(T.matmul(q, T.transpose(k)), inv_scale)
        if mask is not None:
            scores = T.add(scores, mask)
        attn = T.softmax_rows(scores)
        weights.append(attn.data.copy())
        head_outs.append(T.matmul(attn, v))
    merged = head_outs[0]
    for h in head_outs[1:]:
        merged = T.concat_last(merged, h)
    return T.matmul(merged, params.wo), weights


def gate(h_prev: Tensor, a: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """Sigmoid gate over the concatenation of the two fusion inputs."""
    if h_prev.shape != a.shape:
        raise ShapeError(f"gate inputs must match: {h_prev.shape} vs {a.shape}")
    z = T.matmul(T.concat_last(h_prev, a), w)
    if bias is not None:
        z = T.add_bias(z, bias)
    return T.sigmoid(z)


def hop(h_prev: Tensor, h_img: Tensor, params: HopParams) -> tuple[Tensor, HopTrace]:
    """One fusion hop: attend onto the image, then gate-blend."""
    a, weights = mha(h_prev, h_img, h_img, params.attn)
    g = gate(h_prev, a, params.gate_w, params.gate_b)
    keep = T.sub(Tensor(np.ones(g.shape)), g)
    h_next = T.add(T.mul(keep, h_prev), T.mul(g, a))
    return h_next, HopTrace(attention=weights, gate=g.data.copy(), state=h_next.data.copy())


def multi_hop(h_t0: Tensor, h_img: Tensor, params: FusionParams) -> tuple[Tensor, FusionTrace]:
    """Compose K hops; each hop queries with the previous hop's output.

    Zero hops return the input tensor itself (exact identity).
    """
    trace = FusionTrace()
    h = h_t0
    for hp in params.hops:
        h, entry = hop(h, h_img, hp)
        trace.hops.append(entry)
    return h, trace


def save_fusion_params(params: FusionParams, path) -> None:
    T.save_named_tensors(path, params.named())


def mha_from_named(named, prefix: str) -> MhaParams:
    """Rebuild attention parameters stored under ``prefix`` in a
    named-tensor mapping."""
    heads = 0
    while f"{prefix}/head{heads}/wq" in named:
        heads += 1
    if heads == 0:
        raise ShapeError(f"no attention heads under {prefix!r}")
    return MhaParams(
        wq=[named[f"{prefix}/head{i}/wq"] for i in range(heads)],
        wk=[named[f"{prefix}/head{i}/wk"] for i in range(heads)],
        wv=[named[f"{prefix}/head{i}/wv"] for i in range(heads)],
        wo=named[f"{prefix}/wo"],
    )


def fusion_from_named(named, prefix: str = "fusion") -> FusionParams:
    hops: list[HopParams] = []
    k = 0
    while f"{prefix}/hop{k}/gate_w" in named:
        hops.append(HopParams(attn=mha_from_named(named, f"{prefix}/hop{k}/attn"),
                              gate_w=named[f"{prefix}/hop{k}/gate_w"],
                              gate_b=named.get(f"{prefix}/hop{k}/gate_b")))
        k += 1
    return FusionParams(hops=hops)


def load_fusion_params(path) -> FusionParams:
    """Rebuild a fusion block from its parameter file."""
    params = fusion_from_named(T.load_named_tensors(path))
    for t in params.parameters():
        t.requires_grad = True
    return params
