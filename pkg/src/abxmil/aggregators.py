"""Attention-pooling aggregators over bags of instance features.

Four variants share one parameter record and one report format:

* ``abmil``        single attention MLP, softmax over instances, weighted sum
* ``abmilx``       feature columns split into heads, a shared attention MLP
                   per head, correlation-based refinement of each head's
                   attention, per-head pooling, concatenation, optional FFN
* ``mean``         uniform attention (the no-op baseline)
* ``global-attn``  one learned query against normalized instance features

Every forward returns the pooled feature (1 x D) plus an AttentionReport
holding raw/refined/post-softmax attention per head, so the analysis
instruments never have to re-run a model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError
from .tensor import (
    Tensor,
    add,
    concat_last,
    layer_norm,
    matmul,
    relu,
    scale,
    smul,
    softmax_rows,
    split_last,
    tanh,
    transpose,
)

VARIANTS = ("abmil", "abmilx", "mean", "global-attn")
ALPHA_MODES = ("fixed-zero", "fixed-one", "learnable")

# similarity matrices are dropped from reports above this bag size unless
# retention is forced
SIMILARITY_RETAIN_LIMIT = 4096

# init gain of the attention scorer's output layer; > 1 makes freshly
# initialized attention already sparse, the regime these aggregators target
ATTN_INIT_GAIN = 10.0

# init gain of the similarity projections; < 1 starts the similarity matrix
# near uniform so refinement does not sharpen untrained attention
QK_INIT_GAIN = 0.3


@dataclass
class AggregatorParams:
    variant: str
    dim: int
    heads: int = 1
    attn_hidden: int = 128
    proj_dim: int = 0
    alpha_mode: str = "fixed-zero"
    ffn_enabled: bool = False
    ln_gain: Tensor = None
    ln_shift: Tensor = None
    attn_w1: Tensor = None
    attn_w2: Tensor = None
    wq: Tensor = None
    wk: Tensor = None
    alpha: Tensor = None
    ffn_w1: Tensor = None
    ffn_w2: Tensor = None
    query: Tensor = None

    def alpha_value(self):
        """Current scalar mixing value, or None for variants without it."""
        if self.variant != "abmilx":
            return None
        return float(self.alpha.data[0, 0])

    def named_params(self, prefix="aggregator"):
        out = [(f"{prefix}.ln_gain", self.ln_gain), (f"{prefix}.ln_shift", self.ln_shift)]
        if self.variant in ("abmil", "abmilx"):
            out += [(f"{prefix}.attn_w1", self.attn_w1), (f"{prefix}.attn_w2", self.attn_w2)]
        if self.variant == "abmilx":
            out += [(f"{prefix}.wq", self.wq), (f"{prefix}.wk", self.wk)]
            if self.alpha_mode == "learnable":
                out.append((f"{prefix}.alpha", self.alpha))
            if self.ffn_enabled:
                out += [(f"{prefix}.ffn_w1", self.ffn_w1), (f"{prefix}.ffn_w2", self.ffn_w2)]
        if self.variant == "global-attn":
            out.append((f"{prefix}.query", self.query))
        return out


def make_aggregator(variant, dim, rng, heads=1, attn_hidden=128, proj_dim=None,
                    alpha_mode="fixed-zero", ffn=False) -> AggregatorParams:
    """Build and initialize one aggregator. Weights are drawn from ``rng`` in
    a fixed order; linear weights use std = 1/sqrt(fan_in) and carry no bias.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown aggregator variant {variant!r}")
    if alpha_mode not in ALPHA_MODES:
        raise ConfigError(f"unknown alpha mode {alpha_mode!r}")
    proj = dim if proj_dim in (None, 0) else int(proj_dim)
    if variant != "abmilx":
        heads = 1
    if variant == "abmilx":
        if dim % heads != 0:
            raise ConfigError(f"head count {heads} must divide feature width {dim}")
        if proj % heads != 0:
            raise ConfigError(f"head count {heads} must divide projection width {proj}")

    def lin(n_in, n_out):
        return Tensor(rng.standard_normal((n_in, n_out)) / math.sqrt(n_in),
                      requires_grad=True)

    p = AggregatorParams(
        variant=variant, dim=dim, heads=heads, attn_hidden=attn_hidden,
        proj_dim=proj, alpha_mode=alpha_mode, ffn_enabled=bool(ffn),
        ln_gain=Tensor(np.ones((1, dim)), requires_grad=True),
        ln_shift=Tensor(np.zeros((1, dim)), requires_grad=True),
    )
    def scorer_out():
        return Tensor(rng.standard_normal((attn_hidden, 1))
                      * (ATTN_INIT_GAIN / math.sqrt(attn_hidden)), requires_grad=True)

    if variant == "abmil":
        p.attn_w1 = lin(dim, attn_hidden)
        p.attn_w2 = scorer_out()
    elif variant == "abmilx":
        width = dim // heads
        p.attn_w1 = lin(width, attn_hidden)
        p.attn_w2 = scorer_out()
        p.wq = Tensor(rng.standard_normal((width, proj // heads))
                      * (QK_INIT_GAIN / math.sqrt(width)), requires_grad=True)
        p.wk = Tensor(rng.standard_normal((width, proj // heads))
                      * (QK_INIT_GAIN / math.sqrt(width)), requires_grad=True)
        init = 0.0 if alpha_mode == "fixed-zero" else 1.0
        p.alpha = Tensor([[init]], requires_grad=(alpha_mode == "learnable"))
        if ffn:
            p.ffn_w1 = lin(dim, 4 * dim)
            p.ffn_w2 = lin(4 * dim, dim)
    elif variant == "global-attn":
        p.query = Tensor(rng.standard_normal((1, dim)) / math.sqrt(dim),
                         requires_grad=True)
    return p


@dataclass
class AttentionReport:
    """Per-head attention record of one forward pass; plain numpy, detached."""

    bag_size: int
    raw: list = field(default_factory=list)         # per-head logits, (s,)
    refined: list = field(default_factory=list)     # per-head refined logits, (s,)
    post: list = field(default_factory=list)        # per-head post-softmax, (s,)
    similarity: list = field(default_factory=list)  # per-head (s, s) or None
    pooled: np.ndarray = None                       # mean over heads of post, (s,)

    @property
    def n_heads(self):
        return len(self.post)

    def validate(self):
        for a in self.post:
            if abs(a.sum() - 1.0) > 1e-9 or (a < 0).any():
                raise ValidationError("post-softmax attention must be a distribution")
        for u in self.similarity:
            if u is not None and np.abs(u.sum(axis=1) - 1.0).max() > 1e-9:
                raise ValidationError("similarity rows must sum to 1")


def _build_report(raws, refineds, post_rows, sims, bag_size, retain):
    if retain is None:
        retain = bag_size <= SIMILARITY_RETAIN_LIMIT
    posts = [p.data[0].copy() for p in post_rows]
    return AttentionReport(
        bag_size=bag_size,
        raw=[a.data[:, 0].copy() for a in raws],
        refined=[g.data[:, 0].copy() for g in refineds],
        post=posts,
        similarity=[(u.data.copy() if (u is not None and retain) else None) for u in sims],
        pooled=np.mean(posts, axis=0),
    )


def _input_norm(E, params):
    if E.shape[1] != params.dim:
        raise ShapeError(f"bag width {E.shape[1]} != aggregator width {params.dim}")
    return layer_norm(E, params.ln_gain, params.ln_shift)


def abmil_forward(E: Tensor, params: AggregatorParams, retain_similarity=None):
    """Classic attention pooling: MLP scores, softmax over instances,
    attention-weighted sum of the normalized features."""
    if params.variant != "abmil":
        raise ValueError(f"abmil_forward on variant {params.variant!r}")
    ln = _input_norm(E, params)
    a = matmul(tanh(matmul(ln, params.attn_w1)), params.attn_w2)  # s x 1
    arow = softmax_rows(transpose(a))                             # 1 x s
    z = matmul(arow, ln)
    report = _build_report([a], [a], [arow], [None], E.shape[0], retain_similarity)
    return z, report


def split_heads(E: Tensor, m: int):
    """Contiguous column blocks; concat_last inverts the split."""
    if E.shape[1] % m != 0:
        raise ConfigError(f"cannot split width {E.shape[1]} into {m} heads")
    return split_last(E, [E.shape[1] // m] * m)


def mhla_attention(H: Tensor, params: AggregatorParams) -> Tensor:
    """Per-head attention logits from the MLP shared by every head."""
    if H.shape[1] != params.attn_w1.shape[0]:
        raise ShapeError(f"head width {H.shape[1]} != attention MLP input "
                         f"{params.attn_w1.shape[0]}")
    return matmul(tanh(matmul(H, params.attn_w1)), params.attn_w2)


def attention_plus(A: Tensor, H: Tensor, params: AggregatorParams):
    """Refine head attention with the row-stochastic similarity matrix:
    G(A) = A + alpha * U A, U = softmax(Q K^T / sqrt(proj_width)).

    Returns (G, U). With alpha mode fixed-zero the shortcut alone is used,
    so G is exactly A.
    """
    q = matmul(H, params.wq)
    k = matmul(H, params.wk)
    u = softmax_rows(smul(matmul(q, transpose(k)),
                          1.0 / math.sqrt(params.proj_dim // params.heads)))
    if params.alpha_mode == "fixed-zero":
        return A, u
    propagated = matmul(u, A)
    if params.alpha_mode == "fixed-one":
        return add(A, propagated), u
    return add(A, scale(propagated, params.alpha)), u


def head_aggregate(refined, heads, _posts=None) -> Tensor:
    """Z^j = softmax(G(A^j))^T H^j, concatenated over heads."""
    if len(refined) != len(heads):
        raise ValueError(f"{len(refined)} refined vectors for {len(heads)} heads")
    if _posts is None:
        _posts = [softmax_rows(transpose(g)) for g in refined]
    return concat_last([matmul(p, h) for p, h in zip(_posts, heads)])


def abmilx_forward(E: Tensor, params: AggregatorParams, retain_similarity=None):
    """Multi-head local attention with correlation-based refinement."""
    if params.variant != "abmilx":
        raise ValueError(f"abmilx_forward on variant {params.variant!r}")
    ln = _input_norm(E, params)
    heads = split_heads(ln, params.heads)
    raws = [mhla_attention(h, params) for h in heads]
    refined, sims = [], []
    for a, h in zip(raws, heads):
        g, u = attention_plus(a, h, params)
        refined.append(g)
        sims.append(u)
    posts = [softmax_rows(transpose(g)) for g in refined]
    z = head_aggregate(refined, heads, _posts=posts)
    if params.ffn_enabled:
        z = add(z, matmul(relu(matmul(z, params.ffn_w1)), params.ffn_w2))
    report = _build_report(raws, refined, posts, sims, E.shape[0], retain_similarity)
    return z, report


def mean_pool_forward(E: Tensor, params: AggregatorParams, retain_similarity=None):
    if params.variant != "mean":
        raise ValueError(f"mean_pool_forward on variant {params.variant!r}")
    ln = _input_norm(E, params)
    s = E.shape[0]
    row = Tensor(np.full((1, s), 1.0 / s))
    z = matmul(row, ln)
    uniform = np.full(s, 1.0 / s)
    report = AttentionReport(bag_size=s, raw=[np.zeros(s)], refined=[np.zeros(s)],
                             post=[uniform], similarity=[None], pooled=uniform.copy())
    return z, report


def global_attention_pool_forward(E: Tensor, params: AggregatorParams,
                                  retain_similarity=None):
    """Single learned query against normalized features, scaled dot product."""
    if params.variant != "global-attn":
        raise ValueError(f"global_attention_pool_forward on variant {params.variant!r}")
    ln = _input_norm(E, params)
    logits = smul(matmul(ln, transpose(params.query)), 1.0 / math.sqrt(params.dim))
    arow = softmax_rows(transpose(logits))
    z = matmul(arow, ln)
    report = _build_report([logits], [logits], [arow], [None], E.shape[0],
                           retain_similarity)
    return z, report


_FORWARDS = {
    "abmil": abmil_forward,
    "abmilx": abmilx_forward,
    "mean": mean_pool_forward,
    "global-attn": global_attention_pool_forward,
}


def aggregator_forward(E: Tensor, params: AggregatorParams, retain_similarity=None):
    return _FORWARDS[params.variant](E, params, retain_similarity=retain_similarity)


def propagation_weights(U: np.ndarray, A: np.ndarray, mode: str) -> np.ndarray:
    """How much each instance influences all others through U.

    mode "trans": P(i) = sum_k U[k, i], the plain column sums.
    mode "abx":   P(i) = sum_k A[k] * U[k, i], column sums weighted by the
    attention prior, so instances already holding sparse attention propagate
    more.
    """
    U = np.asarray(U, dtype=np.float64)
    A = np.asarray(A, dtype=np.float64).reshape(-1)
    if U.ndim != 2 or U.shape[0] != U.shape[1] or U.shape[0] != A.size:
        raise ShapeError(f"propagation_weights: U {U.shape} vs A length {A.size}")
    if not np.isfinite(A).all():
        raise ValidationError("propagation_weights: non-finite attention")
    if np.abs(U.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValidationError("propagation_weights: U is not row-stochastic")
    if mode == "trans":
        return U.sum(axis=0)
    if mode == "abx":
        return A @ U
    raise ConfigError(f"unknown propagation mode {mode!r}")
