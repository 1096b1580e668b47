"""Vanilla and low-rank transient-query attention, the feature adapter, and FLOP accounting."""
from __future__ import annotations

import timeit
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError

VARIANTS = ("normalized", "literal")


@dataclass
class AttentionParams:
    """Projections ``wq``, ``wk``, ``wv`` (D x D) and the transient query (s x D).

    ``variant`` picks the softmax axes of the low-rank path:

    * ``normalized``: each sample's slot weights sum to one (softmax over s),
      the key summary is a softmax over samples, and the value summary is not
      re-normalised.
    * ``literal``: softmax over the last axis at all three steps.
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    transient: Tensor
    variant: str = "normalized"
    scaled: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attention variant '{self.variant}'")
        d = self.wq.shape[0]
        for name in ("wq", "wk", "wv"):
            if getattr(self, name).shape != (d, d):
                raise DimensionError(f"{name} must be {d}x{d}, got {getattr(self, name).shape}")
        if self.transient.ndim != 2 or self.transient.shape[1] != d or self.transient.shape[0] < 1:
            raise DimensionError(f"transient query must be s x {d} with s >= 1, got {self.transient.shape}")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def rank(self) -> int:
        return self.transient.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "transient": self.transient}

    @classmethod
    def initialize(cls, dim: int, rank: int, rng: np.random.Generator, variant: str = "normalized",
                   scaled: bool = False, dtype=np.float32) -> "AttentionParams":
        std = 1.0 / np.sqrt(dim)
        mats = [(rng.standard_normal((dim, dim)) * std).astype(dtype) for _ in range(3)]
        transient = (rng.standard_normal((rank, dim)) * std).astype(dtype)
        return cls(*(ad.parameter(m) for m in mats), ad.parameter(transient), variant=variant, scaled=scaled)


@dataclass
class AdapterParams:
    """Attention followed by a ReLU bottleneck of width D/4, mixed back with ratio ``alpha``."""

    attention: AttentionParams
    down: Tensor
    up: Tensor
    alpha: float = 0.2
    beta: float = 0.3

    def __post_init__(self):
        d = self.attention.dim
        if self.down.ndim != 2 or self.down.shape[0] != d or self.up.shape != (self.down.shape[1], d):
            raise DimensionError(f"bottleneck shapes {self.down.shape}/{self.up.shape} do not fit D={d}")
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")

    def tensors(self) -> dict[str, Tensor]:
        out = {f"attn_{k}": v for k, v in self.attention.tensors().items()}
        out.update(down=self.down, up=self.up)
        return out

    @classmethod
    def initialize(cls, dim: int, rank: int, rng: np.random.Generator, alpha: float = 0.2, beta: float = 0.3,
                   variant: str = "normalized", scaled: bool = False, dtype=np.float32) -> "AdapterParams":
        if dim % 4:
            raise DimensionError(f"feature dimension {dim} is not divisible by 4")
        attn = AttentionParams.initialize(dim, rank, rng, variant=variant, scaled=scaled, dtype=dtype)
        hidden = dim // 4
        down = (rng.standard_normal((dim, hidden)) * np.sqrt(2.0 / dim)).astype(dtype)
        up = (rng.standard_normal((hidden, dim)) * np.sqrt(1.0 / hidden)).astype(dtype)
        return cls(attn, ad.parameter(down), ad.parameter(up), alpha=alpha, beta=beta)


def _check_input(features: Tensor, params: AttentionParams) -> None:
    if features.ndim != 2 or features.shape[1] != params.dim:
        raise DimensionError(f"expected S x {params.dim} features, got {features.shape}")
    if features.shape[0] < 1:
        raise DimensionError("attention needs at least one sample")


def _project(features: Tensor, params: AttentionParams):
    q = ad.matmul(features, params.wq)
    k = ad.matmul(features, params.wk)
    v = ad.matmul(features, params.wv)
    if params.scaled:
        q = q * (1.0 / np.sqrt(params.dim))
    return q, k, v


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    x = x - x.max(axis=axis, keepdims=True)
    np.exp(x, out=x)
    x /= x.sum(axis=axis, keepdims=True)
    return x


def _needs_graph(features: Tensor, params: AttentionParams) -> bool:
    return features.requires_grad or any(t.requires_grad for t in params.tensors().values())


def _project_np(f: np.ndarray, params: AttentionParams):
    q = f @ params.wq.data
    if params.scaled:
        q *= 1.0 / np.sqrt(params.dim)
    return q, f @ params.wk.data, f @ params.wv.data


def vanilla_attention(features, params: AttentionParams) -> Tensor:
    """softmax(Q K^T) V with the softmax over keys; Theta(S^2 D)."""
    features = ad.as_tensor(features)
    _check_input(features, params)
    if not _needs_graph(features, params):
        q, k, v = _project_np(features.data, params)
        out = np.empty_like(v)
        # row blocks keep the score tile at ~2^20 entries regardless of S
        step = max(1, (1 << 20) // len(k))
        for lo in range(0, len(q), step):
            out[lo:lo + step] = _softmax_np(q[lo:lo + step] @ k.T, -1) @ v
        return Tensor(out)
    q, k, v = _project(features, params)
    scores = ad.matmul(q, ad.transpose(k))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def lrtq_attention(features, params: AttentionParams) -> Tensor:
    """Low-rank transient-query attention; Theta(S s D).

    The S x S affinity is replaced by two s x S maps obtained by querying Q and
    K with the learnable transient query; the output is ``Tq^T @ V_hat``.
    """
    features = ad.as_tensor(features)
    _check_input(features, params)
    if not _needs_graph(features, params):
        return Tensor(_lrtq_np(features.data, params))
    q, k, v = _project(features, params)
    t = params.transient
    q_scores = ad.matmul(t, ad.transpose(q))  # s x S
    k_scores = ad.matmul(t, ad.transpose(k))  # s x S
    if params.variant == "literal":
        tq = ad.softmax(q_scores, axis=-1)
        tk = ad.softmax(k_scores, axis=-1)
        v_hat = ad.softmax(ad.matmul(tk, v), axis=-1)
    else:
        tq = ad.softmax(q_scores, axis=0)
        tk = ad.softmax(k_scores, axis=-1)
        v_hat = ad.matmul(tk, v)
    return ad.matmul(ad.transpose(tq), v_hat)


def _lrtq_np(f: np.ndarray, params: AttentionParams) -> np.ndarray:
    q, k, v = _project_np(f, params)
    t = params.transient.data
    if params.variant == "literal":
        tq = _softmax_np(t @ q.T, -1)
        v_hat = _softmax_np(_softmax_np(t @ k.T, -1) @ v, -1)
    else:
        tq = _softmax_np(t @ q.T, 0)
        v_hat = _softmax_np(t @ k.T, -1) @ v
    return tq.T @ v_hat


def adapter_reconstruct(features, params: AdapterParams) -> Tensor:
    """up(relu(down(lrtq(F)))) -- the pre-residual reconstruction f(F)."""
    attended = lrtq_attention(features, params.attention)
    return ad.matmul(ad.relu(ad.matmul(attended, params.down)), params.up)


def residual_mix(features, reconstructed: Tensor, alpha: float) -> Tensor:
    features = ad.as_tensor(features)
    if alpha == 0.0:
        return features
    if alpha == 1.0:
        return reconstructed
    return reconstructed * alpha + features * (1.0 - alpha)


def adapter_forward(features, params: AdapterParams) -> tuple[Tensor, Tensor]:
    """Return (reconstruction, alpha * reconstruction + (1 - alpha) * features)."""
    features = ad.as_tensor(features)
    recon = adapter_reconstruct(features, params)
    return recon, residual_mix(features, recon, params.alpha)


def self_cross_loss(dense, rendered, params: AdapterParams, beta: float | None = None,
                    eps: float = 1e-8) -> Tensor:
    """Self terms pair f(x) with x, cross terms pair f(x) with the other source.

    L = -beta [cos(f(F), F) + cos(f(R), R)] - (1 - beta) [cos(f(R), F) + cos(f(F), R)],
    each cosine averaged over rows.
    """
    dense, rendered = ad.as_tensor(dense), ad.as_tensor(rendered)
    if dense.shape != rendered.shape:
        raise DimensionError(f"dense {dense.shape} and rendered {rendered.shape} features differ")
    beta = params.beta if beta is None else beta
    f_dense = adapter_reconstruct(dense, params)
    f_rend = adapter_reconstruct(rendered, params)
    self_terms = (ad.cosine_similarity(f_dense, dense, eps).mean()
                  + ad.cosine_similarity(f_rend, rendered, eps).mean())
    cross_terms = (ad.cosine_similarity(f_rend, dense, eps).mean()
                   + ad.cosine_similarity(f_dense, rendered, eps).mean())
    return -(self_terms * beta) - cross_terms * (1.0 - beta)


def reconstruction_loss(dense, params: AdapterParams, eps: float = 1e-8) -> Tensor:
    """Adapter-only objective used before self-cross training starts: -mean cos(f(F), F)."""
    dense = ad.as_tensor(dense)
    return -ad.cosine_similarity(adapter_reconstruct(dense, params), dense, eps).mean()


# -- FLOP accounting -------------------------------------------------------------------

@dataclass
class FlopCount:
    kind: str
    terms: dict[str, float] = field(default_factory=dict)
    core_terms: tuple[str, ...] = ()

    @property
    def total(self) -> float:
        return float(sum(self.terms.values()))

    @property
    def core(self) -> float:
        return float(sum(self.terms[t] for t in self.core_terms))


def attention_flops(kind: str, S: int, s: int, D: int, variant: str = "normalized") -> FlopCount:
    """Analytic floating-point operation counts (a multiply-add counts as 2).

    ``core`` is the figure comparable to published per-block numbers: for
    vanilla attention the S x S affinity product, for the low-rank path every
    transient-query product plus its softmaxes.
    """
    if min(S, s, D) <= 0:
        raise ValueError("dimensions must be positive")
    projections = 3 * 2.0 * S * D * D
    if kind == "vanilla":
        terms = {"projections": projections, "scores": 2.0 * S * S * D,
                 "aggregate": 2.0 * S * S * D, "softmax": 5.0 * S * S}
        return FlopCount(kind, terms, ("scores",))
    if kind == "lrtq":
        softmax = 2 * 5.0 * s * S + (5.0 * s * D if variant == "literal" else 0.0)
        terms = {"projections": projections, "queries": 2 * 2.0 * S * s * D,
                 "value_summary": 2.0 * S * s * D, "output": 2.0 * S * s * D, "softmax": softmax}
        return FlopCount(kind, terms, ("queries", "value_summary", "output", "softmax"))
    raise ValueError(f"unknown attention kind '{kind}'")


def solve_rank(target_core_flops: float, S: int, D: int, variant: str = "normalized") -> float:
    """Transient-query rank s whose low-rank core cost equals ``target_core_flops``."""
    per_rank = attention_flops("lrtq", S, 1, D, variant).core
    return target_core_flops / per_rank


# -- wall-clock scaling ------------------------------------------------------------------

def time_attention(kind: str, S: int, s: int, D: int, repeats: int = 5,
                   seed: int = 0, dtype=np.float32, min_round: float = 0.05) -> float:
    """Best per-call forward wall time (seconds) over ``repeats`` timing rounds.

    Each round loops enough calls to last at least ``min_round`` seconds so
    sub-millisecond sizes are not dominated by timer jitter.
    """
    rng = np.random.default_rng(seed)
    params = AttentionParams.initialize(D, s, rng, dtype=dtype)
    for t in params.tensors().values():
        t.requires_grad = False
    x = Tensor(rng.standard_normal((S, D)).astype(dtype))
    fn = vanilla_attention if kind == "vanilla" else lrtq_attention
    timer = timeit.Timer(lambda: fn(x, params))
    number = 1
    while timer.timeit(number) < min_round:
        number *= 2
    return min(timer.repeat(repeat=max(repeats, 1), number=number)) / number


def fit_loglog_slope(sizes, times) -> float:
    slope, _ = np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(times, float)), 1)
    return float(slope)
