"""Central finite-difference checks for every differentiable operation.

Each case builds float64 inputs from a seed and a function mapping named leaf
tensors to an output tensor. Non-scalar outputs are contracted with a fixed
random projection so one backward pass yields the full Jacobian-vector product.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as attn
from . import autodiff as ad
from . import semantics as sem
from . import volume as vol
from .autodiff import Tensor

CaseFn = Callable[[dict[str, Tensor]], Tensor]
Builder = Callable[[np.random.Generator], tuple[dict[str, np.ndarray], CaseFn]]


@dataclass
class GradResult:
    case: str
    seed: int
    max_rel_error: float
    worst_input: str
    passed: bool

    def to_dict(self) -> dict:
        return {"case": self.case, "seed": self.seed, "max_rel_error": self.max_rel_error,
                "worst_input": self.worst_input, "passed": self.passed}


def _scalarize(out: Tensor, rng: np.random.Generator) -> tuple[Tensor, np.ndarray | None]:
    if out.size == 1:
        return ad.reshape(out, ()), None
    proj = rng.standard_normal(out.shape)
    return ad.tsum(out * proj), proj


def _evaluate(fn: CaseFn, arrays: dict[str, np.ndarray], proj: np.ndarray | None) -> float:
    out = fn({k: Tensor(v) for k, v in arrays.items()})
    return float(np.sum(out.data) if proj is None else np.sum(out.data * proj))


def numeric_gradient(fn: CaseFn, arrays: dict[str, np.ndarray], name: str, proj=None, h: float = 1e-5) -> np.ndarray:
    """Central differences of the (projected) output with respect to ``arrays[name]``."""
    base = arrays[name]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        orig = base[idx]
        base[idx] = orig + h
        up = _evaluate(fn, arrays, proj)
        base[idx] = orig - h
        down = _evaluate(fn, arrays, proj)
        base[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """||a - n|| / max(||a||, ||n||, floor).

    The floor keeps structurally zero gradients (for instance a loss that is
    scale invariant in some input) from turning difference noise into O(1) error.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: CaseFn, arrays: dict[str, np.ndarray], rng: np.random.Generator | None = None,
                    h: float = 1e-5) -> dict[str, float]:
    """Relative error between backward and central differences for each input."""
    rng = rng if rng is not None else np.random.default_rng(0)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    leaves = {k: ad.parameter(v.copy()) for k, v in arrays.items()}
    scalar, proj = _scalarize(fn(leaves), rng)
    scalar.backward()
    errors = {}
    for name, leaf in leaves.items():
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        errors[name] = relative_error(analytic, numeric_gradient(fn, arrays, name, proj, h))
    return errors


# -- the case registry -------------------------------------------------------------------

def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _attention_params(t: dict[str, Tensor], variant: str = "normalized", scaled: bool = False):
    return attn.AttentionParams(t["wq"], t["wk"], t["wv"], t["transient"], variant=variant, scaled=scaled)


def _attention_inputs(rng, S=6, D=4, s=3):
    scale = 1.0 / np.sqrt(D)
    return {"features": rng.standard_normal((S, D)),
            "wq": rng.standard_normal((D, D)) * scale, "wk": rng.standard_normal((D, D)) * scale,
            "wv": rng.standard_normal((D, D)) * scale, "transient": rng.standard_normal((s, D)) * scale}


def _adapter(t: dict[str, Tensor], alpha=0.2, beta=0.3):
    return attn.AdapterParams(_attention_params(t), t["down"], t["up"], alpha=alpha, beta=beta)


def _adapter_inputs(rng, S=6, D=16, s=3):
    inputs = _attention_inputs(rng, S, D, s)
    inputs["down"] = rng.standard_normal((D, D // 4)) * np.sqrt(2.0 / D)
    inputs["up"] = rng.standard_normal((D // 4, D)) * np.sqrt(4.0 / D)
    return inputs


def case_render_weights(rng):
    deltas = rng.uniform(0.05, 0.3, (3, 6))
    return {"raw": rng.standard_normal((3, 6))}, lambda t: vol.render_weights(t["raw"], deltas)


def case_render_quantity(rng):
    return ({"weights": rng.uniform(0, 0.3, (3, 5)), "values": rng.standard_normal((3, 5, 4))},
            lambda t: vol.render_quantity(t["weights"], t["values"]))


def case_render_label(rng):
    return ({"weights": rng.uniform(0, 0.3, (3, 5)), "labels": rng.standard_normal((3, 5, 4))},
            lambda t: vol.render_label(t["weights"], t["labels"]))


def case_trilinear(rng):
    points = rng.uniform(0.05, 0.95, (2, 4, 3))
    grid_shape = (3, 3, 3, 2)

    def fn(t):
        volumes = vol.SceneVolumes(density=Tensor(np.zeros(grid_shape[:3] + (1,))),
                                   appearance=Tensor(np.zeros(grid_shape[:3] + (3,))),
                                   feature=t["grid"], label=Tensor(np.zeros(grid_shape)))
        return vol.sample_grid(volumes, "feature", points)

    return {"grid": rng.standard_normal(grid_shape)}, fn


def case_ray_rendering(rng):
    """Grid lookup, weights and feature compositing chained together."""
    origins = np.tile([0.5, 0.5, -0.2], (3, 1)) + rng.uniform(-0.1, 0.1, (3, 3))
    dirs = np.column_stack([rng.uniform(-0.2, 0.2, (3, 2)), np.ones(3)])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    points, deltas = vol.stratified_samples(origins, dirs, 0.3, 1.1, 5, jitter=False)
    interp = vol.interpolation_matrix((3, 3, 3), points)

    def fn(t):
        raw = ad.reshape(ad.spmm(interp, ad.reshape(t["density"], (-1, 1))), (3, 5))
        values = ad.reshape(ad.spmm(interp, ad.reshape(t["feature"], (-1, 2))), (3, 5, 2))
        return vol.render_quantity(vol.render_weights(raw, deltas), values)

    return {"density": rng.standard_normal((3, 3, 3, 1)), "feature": rng.standard_normal((3, 3, 3, 2))}, fn


def case_total_variation(rng):
    return {"grid": rng.standard_normal((3, 4, 2, 2))}, lambda t: vol.total_variation(t["grid"])


def case_distill(rng):
    rgb_gt = rng.uniform(0, 1, (4, 3))
    feat_gt = rng.standard_normal((4, 5))
    return ({"rgb": rng.uniform(0, 1, (4, 3)), "features": rng.standard_normal((4, 5))},
            lambda t: sem.distill_loss(t["rgb"], rgb_gt, t["features"], feat_gt))


def case_relevance(rng):
    return ({"features": rng.standard_normal((4, 6)), "text": _unit_rows(rng, 3, 6)},
            lambda t: sem.relevance_logits(t["features"], t["text"]))


def case_pseudo_label(rng):
    labels = rng.standard_normal((4, 6))
    labels = np.exp(labels) / np.exp(labels).sum(axis=1, keepdims=True)
    return {"labels": labels, "text": _unit_rows(rng, 3, 6)}, lambda t: sem.pseudo_label(t["labels"], t["text"])


def case_ensemble_ce(rng):
    target = rng.dirichlet(np.ones(3), size=4)
    return ({"target": target, "z_dense": rng.uniform(-1, 1, (4, 3)), "z_rendered": rng.uniform(-1, 1, (4, 3))},
            lambda t: sem.ensemble_ce_loss(t["target"], t["z_dense"], t["z_rendered"], gamma=0.5))


def case_ensemble_ce_chain(rng):
    """Pseudo-label from a label distribution feeding the ensemble loss."""
    text = _unit_rows(rng, 3, 5)
    labels = rng.dirichlet(np.ones(5), size=4)
    return ({"labels": labels, "z_dense": rng.uniform(-1, 1, (4, 3)), "z_rendered": rng.uniform(-1, 1, (4, 3))},
            lambda t: sem.ensemble_ce_loss(sem.pseudo_label(t["labels"], text), t["z_dense"], t["z_rendered"]))


def case_aug(rng):
    return ({"logits": rng.uniform(-1, 1, (5, 3)), "targets": rng.uniform(0, 1, (5, 3))},
            lambda t: sem.aug_loss(t["logits"], t["targets"]))


def case_vanilla_attention(rng):
    inputs = _attention_inputs(rng)
    return inputs, lambda t: attn.vanilla_attention(t["features"], _attention_params(t))


def case_lrtq_normalized(rng):
    return _attention_inputs(rng), lambda t: attn.lrtq_attention(t["features"], _attention_params(t))


def case_lrtq_literal(rng):
    return (_attention_inputs(rng),
            lambda t: attn.lrtq_attention(t["features"], _attention_params(t, variant="literal")))


def case_lrtq_scaled(rng):
    return (_attention_inputs(rng),
            lambda t: attn.lrtq_attention(t["features"], _attention_params(t, scaled=True)))


def case_adapter_forward(rng):
    return _adapter_inputs(rng), lambda t: attn.adapter_forward(t["features"], _adapter(t))[1]


def case_self_cross(rng):
    inputs = _adapter_inputs(rng)
    inputs["rendered"] = rng.standard_normal(inputs["features"].shape)
    return inputs, lambda t: attn.self_cross_loss(t["features"], t["rendered"], _adapter(t))


def case_reconstruction(rng):
    return _adapter_inputs(rng), lambda t: attn.reconstruction_loss(t["features"], _adapter(t))


SUITE: dict[str, Builder] = {
    "render_weights": case_render_weights,
    "render_quantity": case_render_quantity,
    "render_label": case_render_label,
    "trilinear_lookup": case_trilinear,
    "ray_rendering": case_ray_rendering,
    "total_variation": case_total_variation,
    "distill_loss": case_distill,
    "relevance_logits": case_relevance,
    "pseudo_label": case_pseudo_label,
    "ensemble_ce_loss": case_ensemble_ce,
    "ensemble_ce_chain": case_ensemble_ce_chain,
    "aug_loss": case_aug,
    "vanilla_attention": case_vanilla_attention,
    "lrtq_normalized": case_lrtq_normalized,
    "lrtq_literal": case_lrtq_literal,
    "lrtq_scaled": case_lrtq_scaled,
    "adapter_forward": case_adapter_forward,
    "self_cross_loss": case_self_cross,
    "reconstruction_loss": case_reconstruction,
}


def run_case(name: str, seed: int, tol: float = 1e-4, h: float = 1e-5) -> GradResult:
    rng = np.random.default_rng([seed, sum(name.encode())])
    arrays, fn = SUITE[name](rng)
    errors = check_gradients(fn, arrays, rng, h)
    worst = max(errors, key=errors.get)
    return GradResult(name, seed, errors[worst], worst, errors[worst] <= tol)


def run_suite(seeds: int = 20, cases=None, tol: float = 1e-4, h: float = 1e-5) -> list[GradResult]:
    names = list(SUITE) if cases is None else list(cases)
    for name in names:
        if name not in SUITE:
            raise KeyError(f"unknown gradient case '{name}'")
    return [run_case(name, seed, tol, h) for name in names for seed in range(seeds)]
