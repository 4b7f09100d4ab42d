"""Empirical checks of the gradient bounds that explain slimmability.

Appearance grid elements are taken in feature space: element ``(i, f)`` is
channel ``f`` of the dense feature grid at node ``i``. The features at a
sample are the trilinear blend of node features, so perturbing an element by
``h`` moves the sample features by ``y_i h e_f`` where ``y_i`` is the node's
interpolation weight. Every component contributes additively to that grid, so
the derivative with respect to a component's element equals the derivative
with respect to the summed grid.

* Lemma 1: ``|dc/dg| <= K`` with ``K`` the decoder's Lipschitz bound.
* Lemma 2: ``|d theta_q/dg| <= 2 K (sum_n p_q^n) sqrt(theta_q)`` for the
  per-ray squared error ``theta_q``.
* Theorem 1 (report only): ``|dL/dg^r| <= 2 K^2 N^2 p_max^2 sum_i |g^r - g0^r| + eps``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decoder import decode, lipschitz_upper_bound
from .grad import backward, forward, softplus
from .model import RadianceModel
from .renderer import composite, ray_box_intersect, sample_along_rays
from .vm_grid import TensorField, app_stack, apply_masks, build_interpolator, sample_app, sample_geo, trilinear_matrix

REL_TOL = 1e-6


@dataclass
class BoundReport:
    """Per-sample observed quantities against their bounds.

    A sample passes when ``observed <= bound * (1 + rel_tol) + abs_tol``.
    """

    name: str
    observed: np.ndarray
    bounds: np.ndarray
    rel_tol: float = REL_TOL
    abs_tol: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.observed = np.asarray(self.observed, dtype=np.float64)
        self.bounds = np.broadcast_to(np.asarray(self.bounds, dtype=np.float64), self.observed.shape).copy()

    @property
    def n_samples(self) -> int:
        return self.observed.size

    @property
    def bound(self) -> float:
        return float(self.bounds.max()) if self.n_samples else 0.0

    @property
    def max_observed(self) -> float:
        return float(self.observed.max()) if self.n_samples else 0.0

    @property
    def ratios(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            r = self.observed / self.bounds
        return np.where(self.bounds > 0, r, np.where(self.observed > 0, np.inf, 0.0))

    @property
    def margin_ratio(self) -> float:
        """Largest observed/bound ratio (at most 1 on a pass, up to tolerance)."""
        return float(self.ratios.max()) if self.n_samples else 0.0

    @property
    def violations(self) -> int:
        return int(np.sum(self.observed > self.bounds * (1.0 + self.rel_tol) + self.abs_tol))

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{self.name}: {status}  samples={self.n_samples}  violations={self.violations}  "
            f"max_observed={self.max_observed:.4g}  bound={self.bound:.4g}  margin_ratio={self.margin_ratio:.4g}"
        )

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "observed", "bound", "ratio"])
            for k, (o, b, r) in enumerate(zip(self.observed, self.bounds, self.ratios)):
                w.writerow([k, repr(float(o)), repr(float(b)), repr(float(r))])


def random_rays(bbox: np.ndarray, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Rays from a sphere around the box aimed at uniform points inside it."""
    bbox = np.asarray(bbox, dtype=np.float64)
    center = bbox.mean(axis=0)
    radius = 2.0 * np.linalg.norm(bbox[1] - center)
    u = rng.normal(size=(n, 3))
    origins = center + radius * u / np.linalg.norm(u, axis=1, keepdims=True)
    targets = bbox[0] + rng.random((n, 3)) * (bbox[1] - bbox[0])
    d = targets - origins
    return origins, d / np.linalg.norm(d, axis=1, keepdims=True)


def _tent_weights(field: TensorField, coords: np.ndarray, inside: np.ndarray, node: np.ndarray) -> np.ndarray:
    """Trilinear weight of grid ``node`` (3,) or (M, 3) for points at grid ``coords``."""
    w = np.prod(np.maximum(0.0, 1.0 - np.abs(coords - node[..., None, :])), axis=-1)
    return w * inside


def check_lemma1(model: RadianceModel, n_samples: int = 1000, seed: int = 0, h: float = 1e-6) -> BoundReport:
    """Finite-difference ``|dc/dg|`` at random (point, node, channel) triples versus ``K``."""
    rng = np.random.default_rng(seed)
    fld = apply_masks(model.field, model.state)
    dec = model.decoder
    K = lipschitz_upper_bound(dec)
    o, d = random_rays(fld.bbox, n_samples, rng)
    near, far, _ = ray_box_intersect(o, d, fld.bbox)
    x = o + (near + rng.random(n_samples) * (far - near))[:, None] * d
    it = build_interpolator(fld, x)
    m = sample_app(fld, it)
    node = it.base + rng.integers(0, 2, (n_samples, 3))
    y = np.prod(np.maximum(0.0, 1.0 - np.abs(it.coords - node)), axis=1) * it.inside
    ch = rng.integers(0, fld.app_feature_dim, n_samples)
    step = np.zeros_like(m)
    step[np.arange(n_samples), ch] = y * h
    dc = (decode(dec, m + step, d) - decode(dec, m - step, d)) / (2 * h)
    return BoundReport("lemma1", np.linalg.norm(dc, axis=1), np.full(n_samples, K), meta={"K": K})


def check_lemma2(
    model: RadianceModel,
    n_rays: int = 200,
    n_elements: int = 5,
    rays: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    n_samples: int = 64,
    seed: int = 0,
    h: float = 1e-6,
    abs_tol: float = 1e-12,
) -> BoundReport:
    """Finite-difference ``|d theta/dg|`` versus ``2 K sum(p) sqrt(theta)``.

    ``rays`` are ``(origins, directions, target colors)``; without them random
    rays with random target colors are used. Each ray is paired with
    ``n_elements`` grid elements near samples drawn in proportion to their
    compositing weights. ``abs_tol`` absorbs finite-difference round-off when
    both sides are near zero.
    """
    rng = np.random.default_rng(seed)
    fld = apply_masks(model.field, model.state)
    dec = model.decoder
    K = lipschitz_upper_bound(dec)
    if rays is None:
        o, d = random_rays(fld.bbox, n_rays, rng)
        target = rng.random((n_rays, 3))
    else:
        o, d, target = (np.asarray(a, dtype=np.float64) for a in rays)
        pick = rng.choice(o.shape[0], size=n_rays, replace=o.shape[0] < n_rays)
        o, d, target = o[pick], d[pick], target[pick]
    Q, N, F = o.shape[0], n_samples, fld.app_feature_dim

    _, delta, pts = sample_along_rays(o, d, fld.bbox, N)
    it = build_interpolator(fld, pts.reshape(-1, 3))
    sigma = (softplus(sample_geo(fld, it) + model.density_shift) * it.inside).reshape(Q, N)
    feats = sample_app(fld, it).reshape(Q, N, F)
    dirs = np.repeat(d, N, axis=0)
    rgb = decode(dec, feats.reshape(-1, F), dirs).reshape(Q, N, 3)
    comp = composite(sigma, rgb, delta * model.distance_scale, model.background)
    p = comp.weights
    bg_term = comp.residual[:, None] * model.background
    theta = np.sum((target - comp.color) ** 2, axis=1)

    # element choice: a sample (by weight), one of its 8 corner nodes, a channel
    q = np.repeat(np.arange(Q), n_elements)
    probs = p + 1e-12
    probs /= probs.sum(axis=1, keepdims=True)
    n_pick = np.array([rng.choice(N, p=probs[k]) for k in q])
    coords = it.coords.reshape(Q, N, 3)
    inside = it.inside.reshape(Q, N)
    base = it.base.reshape(Q, N, 3)
    node = base[q, n_pick] + rng.integers(0, 2, (q.size, 3))
    ch = rng.integers(0, F, q.size)
    y = _tent_weights(fld, coords[q], inside[q], node)  # (E, N)

    def theta_at(sign: float) -> np.ndarray:
        f2 = feats[q].copy()
        f2[np.arange(q.size), :, ch] += sign * h * y
        c2 = decode(dec, f2.reshape(-1, F), np.repeat(d[q], N, axis=0)).reshape(q.size, N, 3)
        color = np.einsum("en,enc->ec", p[q], c2) + bg_term[q]
        return np.sum((target[q] - color) ** 2, axis=1)

    observed = np.abs(theta_at(1.0) - theta_at(-1.0)) / (2 * h)
    bounds = 2.0 * K * p.sum(axis=1)[q] * np.sqrt(theta[q])
    return BoundReport(
        "lemma2", observed, bounds, abs_tol=abs_tol,
        meta={"K": K, "weight_sums": p.sum(axis=1), "theta": theta},
    )


# --- theorem 1 ---------------------------------------------------------------


def _rank_feature_fields(model: RadianceModel, points: np.ndarray) -> np.ndarray:
    """Per-rank appearance feature contributions at points, shape (R, P, F)."""
    fld = apply_masks(model.field, model.state)
    stack = app_stack(fld, build_interpolator(fld, points))
    return np.stack(
        [stack[:, 9 * r : 9 * r + 9] @ fld.basis[:, 9 * r : 9 * r + 9].T for r in range(fld.rank_sigma)]
    )


def _feature_grid_gradient(model: RadianceModel, rays, n_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """``dL/dG`` on the model's feature grid (nodes, F) and the compositing weights."""
    o, d, c = rays
    tape = forward(model, o, d, n_samples, targets=c)
    eff: dict = {}
    backward(tape, effective=eff)
    _, _, pts = sample_along_rays(o, d, model.field.bbox, n_samples)
    W = trilinear_matrix(model.field, pts.reshape(-1, 3))
    return W.T @ eff["features"], tape.comp.weights


@dataclass
class Theorem1Report:
    ranks: list[int]
    distance: np.ndarray  # sum_i |g^r - g0^r|
    bound: np.ndarray
    observed: float  # max |dL/dg| over grid elements
    eps_proxy: float  # max |dL0/dg0| at the reference
    K: float
    p_max: float
    n_samples: int

    @property
    def margin_ratio(self) -> np.ndarray:
        return np.where(self.bound > 0, self.observed / np.maximum(self.bound, 1e-300), np.inf)

    @property
    def slack(self) -> np.ndarray:
        return self.bound - self.observed

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "distance", "bound", "observed", "margin_ratio", "slack"])
            for k, r in enumerate(self.ranks):
                w.writerow([r, repr(float(self.distance[k])), repr(float(self.bound[k])),
                            repr(self.observed), repr(float(self.margin_ratio[k])), repr(float(self.slack[k]))])

    def summary(self) -> str:
        lines = [
            f"theorem1: K={self.K:.4g} N={self.n_samples} p_max={self.p_max:.4g} "
            f"observed={self.observed:.4g} eps_proxy={self.eps_proxy:.4g}"
        ]
        for k, r in enumerate(self.ranks):
            lines.append(
                f"  rank {r}: distance={self.distance[k]:.4g} bound={self.bound[k]:.4g} "
                f"ratio={self.margin_ratio[k]:.4g}"
            )
        return "\n".join(lines)


def theorem1_terms(
    model: RadianceModel,
    reference: RadianceModel,
    rays: tuple[np.ndarray, np.ndarray, np.ndarray],
    n_samples: int = 64,
) -> Theorem1Report:
    """Per-rank bound terms for a snapshot ``model`` against a converged ``reference``.

    Component distances are summed over the reference grid's nodes and all
    feature channels. The unobservable ``eps`` term is proxied by the largest
    loss gradient at the reference on the same rays. Nothing is asserted.
    """
    if reference.rank < model.rank:
        raise ValueError("reference must have at least the snapshot's rank")
    ref = reference.field
    axes = [np.linspace(ref.bbox[0, a], ref.bbox[1, a], ref.resolution[a]) for a in range(3)]
    nodes = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    g = _rank_feature_fields(model, nodes)
    g0 = _rank_feature_fields(reference, nodes)[: model.rank]
    distance = np.abs(g - g0).sum(axis=(1, 2))

    K = lipschitz_upper_bound(model.decoder)
    grad, weights = _feature_grid_gradient(model, rays, n_samples)
    grad0, _ = _feature_grid_gradient(reference, rays, n_samples)
    p_max = float(weights.max())
    eps = float(np.abs(grad0).max())
    bound = 2.0 * K**2 * n_samples**2 * p_max**2 * distance + eps
    return Theorem1Report(
        list(range(1, model.rank + 1)), distance, bound, float(np.abs(grad).max()), eps, K, p_max, n_samples
    )
