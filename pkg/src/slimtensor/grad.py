"""Hand-written reverse pass over the fixed render pipeline, plus Adam.

The pipeline is static::

    masked factors -> line/plane interpolation -> softplus density
                   -> basis -> decoder MLP      -> compositing -> MSE

so instead of a general autodiff graph, :func:`forward` records every
intermediate on a :class:`Tape` and :func:`backward` walks it in reverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import encode_direction, sigmoid
from .model import GRID_PARAM_IDS, RadianceModel, model_arrays
from .renderer import Composite, composite, composite_backward, sample_along_rays
from .vm_grid import Interpolator, build_interpolator, component_masks


@dataclass
class Tape:
    model: RadianceModel
    n_rays: int
    n_samples: int
    delta: np.ndarray  # step per ray, already multiplied by distance_scale
    interp: Interpolator
    geo_masks: np.ndarray
    app_masks: np.ndarray
    geo_line: list[np.ndarray]
    geo_plane: list[np.ndarray]
    z_sigma: np.ndarray
    sigma: np.ndarray
    app_line: list[np.ndarray]
    app_plane: list[np.ndarray]
    stacked: np.ndarray
    features: np.ndarray
    dec_in: np.ndarray
    hidden: np.ndarray  # post-ReLU; positive exactly where the pre-activation is
    rgb: np.ndarray
    comp: Composite
    targets: np.ndarray | None = None
    loss: float | None = None
    consumed: bool = False

    @property
    def color(self) -> np.ndarray:
        return self.comp.color


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _masked(arrays: list[np.ndarray], mask: np.ndarray) -> list[np.ndarray]:
    return [a * mask for a in arrays]


def forward(
    model: RadianceModel,
    origins: np.ndarray,
    directions: np.ndarray,
    n_samples: int,
    offsets: np.ndarray | None = None,
    targets: np.ndarray | None = None,
    interp: Interpolator | None = None,
) -> Tape:
    """Render a ray batch and record everything the reverse pass needs.

    Sample positions depend only on the rays, the bbox and ``offsets``, so a
    caller re-evaluating the same batch with perturbed parameters (finite
    differences) may pass the ``interp`` of an earlier tape to skip rebuilding
    the interpolation operators.
    """
    fld, dec = model.field, model.decoder
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    Q, N = origins.shape[0], n_samples
    _, delta, pts = sample_along_rays(origins, directions, fld.bbox, N, offsets)
    P = Q * N
    if interp is None:
        it = build_interpolator(fld, pts.reshape(-1, 3))
    elif interp.coords.shape[0] != P:
        raise ValueError("cached interpolator does not match this batch")
    else:
        it = interp
    gmask, amask = component_masks(model.state)

    gv, gm = _masked(fld.geo_vectors, gmask), _masked(fld.geo_matrices, gmask)
    geo_line = [it.lines[a] @ gv[a] for a in range(3)]
    geo_plane = [it.planes[a] @ gm[a].reshape(-1, fld.rank_sigma) for a in range(3)]
    raw = sum((geo_line[a] * geo_plane[a]).sum(axis=1) for a in range(3))
    z_sigma = raw + model.density_shift
    sigma = softplus(z_sigma) * it.inside

    av, am = _masked(fld.app_vectors, amask), _masked(fld.app_matrices, amask)
    app_line = [it.lines[a] @ av[a] for a in range(3)]
    app_plane = [it.planes[a] @ am[a].reshape(-1, fld.rank_c) for a in range(3)]
    stacked = np.empty((P, fld.rank_c, 3))
    for a in range(3):
        np.multiply(app_line[a], app_plane[a], out=stacked[:, :, a])
    stacked = stacked.reshape(P, -1)
    feats = stacked @ fld.basis.T

    dirs = np.repeat(directions, N, axis=0)
    dec_in = np.concatenate([feats, encode_direction(dirs, dec.dir_freqs)], axis=1)
    # in place: the (P, hidden) arrays dominate memory traffic
    hid = dec_in @ dec.w1.T
    hid += dec.b1
    np.maximum(hid, 0.0, out=hid)
    rgb = sigmoid(hid @ dec.w2.T + dec.b2)

    delta_eff = delta * model.distance_scale
    comp = composite(sigma.reshape(Q, N), rgb.reshape(Q, N, 3), delta_eff, model.background)
    tape = Tape(
        model, Q, N, delta_eff, it, gmask, amask, geo_line, geo_plane, z_sigma, sigma,
        app_line, app_plane, stacked, feats, dec_in, hid, rgb, comp,
    )
    if targets is not None:
        tape.targets = np.asarray(targets, dtype=np.float64).reshape(Q, 3)
        tape.loss = float(np.mean(np.sum((tape.targets - comp.color) ** 2, axis=1)))
    return tape


def backward(tape: Tape | None, effective: dict | None = None) -> dict[str, np.ndarray]:
    """Gradients of the batch MSE w.r.t. every learnable array of the model.

    Factor gradients are w.r.t. the unmasked (learnable) storage, i.e. the
    gradient w.r.t. the masked factor times the mask. Pass a dict as
    ``effective`` to also receive gradients w.r.t. the masked factors and,
    under ``"features"``, w.r.t. the per-sample appearance features (P, F).
    """
    if tape is None or tape.targets is None:
        raise RuntimeError("backward() needs a forward pass with targets")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward()")
    tape.consumed = True
    model = tape.model
    fld, dec = model.field, model.decoder
    Q, N = tape.n_rays, tape.n_samples
    P = Q * N
    it = tape.interp

    dcolor = 2.0 * (tape.comp.color - tape.targets) / Q
    dsigma, drgb = composite_backward(tape.comp, tape.rgb.reshape(Q, N, 3), tape.delta, dcolor)
    dsigma = dsigma.reshape(P)
    drgb = drgb.reshape(P, 3)

    grads: dict[str, np.ndarray] = {}
    eff: dict[str, np.ndarray] = {}

    # decoder
    rgb = tape.rgb
    dz2 = drgb * rgb * (1.0 - rgb)
    grads["dec_w2"] = dz2.T @ tape.hidden
    grads["dec_b2"] = dz2.sum(axis=0)
    dz1 = dz2 @ dec.w2
    dz1 *= tape.hidden > 0
    grads["dec_w1"] = dz1.T @ tape.dec_in
    grads["dec_b1"] = dz1.sum(axis=0)
    dfeat = dz1 @ dec.w1[:, : dec.feature_dim]
    eff["features"] = dfeat

    # basis and appearance factors
    grads["basis"] = dfeat.T @ tape.stacked
    dprod = (dfeat @ fld.basis).reshape(P, fld.rank_c, 3)
    for a, (axis, plane) in enumerate(zip("xyz", ("yz", "xz", "xy"))):
        dp = dprod[:, :, a]
        dv = it.lines[a].T @ (dp * tape.app_plane[a])
        dm = (it.planes[a].T @ (dp * tape.app_line[a])).reshape(fld.app_matrices[a].shape)
        eff[f"app_vec_{axis}"], eff[f"app_mat_{plane}"] = dv, dm
        grads[f"app_vec_{axis}"] = dv * tape.app_masks
        grads[f"app_mat_{plane}"] = dm * tape.app_masks

    # density
    dz = dsigma * sigmoid(tape.z_sigma) * it.inside
    for a, (axis, plane) in enumerate(zip("xyz", ("yz", "xz", "xy"))):
        dv = it.lines[a].T @ (dz[:, None] * tape.geo_plane[a])
        dm = (it.planes[a].T @ (dz[:, None] * tape.geo_line[a])).reshape(fld.geo_matrices[a].shape)
        eff[f"geo_vec_{axis}"], eff[f"geo_mat_{plane}"] = dv, dm
        grads[f"geo_vec_{axis}"] = dv * tape.geo_masks
        grads[f"geo_mat_{plane}"] = dm * tape.geo_masks

    if effective is not None:
        effective.update(eff)
    return grads


# --- parameters and optimiser ----------------------------------------------


@dataclass
class Param:
    id: str
    value: np.ndarray  # aliases model storage
    group: str  # "grid" or "network"
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    step: int = 0

    def __post_init__(self) -> None:
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


class ParamSet:
    """Registry of a model's learnable arrays with gradient and Adam buffers."""

    def __init__(self, params: list[Param]):
        ids = [p.id for p in params]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate parameter ids")
        self._params = {p.id: p for p in params}

    @classmethod
    def from_model(cls, model: RadianceModel, previous: "ParamSet | None" = None) -> "ParamSet":
        """Register the model's arrays.

        Optimizer state carries over from ``previous`` for arrays that are the
        same objects as before; resized arrays (after upsampling or a bbox
        shrink) start fresh.
        """
        params = []
        for pid, arr in model_arrays(model).items():
            group = "grid" if pid in GRID_PARAM_IDS else "network"
            old = previous._params.get(pid) if previous is not None else None
            if old is not None and old.value is arr:
                params.append(old)
            else:
                params.append(Param(pid, arr, group))
        return cls(params)

    def __getitem__(self, pid: str) -> Param:
        return self._params[pid]

    def __iter__(self):
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def ids(self) -> list[str]:
        return list(self._params)

    def accumulate(self, grads: dict[str, np.ndarray]) -> None:
        for pid, g in grads.items():
            p = self._params[pid]
            if g.shape != p.value.shape:
                raise ValueError(f"gradient for {pid} has shape {g.shape}, expected {p.value.shape}")
            p.grad += g

    def zero_grad(self) -> None:
        for p in self:
            p.grad[...] = 0.0


@dataclass
class AdamConfig:
    lr_grid: float = 0.02
    lr_network: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


def adam_step(params: ParamSet, cfg: AdamConfig) -> None:
    """One bias-corrected Adam update of every parameter, then zero the gradients.

    Each parameter keeps its own step count so re-registered (resized) arrays
    restart their bias correction.
    """
    for p in params:
        lr = cfg.lr_grid if p.group == "grid" else cfg.lr_network
        p.step += 1
        g = p.grad
        p.m *= cfg.beta1
        p.m += (1.0 - cfg.beta1) * g
        p.v *= cfg.beta2
        p.v += (1.0 - cfg.beta2) * g * g
        m_hat = p.m / (1.0 - cfg.beta1**p.step)
        v_hat = p.v / (1.0 - cfg.beta2**p.step)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        g[...] = 0.0
