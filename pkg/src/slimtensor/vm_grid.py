"""Vector-Matrix decomposed density and appearance grids.

A :class:`TensorField` stores two VM-decomposed tensors over an axis-aligned
box. Each geometry component ``r`` is

    v_x[r] o M_yz[r] + v_y[r] o M_xz[r] + v_z[r] o M_xy[r]

and each appearance component ``s`` uses the same three products, each routed
to its own column of the basis matrix (columns ``3s``, ``3s+1``, ``3s+2``).
There are ``R`` geometry components and ``3R`` appearance components, so the
basis has ``9R`` columns.

Factor layout (component axis last, so component slicing is a view):

* vectors: ``(n_axis, C)``
* matrices: ``(n_row, n_col, C)`` where the plane paired with axis ``a`` spans
  the other two axes in increasing order (``YZ`` for ``X``, ``XZ`` for ``Y``,
  ``XY`` for ``Z``).

Component indices in this module are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp

# plane axes paired with the vector along axis 0, 1, 2
PLANE_AXES = ((1, 2), (0, 2), (0, 1))


@dataclass
class RankState:
    """Dynamic rank bookkeeping for rank-incremental training."""

    r_d: int
    R: int
    epsilon: float = 1e-4
    last_inc_iter: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.R:
            raise ValueError(f"total rank must be >= 1, got {self.R}")
        if not 1 <= self.r_d <= self.R:
            raise ValueError(f"dynamic rank {self.r_d} outside [1, {self.R}]")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def full(cls, R: int, epsilon: float = 1e-4) -> "RankState":
        return cls(r_d=R, R=R, epsilon=epsilon)


def component_masks(state: RankState) -> tuple[np.ndarray, np.ndarray]:
    """Per-component mask values for the geometry (R) and appearance (3R) factors.

    Live components get 1, the rest get ``epsilon``. The mask multiplies both
    the vector and the matrix of a component, so a masked component's value is
    scaled by ``epsilon**2``.
    """
    geo = np.full(state.R, state.epsilon)
    geo[: state.r_d] = 1.0
    app = np.full(3 * state.R, state.epsilon)
    app[: 3 * state.r_d] = 1.0
    return geo, app


@dataclass
class TensorField:
    resolution: tuple[int, int, int]
    bbox: np.ndarray
    geo_vectors: list[np.ndarray]
    geo_matrices: list[np.ndarray]
    app_vectors: list[np.ndarray]
    app_matrices: list[np.ndarray]
    basis: np.ndarray

    def __post_init__(self) -> None:
        self.resolution = tuple(int(n) for n in self.resolution)
        self.bbox = np.asarray(self.bbox, dtype=np.float64).reshape(2, 3)
        self.validate()

    @property
    def rank_sigma(self) -> int:
        return self.geo_vectors[0].shape[1]

    @property
    def rank_c(self) -> int:
        return self.app_vectors[0].shape[1]

    @property
    def app_feature_dim(self) -> int:
        return self.basis.shape[0]

    def validate(self) -> None:
        res = self.resolution
        if len(res) != 3 or min(res) < 2:
            raise ValueError(f"resolution must be three integers >= 2, got {res}")
        if not np.all(self.bbox[0] < self.bbox[1]):
            raise ValueError(f"degenerate bbox {self.bbox.tolist()}")
        R = self.rank_sigma
        for kind, vecs, mats, C in (
            ("geo", self.geo_vectors, self.geo_matrices, R),
            ("app", self.app_vectors, self.app_matrices, 3 * R),
        ):
            if len(vecs) != 3 or len(mats) != 3:
                raise ValueError(f"{kind}: need three vectors and three matrices")
            for a in range(3):
                b, c = PLANE_AXES[a]
                if vecs[a].shape != (res[a], C):
                    raise ValueError(f"{kind} vector {a} has shape {vecs[a].shape}, expected {(res[a], C)}")
                if mats[a].shape != (res[b], res[c], C):
                    raise ValueError(
                        f"{kind} matrix {a} has shape {mats[a].shape}, expected {(res[b], res[c], C)}"
                    )
        if self.basis.ndim != 2 or self.basis.shape[1] != 9 * R:
            raise ValueError(f"basis must have {9 * R} columns, got shape {self.basis.shape}")

    @classmethod
    def random(
        cls,
        resolution: Sequence[int],
        bbox: np.ndarray,
        rank: int,
        app_feature_dim: int = 27,
        rng: np.random.Generator | None = None,
        scale: float = 0.1,
        basis_scale: float | None = None,
    ) -> "TensorField":
        """Uniform init in ``[-scale/sqrt(R), scale/sqrt(R)]`` for every factor."""
        rng = np.random.default_rng() if rng is None else rng
        res = tuple(int(n) for n in resolution)
        bound = scale / np.sqrt(rank)
        basis_bound = bound if basis_scale is None else basis_scale

        def uni(shape, b=bound):
            return rng.uniform(-b, b, size=shape)

        def factors(C):
            vecs = [uni((res[a], C)) for a in range(3)]
            mats = [uni((res[PLANE_AXES[a][0]], res[PLANE_AXES[a][1]], C)) for a in range(3)]
            return vecs, mats

        gv, gm = factors(rank)
        av, am = factors(3 * rank)
        basis = uni((app_feature_dim, 9 * rank), basis_bound)
        return cls(res, np.asarray(bbox, dtype=np.float64), gv, gm, av, am, basis)

    def copy(self) -> "TensorField":
        return TensorField(
            self.resolution,
            self.bbox.copy(),
            [v.copy() for v in self.geo_vectors],
            [m.copy() for m in self.geo_matrices],
            [v.copy() for v in self.app_vectors],
            [m.copy() for m in self.app_matrices],
            self.basis.copy(),
        )

    def num_factor_params(self) -> int:
        arrays = self.geo_vectors + self.geo_matrices + self.app_vectors + self.app_matrices
        return sum(a.size for a in arrays) + self.basis.size


def apply_masks(field: TensorField, state: RankState) -> TensorField:
    """Return a field whose factors are multiplied by the rank masks.

    The basis is left untouched; it is only ever truncated, never masked.
    """
    if state.R != field.rank_sigma:
        raise ValueError(f"state rank {state.R} != field rank {field.rank_sigma}")
    if state.r_d == state.R:
        return field
    gmask, amask = component_masks(state)
    return replace(
        field,
        geo_vectors=[v * gmask for v in field.geo_vectors],
        geo_matrices=[m * gmask for m in field.geo_matrices],
        app_vectors=[v * amask for v in field.app_vectors],
        app_matrices=[m * amask for m in field.app_matrices],
    )


# --- pointwise evaluation at grid nodes ------------------------------------


def _check_idx(field: TensorField, idx: Sequence[int]) -> tuple[int, int, int]:
    if len(idx) != 3:
        raise IndexError(f"grid index needs three entries, got {idx}")
    out = tuple(int(i) for i in idx)
    for i, n in zip(out, field.resolution):
        if not 0 <= i < n:
            raise IndexError(f"grid index {idx} outside resolution {field.resolution}")
    return out


def _node_products(vecs, mats, idx) -> np.ndarray:
    """Per-component, per-axis products ``v_a[i_a] * M_a[i_b, i_c]``; shape (C, 3)."""
    cols = []
    for a in range(3):
        b, c = PLANE_AXES[a]
        cols.append(vecs[a][idx[a]] * mats[a][idx[b], idx[c]])
    return np.stack(cols, axis=1)


def eval_geo_components(field: TensorField, idx: Sequence[int]) -> np.ndarray:
    """Values of all geometry components at node ``idx``; shape (R,)."""
    idx = _check_idx(field, idx)
    return _node_products(field.geo_vectors, field.geo_matrices, idx).sum(axis=1)


def eval_geo_component(field: TensorField, r: int, idx: Sequence[int]) -> float:
    if not 0 <= r < field.rank_sigma:
        raise IndexError(f"component {r} outside [0, {field.rank_sigma})")
    return float(eval_geo_components(field, idx)[r])


def eval_geo(field: TensorField, idx: Sequence[int]) -> float:
    return float(eval_geo_components(field, idx).sum())


def eval_geo_masked(field: TensorField, state: RankState, idx: Sequence[int]) -> float:
    return eval_geo(apply_masks(field, state), idx)


def eval_app_components(field: TensorField, idx: Sequence[int]) -> np.ndarray:
    """Feature contribution of every appearance component at ``idx``; shape (3R, F)."""
    idx = _check_idx(field, idx)
    prods = _node_products(field.app_vectors, field.app_matrices, idx)  # (3R, 3)
    B = field.basis.reshape(field.app_feature_dim, field.rank_c, 3)
    return np.einsum("sa,fsa->sf", prods, B)


def eval_app(field: TensorField, idx: Sequence[int]) -> np.ndarray:
    return eval_app_components(field, idx).sum(axis=0)


def eval_app_masked(field: TensorField, state: RankState, idx: Sequence[int]) -> np.ndarray:
    return eval_app(apply_masks(field, state), idx)


# --- dense materialisation -------------------------------------------------


def dense_geo_components(field: TensorField) -> np.ndarray:
    """Dense per-component geometry tensor, shape (R, I, J, K)."""
    vx, vy, vz = field.geo_vectors
    myz, mxz, mxy = field.geo_matrices
    return (
        np.einsum("ir,jkr->rijk", vx, myz)
        + np.einsum("jr,ikr->rijk", vy, mxz)
        + np.einsum("kr,ijr->rijk", vz, mxy)
    )


def dense_geo(field: TensorField) -> np.ndarray:
    return dense_geo_components(field).sum(axis=0)


def dense_app_components(field: TensorField) -> np.ndarray:
    """Dense per-component appearance tensor, shape (3R, I, J, K, F)."""
    vx, vy, vz = field.app_vectors
    myz, mxz, mxy = field.app_matrices
    B = field.basis.reshape(field.app_feature_dim, field.rank_c, 3)
    return (
        np.einsum("is,jks,fs->sijkf", vx, myz, B[:, :, 0])
        + np.einsum("js,iks,fs->sijkf", vy, mxz, B[:, :, 1])
        + np.einsum("ks,ijs,fs->sijkf", vz, mxy, B[:, :, 2])
    )


def dense_app(field: TensorField) -> np.ndarray:
    return dense_app_components(field).sum(axis=0)


# --- continuous sampling ---------------------------------------------------


@dataclass
class Interpolator:
    """Sparse linear/bilinear interpolation operators for a set of points.

    ``lines[a]`` maps the vector along axis ``a`` to the points (shape
    ``(P, n_a)``), ``planes[a]`` maps the flattened matrix paired with axis
    ``a`` (shape ``(P, n_b * n_c)``). Rows of points outside the bbox are zero.
    Because trilinear weights factor into a linear and a bilinear part, the
    product of the two interpolants is exactly trilinear interpolation of the
    dense component.
    """

    lines: list[sp.csr_matrix]
    planes: list[sp.csr_matrix]
    inside: np.ndarray
    coords: np.ndarray  # continuous node coordinates, shape (P, 3)
    base: np.ndarray  # lower corner index per axis, shape (P, 3)
    frac: np.ndarray  # fractional offset per axis, shape (P, 3)


def to_grid_coords(field: TensorField, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lo, hi = field.bbox
    n = np.asarray(field.resolution, dtype=np.float64)
    return (points - lo) / (hi - lo) * (n - 1)


def build_interpolator(field: TensorField, points: np.ndarray) -> Interpolator:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    P = points.shape[0]
    lo, hi = field.bbox
    inside = np.all((points >= lo) & (points <= hi), axis=1)
    u = to_grid_coords(field, points)
    n = np.asarray(field.resolution)
    base = np.clip(np.floor(u), 0, n - 2).astype(np.int64)
    frac = np.where(inside[:, None], u - base, 0.0)
    keep = inside.astype(np.float64)

    lines = []
    indptr2 = np.arange(0, 2 * P + 1, 2)
    for a in range(3):
        w = np.stack([(1.0 - frac[:, a]) * keep, frac[:, a] * keep], axis=1).ravel()
        cols = np.stack([base[:, a], base[:, a] + 1], axis=1).ravel()
        lines.append(sp.csr_matrix((w, cols, indptr2), shape=(P, n[a])))

    planes = []
    indptr4 = np.arange(0, 4 * P + 1, 4)
    for a in range(3):
        b, c = PLANE_AXES[a]
        fb, fc = frac[:, b], frac[:, c]
        ib, ic = base[:, b], base[:, c]
        nc = n[c]
        w = np.stack(
            [(1 - fb) * (1 - fc), (1 - fb) * fc, fb * (1 - fc), fb * fc], axis=1
        ) * keep[:, None]
        cols = np.stack(
            [ib * nc + ic, ib * nc + ic + 1, (ib + 1) * nc + ic, (ib + 1) * nc + ic + 1], axis=1
        )
        planes.append(sp.csr_matrix((w.ravel(), cols.ravel(), indptr4), shape=(P, n[b] * nc)))
    return Interpolator(lines, planes, inside, u, base, frac)


def trilinear_matrix(field: TensorField, points: np.ndarray) -> sp.csr_matrix:
    """Sparse (P, I*J*K) matrix of trilinear weights onto flattened grid nodes.

    Each row holds the eight nonnegative weights of one point and sums to 1
    for points inside the bbox (0 outside).
    """
    it = build_interpolator(field, points)
    P = it.coords.shape[0]
    I, J, K = field.resolution
    keep = it.inside.astype(np.float64)
    ws, cols = [], []
    for di in (0, 1):
        for dj in (0, 1):
            for dk in (0, 1):
                wx = it.frac[:, 0] if di else 1 - it.frac[:, 0]
                wy = it.frac[:, 1] if dj else 1 - it.frac[:, 1]
                wz = it.frac[:, 2] if dk else 1 - it.frac[:, 2]
                ws.append(wx * wy * wz * keep)
                ii, jj, kk = it.base[:, 0] + di, it.base[:, 1] + dj, it.base[:, 2] + dk
                cols.append((ii * J + jj) * K + kk)
    w = np.stack(ws, axis=1).ravel()
    c = np.stack(cols, axis=1).ravel()
    return sp.csr_matrix((w, c, np.arange(0, 8 * P + 1, 8)), shape=(P, I * J * K))


def _axis_products(vecs, mats, it: Interpolator) -> list[np.ndarray]:
    out = []
    for a in range(3):
        lf = it.lines[a] @ vecs[a]
        pf = it.planes[a] @ mats[a].reshape(-1, mats[a].shape[-1])
        out.append(lf * pf)
    return out


def sample_geo(field: TensorField, it: Interpolator) -> np.ndarray:
    """Raw (pre-activation) geometry value at each point; shape (P,)."""
    prods = _axis_products(field.geo_vectors, field.geo_matrices, it)
    return (prods[0] + prods[1] + prods[2]).sum(axis=1)


def app_stack(field: TensorField, it: Interpolator) -> np.ndarray:
    """Per-(component, axis) appearance products, shape (P, 9R), column ``3s+a``."""
    prods = _axis_products(field.app_vectors, field.app_matrices, it)
    return np.stack(prods, axis=2).reshape(it.coords.shape[0], -1)


def sample_app(field: TensorField, it: Interpolator) -> np.ndarray:
    """Appearance features at each point; shape (P, F)."""
    return app_stack(field, it) @ field.basis.T


def sample_trilinear(
    field: TensorField,
    state: RankState | None,
    x: np.ndarray,
    grid_kind: str = "geo",
) -> np.ndarray:
    """Masked trilinear sample of the geometry or appearance grid.

    ``x`` may be a single point (3,) or a batch (P, 3). Points outside the bbox
    sample to zero.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    f = field if state is None else apply_masks(field, state)
    it = build_interpolator(f, x)
    if grid_kind == "geo":
        out = sample_geo(f, it)
    elif grid_kind == "app":
        out = sample_app(f, it)
    else:
        raise ValueError(f"grid_kind must be 'geo' or 'app', got {grid_kind!r}")
    return out[0] if single else out


# --- structural edits ------------------------------------------------------


def truncate_rank(field: TensorField, r: int) -> TensorField:
    """Keep the first ``r`` geometry and ``3r`` appearance components (copies)."""
    R = field.rank_sigma
    if not 1 <= r <= R:
        raise ValueError(f"retained rank {r} outside [1, {R}]")
    return TensorField(
        field.resolution,
        field.bbox.copy(),
        [v[:, :r].copy() for v in field.geo_vectors],
        [m[..., :r].copy() for m in field.geo_matrices],
        [v[:, : 3 * r].copy() for v in field.app_vectors],
        [m[..., : 3 * r].copy() for m in field.app_matrices],
        field.basis[:, : 9 * r].copy(),
    )


def linear_resample_matrix(positions: np.ndarray, n_old: int) -> np.ndarray:
    """Dense (len(positions), n_old) matrix sampling a node vector at fractional indices."""
    positions = np.asarray(positions, dtype=np.float64)
    base = np.clip(np.floor(positions), 0, n_old - 2).astype(np.int64)
    frac = positions - base
    A = np.zeros((positions.size, n_old))
    rows = np.arange(positions.size)
    np.add.at(A, (rows, base), 1.0 - frac)
    np.add.at(A, (rows, base + 1), frac)
    return A


def resample(field: TensorField, new_bbox: np.ndarray, new_resolution: Sequence[int]) -> TensorField:
    """Resample every factor onto a new node lattice spanning ``new_bbox``."""
    new_bbox = np.asarray(new_bbox, dtype=np.float64).reshape(2, 3)
    new_res = tuple(int(n) for n in new_resolution)
    lo, hi = field.bbox
    mats_1d = []
    for a in range(3):
        world = np.linspace(new_bbox[0, a], new_bbox[1, a], new_res[a])
        pos = (world - lo[a]) / (hi[a] - lo[a]) * (field.resolution[a] - 1)
        # clamp round-off at the borders
        pos = np.clip(pos, 0.0, field.resolution[a] - 1)
        mats_1d.append(linear_resample_matrix(pos, field.resolution[a]))

    def vecs(vs):
        return [mats_1d[a] @ vs[a] for a in range(3)]

    def planes(ms):
        out = []
        for a in range(3):
            b, c = PLANE_AXES[a]
            out.append(np.einsum("ib,jc,bcr->ijr", mats_1d[b], mats_1d[c], ms[a], optimize=True))
        return out

    return TensorField(
        new_res,
        new_bbox.copy(),
        vecs(field.geo_vectors),
        planes(field.geo_matrices),
        vecs(field.app_vectors),
        planes(field.app_matrices),
        field.basis.copy(),
    )


def upsample(field: TensorField, new_resolution: Sequence[int]) -> TensorField:
    new_res = tuple(int(n) for n in new_resolution)
    if len(new_res) != 3 or any(n < o for n, o in zip(new_res, field.resolution)):
        raise ValueError(f"cannot shrink resolution {field.resolution} -> {new_res}")
    if new_res == field.resolution:
        return field.copy()
    return resample(field, field.bbox, new_res)


def shrink_bbox(
    field: TensorField, new_bbox: np.ndarray, new_resolution: Sequence[int] | None = None
) -> TensorField:
    """Restrict the field to a sub-box, resampling factors onto the new lattice.

    The resolution is kept unless ``new_resolution`` is given, so shrinking
    the box refines the voxel size.
    """
    new_bbox = np.asarray(new_bbox, dtype=np.float64).reshape(2, 3)
    lo, hi = field.bbox
    tol = 1e-12 * np.max(hi - lo)
    if np.any(new_bbox[0] < lo - tol) or np.any(new_bbox[1] > hi + tol):
        raise ValueError(f"new bbox {new_bbox.tolist()} not contained in {field.bbox.tolist()}")
    if not np.all(new_bbox[0] < new_bbox[1]):
        raise ValueError(f"degenerate bbox {new_bbox.tolist()}")
    res = field.resolution if new_resolution is None else new_resolution
    if np.array_equal(new_bbox, field.bbox) and tuple(res) == field.resolution:
        return field.copy()
    return resample(field, np.clip(new_bbox, lo, hi), res)
