"""The radiance model: VM field + appearance decoder + rank state."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .decoder import AppearanceDecoder
from .vm_grid import RankState, TensorField


@dataclass
class RadianceModel:
    """Everything needed to render: grids, decoder, masks and density settings.

    Density is ``softplus(raw + density_shift)`` and the renderer multiplies
    step sizes by ``distance_scale``.
    """

    field: TensorField
    decoder: AppearanceDecoder
    state: RankState
    density_shift: float = -10.0
    distance_scale: float = 25.0
    background: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self) -> None:
        self.background = np.asarray(self.background, dtype=np.float64)
        if self.state.R != self.field.rank_sigma:
            raise ValueError("rank state does not match the field")
        if self.decoder.feature_dim != self.field.app_feature_dim:
            raise ValueError("decoder input width does not match the appearance features")

    @property
    def rank(self) -> int:
        return self.field.rank_sigma

    @classmethod
    def create(
        cls,
        resolution,
        bbox,
        rank: int,
        rng: np.random.Generator | None = None,
        *,
        app_feature_dim: int = 27,
        r_d: int = 1,
        epsilon: float = 1e-4,
        init_scale: float = 0.1,
        hidden: int = 128,
        dir_freqs: int = 0,
        density_shift: float = -10.0,
        distance_scale: float = 25.0,
        background=(1.0, 1.0, 1.0),
    ) -> "RadianceModel":
        rng = np.random.default_rng() if rng is None else rng
        fld = TensorField.random(resolution, bbox, rank, app_feature_dim, rng, scale=init_scale)
        dec = AppearanceDecoder.init(app_feature_dim, rng, hidden=hidden, dir_freqs=dir_freqs)
        return cls(
            fld, dec, RankState(r_d=r_d, R=rank, epsilon=epsilon),
            density_shift, distance_scale, np.asarray(background, dtype=np.float64),
        )

    def copy(self) -> "RadianceModel":
        return RadianceModel(
            self.field.copy(),
            self.decoder.copy(),
            RankState(self.state.r_d, self.state.R, self.state.epsilon, self.state.last_inc_iter),
            self.density_shift,
            self.distance_scale,
            self.background.copy(),
        )


GRID_PARAM_IDS = (
    "geo_vec_x", "geo_vec_y", "geo_vec_z",
    "geo_mat_yz", "geo_mat_xz", "geo_mat_xy",
    "app_vec_x", "app_vec_y", "app_vec_z",
    "app_mat_yz", "app_mat_xz", "app_mat_xy",
)
NETWORK_PARAM_IDS = ("basis", "dec_w1", "dec_b1", "dec_w2", "dec_b2")


def field_arrays(f: TensorField) -> dict[str, np.ndarray]:
    """Grid factors and basis by id (aliases)."""
    out = {}
    for i, axis in enumerate("xyz"):
        out[f"geo_vec_{axis}"] = f.geo_vectors[i]
        out[f"app_vec_{axis}"] = f.app_vectors[i]
    for i, plane in enumerate(("yz", "xz", "xy")):
        out[f"geo_mat_{plane}"] = f.geo_matrices[i]
        out[f"app_mat_{plane}"] = f.app_matrices[i]
    out["basis"] = f.basis
    return out


def field_with_arrays(f: TensorField, arrays: dict[str, np.ndarray]) -> TensorField:
    """A field on ``f``'s lattice holding the given per-id arrays (e.g. optimizer moments)."""
    planes = ("yz", "xz", "xy")
    return TensorField(
        f.resolution,
        f.bbox.copy(),
        [arrays[f"geo_vec_{a}"] for a in "xyz"],
        [arrays[f"geo_mat_{p}"] for p in planes],
        [arrays[f"app_vec_{a}"] for a in "xyz"],
        [arrays[f"app_mat_{p}"] for p in planes],
        arrays["basis"],
    )


def model_arrays(model: RadianceModel) -> dict[str, np.ndarray]:
    """Learnable arrays by id. The returned arrays alias the model's storage."""
    d = model.decoder
    out = field_arrays(model.field)
    out.update(dec_w1=d.w1, dec_b1=d.b1, dec_w2=d.w2, dec_b2=d.b2)
    return {k: out[k] for k in GRID_PARAM_IDS + NETWORK_PARAM_IDS}
