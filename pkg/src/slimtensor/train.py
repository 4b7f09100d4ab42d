"""Rank-incremental training (TRaIn) and the simultaneous-rank baseline.

Training starts with one live component (``r_d = 1``); every other component
is masked by ``epsilon``. After each iteration the relative change of the
batch loss is compared with ``upsilon`` and, when it is exceeded (and at
least ``eta`` iterations have passed since the last increment), one more
component is unmasked. The baseline mode keeps every component live from the
first iteration.
"""

from __future__ import annotations

import configparser
import csv
import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .grad import AdamConfig, ParamSet, adam_step, backward, forward
from .model import RadianceModel, field_arrays, field_with_arrays
from .scene import Dataset
from .vm_grid import RankState, apply_masks, component_masks, dense_geo, shrink_bbox, upsample

log = logging.getLogger(__name__)

MODES = ("train_trains", "baseline_simultaneous")
_MODE_ALIASES = {"trains": "train_trains", "train": "train_trains", "baseline": "baseline_simultaneous"}


@dataclass
class TrainConfig:
    max_iter: int = 5000
    upsilon: float = 0.4
    eta: int = 0
    epsilon: float = 1e-4
    batch_size: int = 256
    n_samples: int = 64
    rank: int = 8
    resolution_init: int = 16
    resolution_final: int = 32
    upsample_iters: tuple[int, ...] = (1000, 1500, 2000)
    shrink_iters: tuple[int, ...] = (1200,)
    lr_grid: float = 0.02
    lr_network: float = 1e-3
    lr_decay: float = 0.1  # learning rates fall exponentially to this fraction by max_iter
    seed: int = 0
    mode: str = "train_trains"
    gate_window: int = 1
    app_feature_dim: int = 27
    dir_freqs: int = 0
    hidden: int = 128
    init_scale: float = 0.1
    density_shift: float = -10.0
    distance_scale: float = 25.0

    def __post_init__(self) -> None:
        self.mode = _MODE_ALIASES.get(self.mode, self.mode)
        self.upsample_iters = tuple(int(i) for i in self.upsample_iters)
        self.shrink_iters = tuple(int(i) for i in self.shrink_iters)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_iter <= 0:
            raise ValueError("max_iter must be positive")
        if self.upsilon < 0 or self.eta < 0:
            raise ValueError("upsilon and eta must be nonnegative")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.gate_window < 1:
            raise ValueError("gate_window must be >= 1")
        if self.resolution_final < self.resolution_init:
            raise ValueError("resolution_final must be >= resolution_init")

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(lr_grid=self.lr_grid, lr_network=self.lr_network)

    def adam_at(self, it: int) -> AdamConfig:
        """Adam settings for 1-based iteration ``it`` under the exponential decay."""
        f = self.lr_decay ** ((it - 1) / self.max_iter)
        return replace(self.adam, lr_grid=self.lr_grid * f, lr_network=self.lr_network * f)

    def upsample_schedule(self) -> dict[int, int]:
        """Iteration -> per-axis resolution, log-spaced from init to final."""
        n = len(self.upsample_iters)
        if n == 0:
            return {}
        res = np.exp(np.linspace(np.log(self.resolution_init), np.log(self.resolution_final), n + 1))[1:]
        return {it: int(round(r)) for it, r in zip(self.upsample_iters, res)}

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def load_config(path: str | Path, **overrides) -> TrainConfig:
    """Read ``key = value`` pairs from the ``[train]`` section of an INI file.

    Values are parsed as JSON where possible (numbers, lists, quoted strings)
    and otherwise kept as bare strings. Keyword overrides win over the file.
    """
    parser = configparser.ConfigParser()
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = "[train]\n" + text
    parser.read_string(text)
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    section = parser["train"] if parser.has_section("train") else {}
    for key, raw in section.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        try:
            values[key] = json.loads(raw)
        except json.JSONDecodeError:
            values[key] = raw
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    lines = ["[train]"]
    for key, value in cfg.to_dict().items():
        if isinstance(value, tuple):
            value = list(value)
        lines.append(f"{key} = {json.dumps(value)}")
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class LossHistory:
    iterations: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    ranks: list[int] = field(default_factory=list)
    increments: list[tuple[int, int]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.iterations)

    def record(self, it: int, loss: float, r_d: int) -> None:
        self.iterations.append(it)
        self.losses.append(loss)
        self.ranks.append(r_d)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss", "r_d"])
            for it, loss, r in zip(self.iterations, self.losses, self.ranks):
                w.writerow([it, repr(loss), r])

    @classmethod
    def from_csv(cls, path: str | Path) -> "LossHistory":
        hist = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                r = int(row["r_d"])
                it = int(row["iteration"])
                if hist.ranks and r > hist.ranks[-1]:
                    hist.increments.append((it, r))
                hist.record(it, float(row["loss"]), r)
        return hist


def should_increment(L_prev: float, L_cur: float, upsilon: float, it: int, last_inc: int, eta: int) -> bool:
    """Rank-increment gate: relative loss change above ``upsilon`` and the
    ``eta`` spacing satisfied. The caller checks ``r_d < R``."""
    if not L_cur > 0:
        raise ValueError(f"current loss must be positive, got {L_cur}")
    return abs(L_prev - L_cur) / L_cur > upsilon and it - last_inc > eta


def update_masks(state: RankState) -> tuple[np.ndarray, np.ndarray]:
    """Mask vectors for the current dynamic rank (geometry R, appearance 3R)."""
    return component_masks(state)


class GateLoss:
    """Exponential moving average of the batch loss; window 1 passes values through."""

    def __init__(self, window: int = 1):
        self.alpha = 2.0 / (window + 1.0)
        self.value: float | None = None

    def update(self, loss: float) -> float:
        self.value = loss if self.value is None else self.alpha * loss + (1 - self.alpha) * self.value
        return self.value


def eval_gate_loss(model: RadianceModel, origins, directions, colors, n_samples: int, offsets=None) -> float:
    """Batch MSE used by the rank gate."""
    return forward(model, origins, directions, n_samples, offsets=offsets, targets=colors).loss


@dataclass
class RayData:
    origins: np.ndarray
    directions: np.ndarray
    colors: np.ndarray
    bbox: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.ones(3))

    @classmethod
    def from_dataset(cls, ds: Dataset, split: str = "train") -> "RayData":
        o, d, c = ds.rays(split)
        return cls(o, d, c, np.asarray(ds.bbox, dtype=np.float64), np.asarray(ds.background, dtype=np.float64))


def occupied_bbox(model: RadianceModel, alpha_threshold: float = 1e-2) -> np.ndarray | None:
    """Tight box around grid nodes whose per-voxel opacity exceeds the threshold,
    padded by one voxel and clipped to the current box. ``None`` if empty."""
    fld = model.field
    raw = dense_geo(apply_masks(fld, model.state))
    sigma = np.logaddexp(0.0, raw + model.density_shift)
    voxel = (fld.bbox[1] - fld.bbox[0]) / (np.asarray(fld.resolution) - 1)
    alpha = -np.expm1(-sigma * model.distance_scale * voxel.mean())
    occ = np.argwhere(alpha > alpha_threshold)
    if occ.size == 0:
        return None
    lo = fld.bbox[0] + (occ.min(axis=0) - 1) * voxel
    hi = fld.bbox[0] + (occ.max(axis=0) + 1) * voxel
    return np.stack([np.maximum(lo, fld.bbox[0]), np.minimum(hi, fld.bbox[1])])


def resize_field(model: RadianceModel, params: ParamSet, transform: Callable) -> ParamSet:
    """Apply a lattice change (upsample or bbox shrink) to the model in place.

    Adam moments of the field arrays go through the same ``transform`` as the
    values and keep their step counts, so the optimizer does not restart with
    full-size steps on every grid element.
    """
    old = model.field
    model.field = transform(old)
    new = ParamSet.from_model(model, params)
    for attr in ("m", "v"):
        moments = {pid: getattr(params[pid], attr) for pid in field_arrays(old)}
        moved = field_arrays(transform(field_with_arrays(old, moments)))
        for pid, arr in moved.items():
            target = getattr(new[pid], attr)
            target[...] = np.maximum(arr, 0.0) if attr == "v" else arr
    for pid in field_arrays(old):
        new[pid].step = params[pid].step
    return new


@dataclass
class TrainResult:
    model: RadianceModel
    history: LossHistory
    config: TrainConfig

    @property
    def flagged(self) -> bool:
        """True when a rank-incremental run never left rank 1 (the gate never fired)."""
        return self.config.mode == "train_trains" and self.model.state.R > 1 and not self.history.increments


def train(
    config: TrainConfig,
    data: Dataset | RayData,
    callback: Callable[[int, RadianceModel, LossHistory], None] | None = None,
    model: RadianceModel | None = None,
) -> TrainResult:
    """Run ``config.max_iter`` iterations of masked forward/backward + Adam.

    ``callback(it, model, history)`` runs after every iteration (for
    snapshots). A prebuilt ``model`` may be supplied; otherwise one is
    initialised from the config seed.
    """
    if isinstance(data, Dataset):
        data = RayData.from_dataset(data)
    n_rays = data.origins.shape[0]
    if n_rays == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    trains = config.mode == "train_trains"
    R = config.rank
    if model is None:
        res = (config.resolution_init,) * 3
        model = RadianceModel.create(
            res, data.bbox, R, rng,
            app_feature_dim=config.app_feature_dim,
            r_d=1 if trains else R,
            epsilon=config.epsilon,
            init_scale=config.init_scale,
            hidden=config.hidden,
            dir_freqs=config.dir_freqs,
            density_shift=config.density_shift,
            distance_scale=config.distance_scale,
            background=data.background,
        )
    state = model.state
    params = ParamSet.from_model(model)
    schedule = config.upsample_schedule()
    hist = LossHistory()
    gate = GateLoss(config.gate_window)
    prev: float | None = None

    for it in range(1, config.max_iter + 1):
        idx = rng.integers(0, n_rays, config.batch_size)
        offsets = rng.random((config.batch_size, config.n_samples))
        tape = forward(model, data.origins[idx], data.directions[idx], config.n_samples, offsets, data.colors[idx])
        params.accumulate(backward(tape))
        adam_step(params, config.adam_at(it))

        cur = gate.update(tape.loss)
        if (
            trains
            and prev is not None
            and state.r_d < state.R
            and should_increment(prev, cur, config.upsilon, it, state.last_inc_iter, config.eta)
        ):
            state.r_d += 1
            state.last_inc_iter = it
            hist.increments.append((it, state.r_d))
            log.debug("iteration %d: r_d -> %d", it, state.r_d)
        prev = cur
        hist.record(it, tape.loss, state.r_d)

        if it in config.shrink_iters:
            box = occupied_bbox(model)
            if box is not None:
                params = resize_field(model, params, lambda f, box=box: shrink_bbox(f, box))
        if it in schedule:
            res = (schedule[it],) * 3
            params = resize_field(model, params, lambda f, res=res: upsample(f, res))
        if callback is not None:
            callback(it, model, hist)

    result = TrainResult(model, hist, config)
    if result.flagged:
        log.warning("rank gate never fired (upsilon=%g); model stayed at rank 1", config.upsilon)
    return result
