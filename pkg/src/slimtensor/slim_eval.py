"""Test-time slimming, PSNR, rank sweeps and the half-precision checkpoint format.

Checkpoint layout (all little-endian)::

    magic        7 bytes   b"SLMRF1\\0"
    header       fixed     see ``_HEADER``; ends with a CRC32 of the header bytes
    payload      fp16      geo vectors x,y,z; geo matrices yz,xz,xy;
                           app vectors; app matrices; basis; w1, b1, w2, b2
    crc32        uint32    over everything before it
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .decoder import AppearanceDecoder
from .model import RadianceModel
from .renderer import Camera, render_image
from .vm_grid import PLANE_AXES, RankState, TensorField, truncate_rank

MAGIC = b"SLMRF1\0"
ENDIAN_TAG = 0x01020304
PSNR_CAP = 99.0
# tag, I, J, K, R, r_d, F, hidden, in_dim, dir_freqs, last_inc, bbox[6], eps, shift, scale, bg[3]
_HEADER = struct.Struct("<11I6d3d3d")
_CRC = struct.Struct("<I")
_F16 = np.dtype("<f2")


class CheckpointError(ValueError):
    """Base class for unreadable checkpoints."""


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


# --- slimming and metrics ----------------------------------------------------


def slim(model: RadianceModel, r: int) -> RadianceModel:
    """Keep the first ``r`` components; the decoder is shared unchanged (copied).

    Masks of the retained components are preserved, so ``slim(m, R)`` renders
    exactly like ``m``.
    """
    R = model.rank
    if not 1 <= r <= R:
        raise ValueError(f"retained rank {r} outside [1, {R}]")
    st = model.state
    return RadianceModel(
        truncate_rank(model.field, r),
        model.decoder.copy(),
        RankState(min(st.r_d, r), r, st.epsilon, st.last_inc_iter),
        model.density_shift,
        model.distance_scale,
        model.background.copy(),
    )


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; identical images give 99 dB."""
    image, reference = np.asarray(image, dtype=np.float64), np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ValueError(f"image shapes differ: {image.shape} vs {reference.shape}")
    mse = float(np.mean((image - reference) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def evaluate(model: RadianceModel, views: list[tuple[Camera, np.ndarray]], n_samples: int = 64) -> float:
    """Mean per-view PSNR, rendering with bin-midpoint samples."""
    if not views:
        raise ValueError("no views to evaluate")
    return float(np.mean([psnr(render_image(model, cam, n_samples), img) for cam, img in views]))


def factor_payload_bytes(model: RadianceModel) -> int:
    """Serialized size of the rank-dependent arrays (grids and basis)."""
    return _F16.itemsize * model.field.num_factor_params()


@dataclass
class SweepReport:
    ranks: list[int]
    psnr_db: list[float]
    bytes: list[int]
    scene_id: str = ""
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rank", "psnr_db", "bytes"])
            for r, p, b in zip(self.ranks, self.psnr_db, self.bytes):
                w.writerow([r, f"{p:.6f}", b])

    @classmethod
    def from_csv(cls, path: str | Path) -> "SweepReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([int(r["rank"]) for r in rows], [float(r["psnr_db"]) for r in rows], [int(r["bytes"]) for r in rows])

    def at(self, r: int) -> float:
        return self.psnr_db[self.ranks.index(r)]


def config_hash(config) -> str:
    """Short stable hash of a config object or dict."""
    d = config if isinstance(config, dict) else config.to_dict()
    return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:12]


def rank_sweep(
    model: RadianceModel,
    views: list[tuple[Camera, np.ndarray]],
    n_samples: int = 64,
    scene_id: str = "",
    config=None,
) -> SweepReport:
    """PSNR and checkpoint size of ``slim(model, r)`` for r = 1..R."""
    ranks, values, sizes = [], [], []
    for r in range(1, model.rank + 1):
        m = slim(model, r)
        ranks.append(r)
        values.append(evaluate(m, views, n_samples))
        sizes.append(len(dumps(m)))
    return SweepReport(ranks, values, sizes, scene_id, "" if config is None else config_hash(config))


# --- checkpoint --------------------------------------------------------------


def _arrays(model: RadianceModel) -> list[np.ndarray]:
    f, d = model.field, model.decoder
    return [*f.geo_vectors, *f.geo_matrices, *f.app_vectors, *f.app_matrices, f.basis, d.w1, d.b1, d.w2, d.b2]


def _shapes(res, R, F, hidden, in_dim) -> list[tuple[int, ...]]:
    def group(C):
        return [(res[a], C) for a in range(3)], [(res[b], res[c], C) for b, c in PLANE_AXES]

    gv, gm = group(R)
    av, am = group(3 * R)
    return [*gv, *gm, *av, *am, (F, 9 * R), (hidden, in_dim), (hidden,), (3, hidden), (3,)]


def dumps(model: RadianceModel) -> bytes:
    """Serialize to the checkpoint byte format (weights rounded to fp16)."""
    f, d, st = model.field, model.decoder, model.state
    header = _HEADER.pack(
        ENDIAN_TAG, *f.resolution, st.R, st.r_d, f.app_feature_dim, d.hidden, d.in_dim, d.dir_freqs,
        st.last_inc_iter, *f.bbox.ravel(), st.epsilon, model.density_shift, model.distance_scale,
        *model.background,
    )
    parts = [MAGIC, header, _CRC.pack(zlib.crc32(header))]
    for a in _arrays(model):
        if not np.all(np.abs(a) <= np.finfo(_F16).max):
            raise ValueError("parameter values overflow half precision")
        parts.append(a.astype(_F16).tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def loads(data: bytes) -> RadianceModel:
    """Parse checkpoint bytes; raises a :class:`CheckpointError` subclass on bad input."""
    if not data.startswith(MAGIC):
        if MAGIC.startswith(data):
            raise TruncatedCheckpointError("checkpoint truncated inside the magic bytes")
        raise BadMagicError("not a checkpoint (bad magic)")
    h0 = len(MAGIC)
    h1 = h0 + _HEADER.size
    if len(data) < h1 + _CRC.size:
        raise TruncatedCheckpointError("checkpoint truncated inside the header")
    header = data[h0:h1]
    if _CRC.unpack_from(data, h1)[0] != zlib.crc32(header):
        raise ChecksumError("header checksum mismatch")
    vals = _HEADER.unpack(header)
    if vals[0] != ENDIAN_TAG:
        raise CheckpointError("unsupported byte order")
    I, J, K, R, r_d, F, hidden, in_dim, dir_freqs, last_inc = vals[1:11]
    bbox = np.array(vals[11:17]).reshape(2, 3)
    eps, shift, scale = vals[17:20]
    bg = np.array(vals[20:23])
    shapes = _shapes((I, J, K), R, F, hidden, in_dim)
    n_payload = sum(int(np.prod(s)) for s in shapes) * _F16.itemsize
    start = h1 + _CRC.size
    end = start + n_payload
    if len(data) < end + _CRC.size:
        raise TruncatedCheckpointError(f"checkpoint truncated: {len(data)} bytes, expected {end + _CRC.size}")
    if len(data) > end + _CRC.size:
        raise CheckpointError("trailing bytes after checkpoint")
    if _CRC.unpack_from(data, end)[0] != zlib.crc32(data[:end]):
        raise ChecksumError("payload checksum mismatch")

    arrays, pos = [], start
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(data, _F16, n, pos).astype(np.float64).reshape(s))
        pos += n * _F16.itemsize
    fld = TensorField((I, J, K), bbox, arrays[0:3], arrays[3:6], arrays[6:9], arrays[9:12], arrays[12])
    dec = AppearanceDecoder(*arrays[13:17], feature_dim=F, dir_freqs=dir_freqs)
    return RadianceModel(fld, dec, RankState(r_d, R, eps, last_inc), shift, scale, bg)


def save(model: RadianceModel, path: str | Path) -> int:
    """Write a checkpoint; returns its size in bytes."""
    data = dumps(model)
    Path(path).write_bytes(data)
    return len(data)


def load(path: str | Path) -> RadianceModel:
    return loads(Path(path).read_bytes())
