"""Pinhole cameras, stratified ray sampling and emission-absorption compositing.

Camera convention follows NeRF-Synthetic / OpenGL: the camera looks down its
local ``-Z`` axis with ``+Y`` up, and pixel ``(col, row)`` has its center at
``(col + 0.5, row + 0.5)`` in image coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

WHITE = np.ones(3)
BLACK = np.zeros(3)


@dataclass
class Camera:
    focal: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray  # (4, 4) camera-to-world

    def __post_init__(self) -> None:
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        if not self.focal > 0:
            raise ValueError("focal length must be positive")
        R = self.c2w[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation is not orthonormal")

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:3, 3]


def look_at(eye: np.ndarray, target: np.ndarray, up: np.ndarray = (0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at ``eye`` whose -Z axis faces ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = eye - np.asarray(target, dtype=np.float64)
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    if np.linalg.norm(np.cross(up, z)) < 1e-6:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = x, y, z, eye
    return c2w


def all_pixels(cam: Camera) -> np.ndarray:
    """Every pixel as (col, row), row-major order; shape (H*W, 2)."""
    rows, cols = np.mgrid[0 : cam.height, 0 : cam.width]
    return np.stack([cols.ravel(), rows.ravel()], axis=1)


def generate_rays(cam: Camera, pixels: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Unit-direction rays through pixel centers; returns (origins, directions)."""
    px = all_pixels(cam) if pixels is None else np.asarray(pixels).reshape(-1, 2)
    cols, rows = px[:, 0], px[:, 1]
    if np.any((cols < 0) | (cols >= cam.width) | (rows < 0) | (rows >= cam.height)):
        raise ValueError("pixel outside image bounds")
    d_cam = np.stack(
        [
            (cols + 0.5 - cam.cx) / cam.focal,
            -(rows + 0.5 - cam.cy) / cam.focal,
            -np.ones(len(px)),
        ],
        axis=1,
    )
    d = d_cam @ cam.c2w[:3, :3].T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(cam.origin, d.shape).copy()
    return o, d


def ray_box_intersect(origins: np.ndarray, dirs: np.ndarray, bbox: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Slab test. Returns (near, far, hit) with near clamped at 0."""
    bbox = np.asarray(bbox, dtype=np.float64).reshape(2, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (bbox[0] - origins) * inv
        t1 = (bbox[1] - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    near = np.maximum(tmin, 0.0)
    hit = tmax > near
    return near, np.where(hit, tmax, near), hit


def sample_along_rays(
    origins: np.ndarray,
    dirs: np.ndarray,
    bbox: np.ndarray,
    n_samples: int,
    offsets: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stratified samples over each ray's bbox chord.

    ``offsets`` (shape (Q, N), values in [0, 1)) place each sample inside its
    bin; ``None`` uses bin midpoints. Rays that miss the box get step 0.

    Returns ``(t, delta, points)`` with shapes (Q, N), (Q,), (Q, N, 3).
    """
    near, far, _ = ray_box_intersect(origins, dirs, bbox)
    delta = (far - near) / n_samples
    off = 0.5 if offsets is None else offsets
    t = near[:, None] + (np.arange(n_samples)[None, :] + off) * delta[:, None]
    pts = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    return t, delta, pts


@dataclass
class Composite:
    color: np.ndarray  # (Q, 3)
    weights: np.ndarray  # (Q, N)
    transmittance: np.ndarray  # (Q, N), t^(n) before sample n
    residual: np.ndarray  # (Q,), transmittance left after the last sample
    background: np.ndarray


def composite(
    sigma: np.ndarray,
    rgb: np.ndarray,
    delta: np.ndarray,
    background: np.ndarray = WHITE,
) -> Composite:
    """Emission-absorption compositing with per-ray step ``delta``.

    ``color = sum_n t_n (1 - exp(-delta sigma_n)) c_n + t_final * background``
    with ``t_n = exp(-sum_{m<n} delta sigma_m)`` evaluated in log space.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64).reshape(-1)
    if np.isnan(sigma).any() or np.isnan(rgb).any() or np.isnan(delta).any():
        raise ValueError("NaN in compositing inputs")
    tau = sigma * delta[:, None]
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-(cum - tau))
    alpha = -np.expm1(-tau)
    w = trans * alpha
    residual = np.exp(-cum[:, -1])
    bg = np.asarray(background, dtype=np.float64)
    color = np.einsum("qn,qnc->qc", w, rgb) + residual[:, None] * bg
    return Composite(color, w, trans, residual, bg)


def composite_backward(
    comp: Composite, rgb: np.ndarray, delta: np.ndarray, dcolor: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of a scalar loss w.r.t. (sigma, rgb) given ``dL/dcolor``.

    For optical depth ``tau_k = delta sigma_k``::

        dC/dtau_k = t_{k+1} c_k - (sum_{n>k} w_n c_n + t_final * bg)
    """
    wc = comp.weights[..., None] * rgb
    after = comp.color[:, None, :] - np.cumsum(wc, axis=1)
    t_next = comp.transmittance - comp.weights  # t_k * exp(-tau_k)
    dtau = np.einsum("qnc,qc->qn", t_next[..., None] * rgb - after, dcolor)
    dsigma = dtau * np.asarray(delta).reshape(-1)[:, None]
    drgb = comp.weights[..., None] * dcolor[:, None, :]
    return dsigma, drgb


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over rays of the squared L2 color residual."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if pred.shape[0] == 0:
        raise ValueError("empty ray batch")
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    return float(np.mean(np.sum((target - pred) ** 2, axis=1)))


def render_image(model, cam: Camera, n_samples: int = 64, chunk: int = 4096, seed: int | None = None) -> np.ndarray:
    """Render a full frame, shape (H, W, 3).

    With ``seed=None`` samples sit at bin midpoints; otherwise bins are
    jittered from ``np.random.default_rng(seed)``. Either way the result is
    deterministic.
    """
    from .grad import forward

    o, d = generate_rays(cam)
    rng = None if seed is None else np.random.default_rng(seed)
    out = np.empty((o.shape[0], 3))
    for s in range(0, o.shape[0], chunk):
        e = min(s + chunk, o.shape[0])
        offsets = None if rng is None else rng.random((e - s, n_samples))
        out[s:e] = forward(model, o[s:e], d[s:e], n_samples, offsets=offsets).color
    return out.reshape(cam.height, cam.width, 3)


def save_image(path: str | Path, image: np.ndarray) -> None:
    """Write an 8-bit PNG or binary PPM, chosen by extension."""
    path = Path(path)
    if path.suffix.lower() not in (".png", ".ppm"):
        raise ValueError(f"unsupported image extension {path.suffix!r}")
    u8 = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
