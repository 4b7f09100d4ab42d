"""Store one model once and ship it at any rank.

Checkpoints hold half-precision factors. Slimming keeps the leading
components, so the file shrinks linearly with the retained rank while the
decoder stays as is.
"""

import tempfile
from pathlib import Path

import numpy as np

from slimtensor import RadianceModel, load, save, slim
from slimtensor.renderer import Camera, look_at, render_image
from slimtensor.slim_eval import factor_payload_bytes, psnr

model = RadianceModel.create((24, 24, 24), [[-1.0] * 3, [1.0] * 3], 8, np.random.default_rng(3), r_d=8, init_scale=0.5)
model.density_shift = 0.0
out = Path(tempfile.mkdtemp(prefix="ckpt_demo_"))
cam = Camera(24.0, 12, 12, 24, 24, look_at([2.5, 1.5, 2.0], [0, 0, 0]))
reference = render_image(model, cam, 64)

print("rank  file bytes  factor bytes  PSNR vs full (dB)")
for r in (8, 4, 2, 1):
    path = out / f"rank{r}.ckpt"
    size = save(slim(model, r), path)
    back = load(path)
    print(f"{r:4d}  {size:10d}  {factor_payload_bytes(back):12d}  {psnr(render_image(back, cam, 64), reference):8.2f}")
