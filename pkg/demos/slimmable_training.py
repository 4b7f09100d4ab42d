"""Train a small slimmable field two ways and compare how each one slims.

A rank-incremented run fills its components in order of importance, so
dropping trailing components costs little. A run that trains every component
from the start spreads the scene across all of them, so the same truncation
destroys it.

Run with ``python3 demos/slimmable_training.py [workdir] [iterations]``.
"""

import sys
import tempfile
import time
from pathlib import Path

from slimtensor import TrainConfig, generate_scene, load_dataset, make_dataset, rank_sweep, train

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="slim_demo_"))
iters = int(sys.argv[2]) if len(sys.argv) > 2 else 800

if not (work / "transforms.json").exists():
    print(f"rendering the toy scene into {work} ...")
    make_dataset(generate_scene(0), work)
data = load_dataset(work)
views = data.views("test")

# a short schedule: grow the grid twice and crop to the occupied region once
schedule = dict(
    max_iter=iters, n_samples=32, lr_grid=0.08, lr_decay=0.03,
    upsample_iters=(iters // 4, iters // 2), shrink_iters=(iters // 3,),
)

curves = {}
for mode in ("train_trains", "baseline"):
    t0 = time.time()
    result = train(TrainConfig(mode=mode, **schedule), data)
    incs = ", ".join(f"it {i}: r_d={r}" for i, r in result.history.increments) or "none"
    print(f"\n{mode}: {time.time() - t0:.0f} s, rank increments: {incs}")
    curves[mode] = rank_sweep(result.model, views)

print("\nrank   TRaIn   baseline   (test PSNR, dB)   bytes")
for r in curves["baseline"].ranks:
    a, b = curves["train_trains"].at(r), curves["baseline"].at(r)
    print(f"{r:4d}  {a:6.2f}  {b:9.2f}  {curves['baseline'].bytes[r - 1]:>22d}")
