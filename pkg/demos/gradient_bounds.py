"""Check the per-element gradient bounds that make slimming work.

The colour at a sample moves at most ``K`` per unit change of one appearance
grid element, where ``K`` comes from the decoder's weight norms. Through
compositing, the per-ray squared error moves at most
``2 K (sum of weights) sqrt(error)``. Both are probed with central finite
differences on a random model and on a briefly trained one.
"""

import tempfile
from pathlib import Path

import numpy as np

from slimtensor import RadianceModel, TrainConfig, check_lemma1, check_lemma2, generate_scene, make_dataset, train

random_model = RadianceModel.create((16, 16, 16), [[-1.0] * 3, [1.0] * 3], 4, np.random.default_rng(0))
print("random model")
for rep in (check_lemma1(random_model), check_lemma2(random_model)):
    print("  " + rep.summary())

work = Path(tempfile.mkdtemp(prefix="bounds_demo_"))
data = make_dataset(generate_scene(1), work, n_train=8, n_test=2, size=24)
cfg = TrainConfig(max_iter=300, rank=4, n_samples=32, upsample_iters=(), shrink_iters=())
trained = train(cfg, data).model
print(f"trained model (rank {trained.state.r_d} of {trained.rank} active)")
for rep in (check_lemma1(trained), check_lemma2(trained, rays=data.rays("train"))):
    print("  " + rep.summary())

# K is a worst case over all inputs, so typical ratios sit far below 1
rep = check_lemma1(trained)
print(f"median observed/K ratio: {np.median(rep.ratios):.3f}")
