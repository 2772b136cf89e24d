# %% [markdown]
# # Frames, clips and triplets
# Build a small synthetic dataset in the expected directory layout, load its
# manifest and draw a few unpaired training triplets.

# %%
import tempfile
from pathlib import Path

from i2vgan.data import load_manifest, postprocess, triplets_of, unpaired_batch_iterator
from i2vgan.synthetic import make_moving_square_dataset

root = Path(tempfile.mkdtemp()) / "toy"
make_moving_square_dataset(root, frames_per_domain=30, test_frames=6, size=32)
manifest = load_manifest(root)
for s in manifest.subsets:
    print(s.name, s.split, "infrared", s.frame_count("X"), "visible", s.frame_count("Y"))

# %% [markdown]
# A clip of T frames yields T - 2 overlapping triplets.

# %%
clip = manifest.clips("X", "test")[0]
trips = list(triplets_of(clip, size=32))
print(len(clip), "frames ->", len(trips), "triplets, starts", [t.start_index for t in trips])

# %% [markdown]
# Training draws one infrared and one visible triplet independently; the
# sequence is fixed by the seed and can be checkpointed.

# %%
sampler = unpaired_batch_iterator(manifest, seed=0, size=32)
x, y = next(sampler)
print("x from", x.source_clip, "@", x.start_index, "| y from", y.source_clip, "@", y.start_index)
print("frame tensor", tuple(x.stacked().shape), "range", float(x.stacked().min()), float(x.stacked().max()))
print("back to 8-bit:", postprocess(x.frames[0]).shape, postprocess(x.frames[0]).dtype)
