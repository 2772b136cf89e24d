# %% [markdown]
# # PSNR, SSIM and FID on 8-bit frames

# %%
import numpy as np

from i2vgan.metrics import FeatureStats, PixelExtractor, fid, psnr, score_frames, ssim

base = np.full((32, 32, 3), 100, np.uint8)
print("constant offset of 16:", psnr(base, base + 16), "dB")

rng = np.random.default_rng(0)
frames = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(20)]
print("SSIM of a frame with itself:", ssim(frames[0], frames[0]))
print("SSIM against its negative:", ssim(frames[0], 255 - frames[0]))

# %% [markdown]
# Two unit-variance 1-D Gaussians one apart are at Frechet distance 1.

# %%
print(fid(FeatureStats(np.array([0.0]), np.array([[1.0]])),
          FeatureStats(np.array([1.0]), np.array([[1.0]]))))

# %%
for amplitude in (5, 20, 60):
    noisy = [np.clip(f + rng.normal(0, amplitude, f.shape), 0, 255).astype(np.uint8) for f in frames]
    s = score_frames(noisy, frames, PixelExtractor(2))
    print(f"noise {amplitude:>2}: PSNR {s.psnr_mean:6.2f}  SSIM {s.ssim_mean:.3f}  FID {s.fid:.5f}")
