"""Synthetic IRVI-layout datasets: a coloured square moving over a background.

Domain X renders the square as a single grey level (an "infrared" look),
domain Y renders it in colour. The two domains use different trajectories,
so nothing pairs them frame by frame.
"""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from i2vgan.data import DOMAIN_DIRS


def square_clip(n_frames: int, size: int, rng: np.random.Generator, infrared: bool) -> np.ndarray:
    """``(n_frames, size, size, 3)`` uint8 frames of one bouncing square."""
    side = max(size // 4, 2)
    pos = rng.uniform(0, size - side, 2)
    vel = rng.uniform(0.5, 1.5, 2) * rng.choice([-1, 1], 2) * size / 32
    if infrared:
        colour = np.array([200, 200, 200])
        background = np.array([30, 30, 30])
    else:
        colour = rng.integers(120, 256, 3)
        background = np.array([40, 70, 110])
    frames = np.empty((n_frames, size, size, 3), dtype=np.uint8)
    for t in range(n_frames):
        frame = np.broadcast_to(background, (size, size, 3)).copy()
        r, c = pos.round().astype(int)
        frame[r:r + side, c:c + side] = colour
        frames[t] = frame
        pos += vel
        for k in range(2):
            if pos[k] < 0 or pos[k] > size - side:
                vel[k] = -vel[k]
                pos[k] = np.clip(pos[k], 0, size - side)
    return frames


def write_clip(frames: np.ndarray, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        Image.fromarray(f).save(directory / f"frame_{i:06d}.png")


def make_moving_square_dataset(root, frames_per_domain: int = 200, test_frames: int = 20,
                               size: int = 32, subset: str = "synthetic",
                               seed: int = 0) -> Path:
    """Write ``<root>/<subset>/{train,test}/{infrared,visible}/frame_%06d.png``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for split, n in (("train", frames_per_domain), ("test", test_frames)):
        if n <= 0:
            continue
        for domain, dirname in DOMAIN_DIRS.items():
            frames = square_clip(n, size, rng, infrared=(domain == "X"))
            write_clip(frames, root / subset / split / dirname)
    return root


def make_layout_tree(root, counts: dict[str, tuple[int, int]], size: int = 8) -> Path:
    """Write a tiny-frame tree with the given ``{subset: (train, test)}`` frame counts per domain."""
    root = Path(root)
    buf = io.BytesIO()
    Image.fromarray(np.zeros((size, size, 3), dtype=np.uint8)).save(buf, format="PNG")
    tile = buf.getvalue()
    for subset, (n_train, n_test) in counts.items():
        for split, n in (("train", n_train), ("test", n_test)):
            if n <= 0:
                continue
            for dirname in DOMAIN_DIRS.values():
                d = root / subset / split / dirname
                d.mkdir(parents=True, exist_ok=True)
                for i in range(n):
                    (d / f"frame_{i:06d}.png").write_bytes(tile)
    return root
