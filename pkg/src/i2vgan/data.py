"""Dataset discovery, frame preprocessing and unpaired triplet sampling.

Expected layout on disk::

    <root>/<subset>/<split>/<domain>/frame_000000.png
    <root>/<subset>/<split>/<domain>/<clip>/frame_000000.png   (multi-clip)

``split`` is ``train`` or ``test``; ``domain`` is ``infrared`` (domain X)
or ``visible`` (domain Y).
"""
from __future__ import annotations

import functools
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

FRAME_SIZE = 256
SPLITS = ("train", "test")
DOMAIN_DIRS = {"X": "infrared", "Y": "visible"}
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}

_INDEX_RE = re.compile(r"(\d+)(?!.*\d)")


class DatasetError(Exception):
    pass


class DatasetNotFoundError(DatasetError):
    pass


class FrameReadError(DatasetError):
    def __init__(self, path, reason):
        super().__init__(f"cannot read frame {path}: {reason}")
        self.path = Path(path)


@dataclass(frozen=True)
class VideoClip:
    frame_paths: tuple[Path, ...]
    domain: str
    clip_id: str

    def __len__(self):
        return len(self.frame_paths)


@dataclass(frozen=True)
class Subset:
    name: str
    split: str
    domain_x_clips: tuple[VideoClip, ...]
    domain_y_clips: tuple[VideoClip, ...]

    def clips(self, domain: str) -> tuple[VideoClip, ...]:
        return self.domain_x_clips if domain == "X" else self.domain_y_clips

    def frame_count(self, domain: str) -> int:
        return sum(len(c) for c in self.clips(domain))


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    subsets: tuple[Subset, ...]
    # clip ids dropped for having fewer than three frames
    excluded: tuple[str, ...] = ()

    @property
    def subset_names(self) -> list[str]:
        return sorted({s.name for s in self.subsets})

    def select(self, names: Sequence[str] | None) -> "DatasetManifest":
        """Restrict the manifest to the named subsets (``None`` keeps all)."""
        if not names:
            return self
        unknown = set(names) - set(self.subset_names)
        if unknown:
            raise DatasetError(f"unknown subset(s): {', '.join(sorted(unknown))}")
        kept = tuple(s for s in self.subsets if s.name in names)
        return DatasetManifest(self.root, kept, self.excluded)

    def clips(self, domain: str, split: str = "train") -> list[VideoClip]:
        return [c for s in self.subsets if s.split == split for c in s.clips(domain)]

    def to_dict(self) -> dict:
        out = {"root": str(self.root), "subsets": [], "excluded": list(self.excluded)}
        for s in self.subsets:
            out["subsets"].append({
                "name": s.name,
                "split": s.split,
                "clips": {
                    d: [{"clip_id": c.clip_id, "frames": len(c)} for c in s.clips(d)]
                    for d in ("X", "Y")
                },
                "frames": {d: s.frame_count(d) for d in ("X", "Y")},
            })
        return out

    def export(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class FrameTriplet:
    frames: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    source_clip: str
    start_index: int

    def stacked(self) -> torch.Tensor:
        """The three frames as a ``(3, C, H, W)`` batch."""
        return torch.stack(self.frames)


def _frame_index(path: Path) -> int:
    m = _INDEX_RE.search(path.stem)
    if m is None:
        raise DatasetError(f"frame file without an index: {path}")
    return int(m.group(1))


def _collect_clip(directory: Path, domain: str, clip_id: str) -> VideoClip:
    files = [p for p in directory.iterdir()
             if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES]
    files.sort(key=lambda p: (_frame_index(p), p.name))
    indices = [_frame_index(p) for p in files]
    for prev, cur, path in zip(indices, indices[1:], files[1:]):
        if cur != prev + 1:
            raise DatasetError(
                f"clip {clip_id}: frame indices not contiguous at {path.name} "
                f"(expected {prev + 1}, found {cur})")
    return VideoClip(tuple(files), domain, clip_id)


def _domain_clips(domain_dir: Path, domain: str, prefix: str) -> list[VideoClip]:
    subdirs = sorted(p for p in domain_dir.iterdir() if p.is_dir())
    if subdirs:
        return [_collect_clip(d, domain, f"{prefix}/{d.name}") for d in subdirs]
    return [_collect_clip(domain_dir, domain, prefix)]


def load_manifest(root_path) -> DatasetManifest:
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetNotFoundError(f"dataset not found: {root}")
    subsets = []
    excluded = []
    for subset_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for split in SPLITS:
            split_dir = subset_dir / split
            if not split_dir.is_dir():
                continue
            per_domain = {}
            for domain, dirname in DOMAIN_DIRS.items():
                domain_dir = split_dir / dirname
                clips = []
                if domain_dir.is_dir():
                    prefix = f"{subset_dir.name}/{split}/{dirname}"
                    for clip in _domain_clips(domain_dir, domain, prefix):
                        if len(clip) < 3:
                            log.warning("excluding clip %s: %d frame(s), need at least 3",
                                        clip.clip_id, len(clip))
                            excluded.append(clip.clip_id)
                        else:
                            clips.append(clip)
                per_domain[domain] = tuple(clips)
            if not per_domain["X"] or not per_domain["Y"]:
                missing = [DOMAIN_DIRS[d] for d, c in per_domain.items() if not c]
                raise DatasetError(
                    f"subset '{subset_dir.name}' ({split}) has no usable clips "
                    f"for {', '.join(missing)}")
            subsets.append(Subset(subset_dir.name, split, per_domain["X"], per_domain["Y"]))
    if not subsets:
        raise DatasetNotFoundError(f"dataset not found: no subsets under {root}")
    return DatasetManifest(root, tuple(subsets), tuple(excluded))


def preprocess(image, size: int = FRAME_SIZE) -> torch.Tensor:
    """Turn an 8-bit RGB image into a ``(3, size, size)`` float tensor in [-1, 1].

    ``image`` may be a path, a PIL image or a ``(H, W, 3)`` uint8 array.
    Resizing is bilinear and skipped when the image already has the target size.
    """
    if isinstance(image, (str, Path)):
        path = Path(image)
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"))
        except (OSError, UnidentifiedImageError) as exc:
            raise FrameReadError(path, exc) from exc
    elif isinstance(image, Image.Image):
        arr = np.asarray(image.convert("RGB"))
    else:
        arr = np.asarray(image)
        if arr.ndim == 2:
            arr = np.repeat(arr[..., None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"expected an (H, W, 3) image, got shape {arr.shape}")
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).permute(2, 0, 1)
    if t.shape[1:] != (size, size):
        t = F.interpolate(t[None], size=(size, size), mode="bilinear",
                          align_corners=False, antialias=True)[0]
    return (t / 255.0) * 2.0 - 1.0


def postprocess(frame: torch.Tensor) -> np.ndarray:
    """Map a ``(3, H, W)`` tensor in [-1, 1] to an ``(H, W, 3)`` uint8 image.

    Uses ``p = round(255 * (v + 1) / 2)`` with halves rounded up, clamped to [0, 255].
    """
    v = frame.detach().to(torch.float64).cpu()
    p = torch.floor(255.0 * (v + 1.0) / 2.0 + 0.5).clamp_(0, 255)
    return p.to(torch.uint8).permute(1, 2, 0).numpy()


def save_frame(frame: torch.Tensor, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(postprocess(frame)).save(path)


@functools.lru_cache(maxsize=4096)
def _load_cached(path: Path, size: int) -> torch.Tensor:
    return preprocess(path, size)


def load_frame(path, size: int = FRAME_SIZE, cache: bool = True) -> torch.Tensor:
    if cache:
        return _load_cached(Path(path), size).clone()
    return preprocess(path, size)


def triplet_starts(length: int) -> range:
    if length < 3:
        raise DatasetError(f"a clip needs at least 3 frames for a triplet, got {length}")
    return range(length - 2)


def triplets_of(clip: VideoClip, size: int = FRAME_SIZE) -> Iterator[FrameTriplet]:
    """Yield every window of three consecutive frames, in order."""
    for t in triplet_starts(len(clip)):
        yield load_triplet(clip, t, size)


def load_triplet(clip: VideoClip, start: int, size: int = FRAME_SIZE) -> FrameTriplet:
    frames = tuple(load_frame(p, size) for p in clip.frame_paths[start:start + 3])
    return FrameTriplet(frames, clip.clip_id, start)


@dataclass
class UnpairedTripletSampler:
    """Endless stream of independently drawn (x, y) triplets.

    Each domain's draw is uniform over all (clip, start index) windows of
    the training split. The whole sequence is fixed by ``seed``; the
    generator state can be captured and restored for resuming.
    """

    manifest: DatasetManifest
    seed: int = 0
    size: int = FRAME_SIZE
    split: str = "train"
    windows: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.windows = {}
        for domain in ("X", "Y"):
            clips = self.manifest.clips(domain, self.split)
            if not clips:
                raise DatasetError(f"no {self.split} clips for domain {domain}")
            self.windows[domain] = [(c, t) for c in clips for t in triplet_starts(len(c))]
        self.rng = np.random.Generator(np.random.PCG64(self.seed))

    def next_windows(self) -> tuple[tuple[VideoClip, int], tuple[VideoClip, int]]:
        ix = int(self.rng.integers(len(self.windows["X"])))
        iy = int(self.rng.integers(len(self.windows["Y"])))
        return self.windows["X"][ix], self.windows["Y"][iy]

    def __iter__(self):
        return self

    def __next__(self) -> tuple[FrameTriplet, FrameTriplet]:
        (cx, tx), (cy, ty) = self.next_windows()
        return load_triplet(cx, tx, self.size), load_triplet(cy, ty, self.size)

    def get_state(self) -> dict:
        return self.rng.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.rng.bit_generator.state = state


def unpaired_batch_iterator(manifest: DatasetManifest, seed: int,
                            size: int = FRAME_SIZE) -> UnpairedTripletSampler:
    return UnpairedTripletSampler(manifest, seed, size)
