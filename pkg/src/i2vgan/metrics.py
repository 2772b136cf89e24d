"""FID, PSNR and SSIM on 8-bit frames as written to disk."""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image
from scipy import linalg, ndimage

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
DATA_RANGE = 255.0


class MetricError(ValueError):
    pass


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB; identical frames give ``PSNR_CAP``."""
    a, b = _pair(a, b)
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(DATA_RANGE ** 2 / mse), PSNR_CAP))


def _gaussian(x: np.ndarray) -> np.ndarray:
    # truncate chosen so the kernel is exactly SSIM_WINDOW taps wide
    radius = SSIM_WINDOW // 2
    return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=radius / SSIM_SIGMA, mode="reflect")


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    c1 = (SSIM_K1 * DATA_RANGE) ** 2
    c2 = (SSIM_K2 * DATA_RANGE) ** 2
    mu_a, mu_b = _gaussian(a), _gaussian(b)
    var_a = _gaussian(a * a) - mu_a * mu_a
    var_b = _gaussian(b * b) - mu_b * mu_b
    cov = _gaussian(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    ssim_map = num / den
    r = SSIM_WINDOW // 2
    # only positions where the whole window lies inside the frame
    return float(ssim_map[r:-r, r:-r].mean())


def ssim(a, b) -> float:
    """Mean structural similarity (11x11 Gaussian window, sigma 1.5), channel-averaged.

    Frames are ``(H, W)`` or ``(H, W, C)`` arrays with values in [0, 255].
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise MetricError(f"frame {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(np.mean([_ssim_channel(a[..., c], b[..., c]) for c in range(a.shape[2])]))


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int = 0


def stats_from_features(features) -> FeatureStats:
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise MetricError("feature statistics need at least 2 samples")
    mu = feats.mean(axis=0)
    centred = feats - mu
    cov = centred.T @ centred / (feats.shape[0] - 1)
    return FeatureStats(mu, (cov + cov.T) / 2, feats.shape[0])


def feature_stats(frames, extractor: Callable) -> FeatureStats:
    """Mean and unbiased covariance of ``extractor`` features over ``frames``.

    ``extractor`` maps a list of uint8 ``(H, W, 3)`` frames to an ``(n, d)`` array.
    """
    frames = list(frames)
    if len(frames) < 2:
        raise MetricError("feature statistics need at least 2 frames")
    return stats_from_features(extractor(frames))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def fid(s1: FeatureStats, s2: FeatureStats) -> float:
    """Fréchet distance between two Gaussian feature fits.

    The cross term ``Tr((S1 S2)^(1/2))`` is evaluated as the trace of the
    square root of the symmetric ``S1^(1/2) S2 S1^(1/2)``, with small
    negative eigenvalues from round-off clipped to zero.
    """
    mu1, mu2 = np.atleast_1d(s1.mean), np.atleast_1d(s2.mean)
    c1, c2 = np.atleast_2d(s1.cov), np.atleast_2d(s2.cov)
    if mu1.shape != mu2.shape or c1.shape != c2.shape:
        raise MetricError(f"feature dimensions differ: {mu1.shape} vs {mu2.shape}")
    try:
        root1 = _psd_sqrt(c1)
        inner = linalg.eigvalsh(root1 @ c2 @ root1)
    except (linalg.LinAlgError, ValueError) as exc:
        raise MetricError(f"matrix square root failed: {exc}") from exc
    if not np.all(np.isfinite(inner)):
        raise MetricError("matrix square root did not converge")
    cross = np.sqrt(np.clip(inner, 0, None)).sum()
    diff = mu1 - mu2
    value = diff @ diff + np.trace(c1) + np.trace(c2) - 2 * cross
    return float(max(value, 0.0))


# -- feature extractors -------------------------------------------------------

class PerceptualPoolExtractor:
    """Globally average-pooled activations of the deepest layer of a
    :class:`~i2vgan.networks.PerceptualExtractor`."""

    def __init__(self, network=None, batch_size: int = 8):
        if network is None:
            from i2vgan.networks import PerceptualExtractor
            network = PerceptualExtractor("vgg16")
        self.network = network
        self.batch_size = batch_size
        self.identifier = f"pool:{network.identifier}"

    @torch.no_grad()
    def __call__(self, frames) -> np.ndarray:
        layer = self.network.layers[-1]
        dtype = self.network.mean.dtype
        out = []
        for i in range(0, len(frames), self.batch_size):
            batch = np.stack(frames[i:i + self.batch_size]).astype(np.float32)
            t = torch.from_numpy(batch).permute(0, 3, 1, 2).to(dtype) / 127.5 - 1.0
            out.append(self.network.features(t, [layer])[layer].mean(dim=(2, 3)).double().numpy())
        return np.concatenate(out)


class PixelExtractor:
    """Area-downsampled pixels as features; cheap and fixed, for tests and CI."""

    def __init__(self, grid: int = 4):
        self.grid = grid
        self.identifier = f"pixel{grid}"

    def __call__(self, frames) -> np.ndarray:
        feats = []
        for f in frames:
            im = Image.fromarray(np.asarray(f, dtype=np.uint8))
            small = im.resize((self.grid, self.grid), Image.BOX)
            feats.append(np.asarray(small, dtype=np.float64).ravel() / 255.0)
        return np.stack(feats)


EXTRACTORS = {"perceptual": PerceptualPoolExtractor, "pixel": PixelExtractor}


def make_extractor(name: str):
    try:
        return EXTRACTORS[name]()
    except KeyError:
        raise MetricError(f"unknown extractor {name!r}; choose from {', '.join(EXTRACTORS)}") from None


# -- directory evaluation -------------------------------------------------------

@dataclass
class SubsetScores:
    fid: float
    psnr_mean: float | None
    ssim_mean: float | None
    frame_count: int


@dataclass
class EvaluationReport:
    subsets: dict[str, SubsetScores] = field(default_factory=dict)
    extractor: str = ""

    def to_dict(self) -> dict:
        return {"extractor": self.extractor,
                "subsets": {k: asdict(v) for k, v in self.subsets.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls({k: SubsetScores(**v) for k, v in d["subsets"].items()}, d["extractor"])

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def read(cls, path) -> "EvaluationReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def read_frames(directory) -> tuple[list[str], list[np.ndarray]]:
    d = Path(directory)
    if not d.is_dir():
        raise MetricError(f"frame directory not found: {d}")
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() in {".png", ".jpg", ".jpeg"})
    frames = []
    for p in paths:
        with Image.open(p) as im:
            frames.append(np.asarray(im.convert("RGB")))
    return [p.name for p in paths], frames


def score_frames(translated, reference, extractor, paired: bool = True) -> SubsetScores:
    if paired and len(translated) != len(reference):
        raise MetricError(f"paired metrics need equal frame counts: "
                          f"{len(translated)} translated vs {len(reference)} reference")
    if not paired and len(translated) != len(reference):
        warnings.warn(f"FID on unequal set sizes ({len(translated)} vs {len(reference)})")
    fid_value = fid(feature_stats(translated, extractor), feature_stats(reference, extractor))
    if not paired:
        return SubsetScores(fid_value, None, None, len(translated))
    p = [psnr(t, r) for t, r in zip(translated, reference)]
    s = [ssim(t, r) for t, r in zip(translated, reference)]
    return SubsetScores(fid_value, float(np.mean(p)), float(np.mean(s)), len(translated))


def evaluate(translated_dir, reference_dir, extractor=None, paired: bool = True,
             name: str | None = None, report_path=None) -> EvaluationReport:
    """Score translated frames against references found in two directories.

    PSNR/SSIM pair frames by sorted file order; FID compares the two sets.
    """
    extractor = extractor if extractor is not None else PerceptualPoolExtractor()
    _, translated = read_frames(translated_dir)
    _, reference = read_frames(reference_dir)
    scores = score_frames(translated, reference, extractor, paired)
    report = EvaluationReport({name or Path(translated_dir).name: scores},
                              getattr(extractor, "identifier", type(extractor).__name__))
    if report_path is not None:
        report.write(report_path)
    return report
