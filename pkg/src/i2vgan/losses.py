"""Loss terms: adversarial, perceptual-cyclic, and patch contrastive similarity.

Every function returns a differentiable scalar tensor. Frame arguments may
be single frames ``(C, H, W)`` or batches ``(B, C, H, W)``; frame-level
terms are mean-reduced so the weights do not depend on resolution.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import torch

from i2vgan.networks import gather_patches

ADVERSARIAL_MODES = ("lsgan", "log")
TERM_NAMES = ("adv", "cyc", "rcur", "rcyc", "exs", "ins")
MOTION_EPS = 1e-8


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, iteration: int | None = None):
        where = f" at iteration {iteration}" if iteration is not None else ""
        super().__init__(f"non-finite value in loss term '{term}'{where}")
        self.term = term
        self.iteration = iteration


@dataclass
class LossWeights:
    lambda_cycle: float = 10.0
    lambda_recurrent: float = 10.0
    lambda_recycle: float = 10.0
    lambda_external: float = 0.1
    lambda_internal: float = 40.0
    tau: float = 0.07
    num_patches: int = 256
    adversarial_mode: str = "lsgan"
    # "both" or "x2y": directions the similarity terms are applied in
    similarity_directions: str = "both"
    detach_input_features: bool = False
    perceptual_layers: tuple[str, ...] | None = None

    def __post_init__(self):
        for name in ("lambda_cycle", "lambda_recurrent", "lambda_recycle",
                     "lambda_external", "lambda_internal"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.num_patches < 1:
            raise ValueError("num_patches must be at least 1")
        if self.adversarial_mode not in ADVERSARIAL_MODES:
            raise ValueError(f"adversarial_mode must be one of {ADVERSARIAL_MODES}")
        if self.similarity_directions not in ("both", "x2y"):
            raise ValueError("similarity_directions must be 'both' or 'x2y'")

    @property
    def num_negatives(self) -> int:
        return self.num_patches - 1

    def weight(self, term: str) -> float:
        return {"adv": 1.0, "cyc": self.lambda_cycle, "rcur": self.lambda_recurrent,
                "rcyc": self.lambda_recycle, "exs": self.lambda_external,
                "ins": self.lambda_internal}[term]


def _batch(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 3 else x


# -- adversarial --------------------------------------------------------------

def adversarial_from_scores(real_scores, fake_scores, mode: str = "lsgan"):
    """(discriminator loss, generator loss) from two patch score maps, patch-averaged."""
    if mode == "lsgan":
        d_loss = 0.5 * ((real_scores - 1).pow(2).mean() + fake_scores.pow(2).mean())
        g_loss = (fake_scores - 1).pow(2).mean()
    elif mode == "log":
        for s in (real_scores, fake_scores):
            if bool(((s <= 0) | (s >= 1)).any()):
                raise ValueError("log-mode adversarial loss needs scores in (0, 1); "
                                 "terminate the discriminator with a sigmoid")
        d_loss = -(torch.log(real_scores).mean() + torch.log1p(-fake_scores).mean())
        g_loss = -torch.log(fake_scores).mean()
    else:
        raise ValueError(f"unknown adversarial mode {mode!r}")
    return d_loss, g_loss


def discriminator_loss(D, real, fake, mode: str = "lsgan"):
    """Discriminator objective; ``fake`` is detached so only ``D`` is trained."""
    d_loss, _ = adversarial_from_scores(D(real), D(fake.detach()), mode)
    return d_loss


def generator_adversarial(D, fake, mode: str = "lsgan"):
    """Non-saturating generator objective on ``D(fake)``."""
    scores = D(fake)
    _, g_loss = adversarial_from_scores(torch.full_like(scores, 0.5), scores, mode)
    return g_loss


def adversarial_loss(D, real, fake, mode: str = "lsgan"):
    """Returns ``(d_loss, g_loss)`` for one discriminator."""
    return discriminator_loss(D, real, fake, mode), generator_adversarial(D, fake, mode)


# -- pixel and perceptual -------------------------------------------------------

def l1_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def gram(features: torch.Tensor) -> torch.Tensor:
    """Gram matrix ``M M^T / (C H W)`` of a ``(C, H, W)`` or ``(B, C, H, W)`` map."""
    if features.dim() not in (3, 4):
        raise ValueError(f"expected a (C, H, W) feature map, got {tuple(features.shape)}")
    c, h, w = features.shape[-3:]
    m = features.reshape(*features.shape[:-3], c, h * w)
    return m @ m.transpose(-1, -2) / (c * h * w)


def _layers(E, layers):
    return E.layers if layers is None else tuple(layers)


def _content_from(fa: Mapping, fb: Mapping, layers) -> torch.Tensor:
    total = 0.0
    for name in layers:
        a, b = fa[name], fb[name]
        c, h, w = a.shape[-3:]
        per_frame = (a - b).pow(2).flatten(1).sum(1) / (c * h * w)
        total = total + per_frame.mean()
    return total


def _style_from(fa: Mapping, fb: Mapping, layers) -> torch.Tensor:
    total = 0.0
    for name in layers:
        diff = gram(fa[name]) - gram(fb[name])
        total = total + diff.pow(2).sum(dim=(-2, -1)).mean()
    return total


def perceptual_content(E, a, b, layers=None) -> torch.Tensor:
    layers = _layers(E, layers)
    return _content_from(E.features(_batch(a), layers), E.features(_batch(b), layers), layers)


def perceptual_style(E, a, b, layers=None) -> torch.Tensor:
    layers = _layers(E, layers)
    return _style_from(E.features(_batch(a), layers), E.features(_batch(b), layers), layers)


def perceptual_total(E, a, b, layers=None) -> torch.Tensor:
    layers = _layers(E, layers)
    fa = E.features(_batch(a), layers)
    fb = E.features(_batch(b), layers)
    return _content_from(fa, fb, layers) + _style_from(fa, fb, layers)


def reconstruction_terms(E, target, output, layers=None, perceptual: bool = True):
    """``(l1, perceptual)`` parts of a perceptual-cyclic comparison."""
    l1 = l1_distance(_batch(target), _batch(output))
    if not perceptual:
        return l1, torch.zeros((), dtype=l1.dtype, device=l1.device)
    return l1, perceptual_total(E, target, output, layers)


def cycle_loss(G_X, G_Y, E, x_t, layers=None, perceptual: bool = True) -> torch.Tensor:
    """L1 + perceptual distance between ``x_t`` and ``G_X(G_Y(x_t))``."""
    x_t = _batch(x_t)
    l1, pcp = reconstruction_terms(E, x_t, G_X(G_Y(x_t)), layers, perceptual)
    return l1 + pcp


def recurrent_loss(P_X, E, x_t, x_t1, x_t2, layers=None, perceptual: bool = True) -> torch.Tensor:
    """How well ``P_X`` forecasts the third frame of a triplet from the first two."""
    x_t, x_t1, x_t2 = _batch(x_t), _batch(x_t1), _batch(x_t2)
    l1, pcp = reconstruction_terms(E, x_t2, P_X(x_t, x_t1), layers, perceptual)
    return l1 + pcp


def recycle_loss(G_X, G_Y, P_Y, E, x_t, x_t1, x_t2, layers=None,
                 perceptual: bool = True) -> torch.Tensor:
    """Translate two frames, forecast in the other domain, translate back, compare."""
    x_t, x_t1, x_t2 = _batch(x_t), _batch(x_t1), _batch(x_t2)
    recycled = G_X(P_Y(G_Y(x_t), G_Y(x_t1)))
    l1, pcp = reconstruction_terms(E, x_t2, recycled, layers, perceptual)
    return l1 + pcp


# -- contrastive ---------------------------------------------------------------

def info_nce(v, v_pos, v_negs, tau: float) -> torch.Tensor:
    """Cross-entropy of picking the positive among ``N + 1`` candidates.

    ``v``, ``v_pos``: ``(..., K)``; ``v_negs``: ``(..., N, K)``. Leading
    dimensions are batched and the result is returned per query (a scalar
    for a single query).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    pos = (v * v_pos).sum(-1, keepdim=True)
    neg = (v.unsqueeze(-2) * v_negs).sum(-1)
    logits = torch.cat([pos, neg], dim=-1) / tau
    # logsumexp subtracts the max internally
    return torch.logsumexp(logits, dim=-1) - logits[..., 0]


def patch_nce(queries: torch.Tensor, keys: torch.Tensor, tau: float) -> torch.Tensor:
    """Per-query NCE where query ``s`` is positive with key ``s`` and every
    other key is a negative. ``queries``/``keys``: ``(B, S, K)`` -> ``(B, S)``."""
    logits = queries @ keys.transpose(-1, -2) / tau
    return torch.logsumexp(logits, dim=-1) - torch.diagonal(logits, dim1=-2, dim2=-1)


def _embed(heads, G, frames, layers, locations):
    return heads(gather_patches(G.encode(frames, layers), locations))


def external_similarity(heads, G, x, y_synth, layers, locations, tau: float = 0.07,
                        detach_input: bool = False) -> torch.Tensor:
    """Patchwise NCE: each patch of ``y_synth`` should match the co-located
    patch of ``x`` against the other sampled patches of ``x``.

    Averaged over all layers and locations (and frames in a batch).
    """
    for idx in locations:
        if idx.numel() < 2:
            raise ValueError("external similarity needs at least 2 locations per layer")
    x, y_synth = _batch(x), _batch(y_synth)
    q = _embed(heads, G, y_synth, layers, locations)
    k = _embed(heads, G, x, layers, locations)
    total, count = 0.0, 0
    for ql, kl in zip(q, k):
        if detach_input:
            kl = kl.detach()
        terms = patch_nce(ql, kl, tau)
        total = total + terms.sum()
        count += terms.numel()
    return total / count


def pair_discrepancy(za: Sequence[torch.Tensor], zb: Sequence[torch.Tensor], tau: float) -> torch.Tensor:
    """Per-layer mean NCE of ``zb`` patches (queries) against ``za`` (keys).

    Inputs are lists of ``(B, S, K)`` embeddings; returns ``(B, L)``.
    """
    return torch.stack([patch_nce(qb, ka, tau).mean(-1) for ka, qb in zip(za, zb)], dim=-1)


def motion_degree(frames, embed: Callable, locations, tau: float = 0.07,
                  detach_input: bool = False) -> torch.Tensor:
    """Per-layer ratio of the second-pair to the first-pair NCE discrepancy.

    ``embed(frame_batch, locations)`` must return per-layer ``(B, S, K)``
    embeddings; the same ``locations`` are used for all three frames so
    negatives keep one fixed spatial order. Returns ``(L,)`` for single
    frames, ``(B, L)`` for batched ones.
    """
    f0, f1, f2 = frames
    single = f0.dim() == 3
    z = embed(torch.cat([_batch(f0), _batch(f1), _batch(f2)]), locations)
    b = _batch(f0).shape[0]
    z0 = [l[:b] for l in z]
    z1 = [l[b:2 * b] for l in z]
    z2 = [l[2 * b:] for l in z]
    if detach_input:
        z0 = [l.detach() for l in z0]
        z1k = [l.detach() for l in z1]
    else:
        z1k = z1
    first = pair_discrepancy(z0, z1, tau)
    second = pair_discrepancy(z1k, z2, tau)
    # same guard in numerator and denominator: equal discrepancies give exactly 1
    ratio = (second + MOTION_EPS) / (first + MOTION_EPS)
    return ratio[0] if single else ratio


def internal_similarity(d_input: torch.Tensor, d_synth: torch.Tensor) -> torch.Tensor:
    """``1 - cos(d_input, d_synth)``, in [0, 2]; batched over leading dims."""
    if d_input.shape != d_synth.shape:
        raise ValueError(f"motion-degree vectors differ in shape: "
                         f"{tuple(d_input.shape)} vs {tuple(d_synth.shape)}")
    n_in = d_input.norm(dim=-1)
    n_syn = d_synth.norm(dim=-1)
    if bool((n_in == 0).any()) or bool((n_syn == 0).any()):
        raise ValueError("degenerate motion-degree vector (zero norm)")
    cos = (d_input * d_synth).sum(-1) / (n_in * n_syn)
    return (1 - cos).clamp(0.0, 2.0).mean()


# -- total ---------------------------------------------------------------------

def check_finite(terms: Mapping[str, torch.Tensor], iteration: int | None = None) -> None:
    for name, value in terms.items():
        v = value.detach() if torch.is_tensor(value) else torch.tensor(float(value))
        if not bool(torch.isfinite(v).all()):
            raise NonFiniteLossError(name, iteration)


def total_objective(terms: Mapping[str, torch.Tensor], weights: LossWeights,
                    iteration: int | None = None) -> torch.Tensor:
    """Weighted sum of the six terms (each already summed over both directions).

    Missing terms count as zero.
    """
    check_finite(terms, iteration)
    total = 0.0
    for name in TERM_NAMES:
        if name in terms:
            total = total + weights.weight(name) * terms[name]
    if not torch.is_tensor(total):
        total = torch.tensor(float(total))
    return total

