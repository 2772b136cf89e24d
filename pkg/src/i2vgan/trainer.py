"""Alternating generator / discriminator optimisation, checkpoints and inference."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from i2vgan import losses as L
from i2vgan.data import DatasetManifest, FrameTriplet, UnpairedTripletSampler, VideoClip, load_frame
from i2vgan.networks import (
    CheckpointError, ModelBundle, ModelConfig, SchemaVersionError, gather_patches,
    grid_locations, read_archive, sample_locations,
)

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1
HISTORY_FILE = "loss_history.jsonl"


@dataclass
class Ablation:
    disable_pcp: bool = False
    disable_exs: bool = False
    disable_ins: bool = False
    disable_recycle: bool = False


@dataclass
class TrainConfig:
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    learning_rate: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    total_iterations: int = 200_000
    # 0 disables periodic checkpoints; a final checkpoint is always written
    checkpoint_interval: int = 10_000
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)
    subsets: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.total_iterations < 0:
            raise ValueError("total_iterations must be non-negative")
        if self.checkpoint_interval < 0:
            raise ValueError("checkpoint_interval must be non-negative")
        self.model = replace(self.model, adversarial_mode=self.weights.adversarial_mode)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    bundle: ModelBundle
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    location_rng: torch.Generator
    iteration: int = 0
    loss_sums: dict[str, float] = field(default_factory=dict)
    sampler_state: dict | None = None

    @property
    def running_means(self) -> dict[str, float]:
        n = max(self.iteration, 1)
        return {k: v / n for k, v in self.loss_sums.items()}


def _make_optimizers(bundle: ModelBundle, lr: float, betas):
    g_params = [p for net in bundle.trainable_generator_side() for p in net.parameters()]
    d_params = [p for net in bundle.discriminators() for p in net.parameters()]
    return (torch.optim.Adam(g_params, lr=lr, betas=betas),
            torch.optim.Adam(d_params, lr=lr, betas=betas))


def init_state(cfg: TrainConfig) -> TrainState:
    bundle = ModelBundle(replace(cfg.model, seed=cfg.seed))
    opt_g, opt_d = _make_optimizers(bundle, cfg.learning_rate, (cfg.beta1, cfg.beta2))
    rng = torch.Generator().manual_seed(cfg.seed + 1)
    return TrainState(bundle, opt_g, opt_d, rng)


def learning_rate_at(cfg: TrainConfig, iteration: int) -> float:
    """Constant for the first half of training, then linear decay towards zero."""
    total = cfg.total_iterations
    half = total // 2
    if total == 0 or iteration < half:
        return cfg.learning_rate
    return cfg.learning_rate * max(total - iteration, 0) / (total - half)


def set_requires_grad(nets, flag: bool) -> None:
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


def _as_frames(t, bundle: ModelBundle) -> torch.Tensor:
    frames = t.stacked() if isinstance(t, FrameTriplet) else t
    if frames.dim() != 4 or frames.shape[0] != 3:
        raise ValueError(f"expected a triplet of frames (3, C, H, W), got {tuple(frames.shape)}")
    return frames.to(getattr(torch, bundle.config.dtype))


def _direction(bundle, src, G_fwd, G_back, P_src, P_tgt, D_tgt, heads, cfg, ext_locs,
               use_similarity):
    """All generator-side terms for one translation direction (source -> target)."""
    w, ab = cfg.weights, cfg.ablation
    E = bundle.perceptual
    layers = w.perceptual_layers
    pcp = not ab.disable_pcp
    zero = src.new_zeros(())
    parts = {}
    fake = G_fwd(src)

    parts["adv"] = L.generator_adversarial(D_tgt, fake, w.adversarial_mode)

    if w.lambda_cycle > 0:
        parts["cyc_l1"], parts["cyc_pcp"] = L.reconstruction_terms(E, src, G_back(fake), layers, pcp)
    else:
        parts["cyc_l1"] = parts["cyc_pcp"] = zero

    if w.lambda_recurrent > 0:
        pred = P_src(src[0:1], src[1:2])
        parts["rcur_l1"], parts["rcur_pcp"] = L.reconstruction_terms(E, src[2:3], pred, layers, pcp)
    else:
        parts["rcur_l1"] = parts["rcur_pcp"] = zero

    if w.lambda_recycle > 0 and not ab.disable_recycle:
        recycled = G_back(P_tgt(fake[0:1], fake[1:2]))
        parts["rcyc_l1"], parts["rcyc_pcp"] = L.reconstruction_terms(E, src[2:3], recycled, layers, pcp)
    else:
        parts["rcyc_l1"] = parts["rcyc_pcp"] = zero

    if use_similarity and w.lambda_external > 0 and not ab.disable_exs:
        parts["exs"] = L.external_similarity(heads, G_fwd, src, fake, bundle.taps, ext_locs,
                                             w.tau, w.detach_input_features)
    else:
        parts["exs"] = zero

    if use_similarity and w.lambda_internal > 0 and not ab.disable_ins:
        grid = grid_locations(bundle.tap_positions, w.num_patches)

        def embed(frames, locs):
            return heads(gather_patches(G_fwd.encode(frames, bundle.taps), locs))

        d_in = L.motion_degree(tuple(src), embed, grid, w.tau, w.detach_input_features)
        if w.detach_input_features:
            d_in = d_in.detach()
        d_syn = L.motion_degree(tuple(fake), embed, grid, w.tau)
        parts["ins"] = L.internal_similarity(d_in, d_syn)
    else:
        parts["ins"] = zero
    return parts, fake


def generator_terms(bundle: ModelBundle, x, y, cfg: TrainConfig, location_rng: torch.Generator):
    """Forward pass of the generator-side objective for one pair of triplets.

    Returns ``(terms, parts, fake_y, fake_x)``: ``terms`` maps each of the six
    objective terms (summed over both directions) to a tensor, ``parts`` holds
    the per-direction pieces.
    """
    xs, ys = _as_frames(x, bundle), _as_frames(y, bundle)
    w = cfg.weights
    # drawn every step, whatever the ablation, so the random stream is ablation-independent
    locs_xy = sample_locations(bundle.tap_positions, w.num_patches, location_rng)
    locs_yx = sample_locations(bundle.tap_positions, w.num_patches, location_rng)
    both = w.similarity_directions == "both"
    p_xy, fake_y = _direction(bundle, xs, bundle.G_Y, bundle.G_X, bundle.P_X, bundle.P_Y,
                              bundle.D_Y, bundle.heads_Y, cfg, locs_xy, True)
    p_yx, fake_x = _direction(bundle, ys, bundle.G_X, bundle.G_Y, bundle.P_Y, bundle.P_X,
                              bundle.D_X, bundle.heads_X, cfg, locs_yx, both)
    terms = {
        "adv": p_xy["adv"] + p_yx["adv"],
        "cyc": p_xy["cyc_l1"] + p_xy["cyc_pcp"] + p_yx["cyc_l1"] + p_yx["cyc_pcp"],
        "rcur": p_xy["rcur_l1"] + p_xy["rcur_pcp"] + p_yx["rcur_l1"] + p_yx["rcur_pcp"],
        "rcyc": p_xy["rcyc_l1"] + p_xy["rcyc_pcp"] + p_yx["rcyc_l1"] + p_yx["rcyc_pcp"],
        "exs": p_xy["exs"] + p_yx["exs"],
        "ins": p_xy["ins"] + p_yx["ins"],
    }
    parts = {f"{k}_x2y": v for k, v in p_xy.items()}
    parts.update({f"{k}_y2x": v for k, v in p_yx.items()})
    return terms, parts, fake_y, fake_x


def _set_lr(opt, lr):
    for group in opt.param_groups:
        group["lr"] = lr


def train_step(state: TrainState, x, y, cfg: TrainConfig) -> dict:
    """One generator update followed by one discriminator update.

    Returns the per-term loss record for this iteration.
    """
    b = state.bundle
    it = state.iteration
    lr = learning_rate_at(cfg, it)
    _set_lr(state.opt_g, lr)
    _set_lr(state.opt_d, lr)
    mode = cfg.weights.adversarial_mode

    set_requires_grad(b.discriminators(), False)
    state.opt_g.zero_grad(set_to_none=True)
    terms, parts, fake_y, fake_x = generator_terms(b, x, y, cfg, state.location_rng)
    total = L.total_objective(terms, cfg.weights, iteration=it)
    L.check_finite({"total": total}, it)
    total.backward()
    state.opt_g.step()

    set_requires_grad(b.discriminators(), True)
    state.opt_d.zero_grad(set_to_none=True)
    xs, ys = _as_frames(x, b), _as_frames(y, b)
    d_y = L.discriminator_loss(b.D_Y, ys, fake_y, mode)
    d_x = L.discriminator_loss(b.D_X, xs, fake_x, mode)
    L.check_finite({"d_x": d_x, "d_y": d_y}, it)
    (d_x + d_y).backward()
    state.opt_d.step()

    record = {"iteration": it}
    record.update({k: float(v.detach()) for k, v in terms.items()})
    for stage in ("cyc", "rcur", "rcyc"):
        record[f"{stage}_l1"] = sum(float(parts[f"{stage}_l1_{d}"].detach()) for d in ("x2y", "y2x"))
        record[f"{stage}_pcp"] = sum(float(parts[f"{stage}_pcp_{d}"].detach()) for d in ("x2y", "y2x"))
    record["total"] = float(total.detach())
    record["d_x"] = float(d_x.detach())
    record["d_y"] = float(d_y.detach())
    record["lr"] = lr

    state.iteration = it + 1
    for k in ("total", *L.TERM_NAMES, "d_x", "d_y"):
        state.loss_sums[k] = state.loss_sums.get(k, 0.0) + record[k]
    return record


def save_checkpoint(state: TrainState, path, cfg: TrainConfig | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": "train_state",
        "model_config": asdict(state.bundle.config),
        "arrays": state.bundle.arrays(),
        "opt_g": state.opt_g.state_dict(),
        "opt_d": state.opt_d.state_dict(),
        "iteration": state.iteration,
        "loss_sums": dict(state.loss_sums),
        "location_rng": state.location_rng.get_state(),
        "sampler_state": json.dumps(state.sampler_state) if state.sampler_state else None,
        "train_config": json.dumps(cfg.to_dict()) if cfg is not None else None,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(blob, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    blob = read_archive(path, CHECKPOINT_SCHEMA_VERSION, "train_state")
    try:
        bundle = ModelBundle(ModelConfig.from_dict(blob["model_config"]))
        bundle.load_arrays(blob["arrays"])
        opt_g, opt_d = _make_optimizers(bundle, 1e-3, (0.5, 0.999))
        opt_g.load_state_dict(blob["opt_g"])
        opt_d.load_state_dict(blob["opt_d"])
        rng = torch.Generator()
        rng.set_state(blob["location_rng"])
    except (KeyError, RuntimeError, ValueError, TypeError) as exc:
        raise CheckpointError(f"checkpoint {path} is incomplete or inconsistent: {exc}") from exc
    sampler = json.loads(blob["sampler_state"]) if blob.get("sampler_state") else None
    return TrainState(bundle, opt_g, opt_d, rng, blob["iteration"], dict(blob["loss_sums"]), sampler)


def checkpoint_iterations(total: int, interval: int) -> list[int]:
    """Iteration counts at which :func:`train` writes checkpoints (last one is final)."""
    marks = list(range(interval, total + 1, interval)) if interval > 0 else []
    if total > 0 and (not marks or marks[-1] != total):
        marks.append(total)
    return marks


def train(manifest: DatasetManifest, cfg: TrainConfig, output_dir=None,
          state: TrainState | None = None, log_every: int = 50):
    """Run (or resume) training up to ``cfg.total_iterations``.

    Returns ``(state, history)``. With ``output_dir`` set, the loss history is
    appended to ``loss_history.jsonl`` and checkpoints are written under
    ``checkpoints/`` every ``checkpoint_interval`` iterations plus ``final.pt``.
    """
    manifest = manifest.select(cfg.subsets)
    state = state or init_state(cfg)
    history: list[dict] = []
    if state.iteration >= cfg.total_iterations:
        return state, history

    sampler = UnpairedTripletSampler(manifest, cfg.seed, cfg.model.image_size)
    if state.sampler_state is not None:
        sampler.set_state(state.sampler_state)
    out = Path(output_dir) if output_dir is not None else None
    hist_file = None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        hist_file = open(out / HISTORY_FILE, "a")
    marks = set(checkpoint_iterations(cfg.total_iterations, cfg.checkpoint_interval))
    try:
        while state.iteration < cfg.total_iterations:
            x, y = next(sampler)
            record = train_step(state, x, y, cfg)
            state.sampler_state = sampler.get_state()
            history.append(record)
            if hist_file is not None:
                hist_file.write(json.dumps(record) + "\n")
                hist_file.flush()
            if log_every and state.iteration % log_every == 0:
                log.info("iter %d total %.4f cyc %.4f", state.iteration, record["total"], record["cyc"])
            if out is not None and state.iteration in marks:
                name = ("final.pt" if state.iteration == cfg.total_iterations
                        else f"iter_{state.iteration:06d}.pt")
                save_checkpoint(state, out / "checkpoints" / name, cfg)
    finally:
        if hist_file is not None:
            hist_file.close()
    return state, history


@dataclass
class TranslatedClip:
    frames: list[torch.Tensor]
    frame_seconds: list[float]

    @property
    def mean_seconds(self) -> float:
        return sum(self.frame_seconds) / len(self.frame_seconds) if self.frame_seconds else 0.0


@torch.no_grad()
def translate_frames(bundle: ModelBundle, frames, direction: str) -> TranslatedClip:
    G = bundle.generator(direction)
    dtype = getattr(torch, bundle.config.dtype)
    outputs, times = [], []
    for f in frames:
        start = time.perf_counter()
        outputs.append(G(f.to(dtype))[0])
        times.append(time.perf_counter() - start)
    return TranslatedClip(outputs, times)


def translate_clip(bundle: ModelBundle, clip: VideoClip, direction: str) -> TranslatedClip:
    """Translate every frame of ``clip`` independently, keeping their order."""
    bundle.generator(direction)  # validates direction before any I/O
    size = bundle.config.image_size
    return translate_frames(bundle, (load_frame(p, size, cache=False) for p in clip.frame_paths),
                            direction)


__all__ = [
    "Ablation", "TrainConfig", "TrainState", "init_state", "train_step", "train",
    "generator_terms", "save_checkpoint", "load_checkpoint", "checkpoint_iterations",
    "translate_clip", "translate_frames", "TranslatedClip", "learning_rate_at",
    "SchemaVersionError", "CheckpointError",
]
