"""Generators, temporal predictors, PatchGAN discriminators, projection heads
and the frozen perceptual feature extractor."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

NETWORK_NAMES = ("G_X", "G_Y", "P_X", "P_Y", "D_X", "D_Y", "heads_X", "heads_Y", "perceptual")


class ShapeError(ValueError):
    pass


def _check_frames(x: torch.Tensor, channels: int, size: int | None, who: str) -> torch.Tensor:
    """Accept ``(C, H, W)`` or ``(B, C, H, W)``; return a 4-D batch."""
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != channels:
        raise ShapeError(f"{who}: expected ({channels}, H, W) frames, got {tuple(x.shape)}")
    if size is not None and tuple(x.shape[2:]) != (size, size):
        raise ShapeError(f"{who}: expected {size}x{size} frames, got {tuple(x.shape[2:])}")
    return x


def init_weights(net: nn.Module, std: float = 0.02) -> None:
    for m in net.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class ResnetBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), nn.InstanceNorm2d(dim), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(dim, dim, 3), nn.InstanceNorm2d(dim),
        )

    def forward(self, x):
        return x + self.block(x)


class ResnetGenerator(nn.Module):
    """Encoder (stem + strided convs) -> residual blocks -> decoder ending in tanh.

    ``encoder`` is kept as a flat ``nn.Sequential`` so patch features can be
    tapped by module position: tap ``k`` is the activation after the first
    ``k`` encoder modules (tap 0 is the raw input).
    """

    def __init__(self, in_channels: int = 3, out_channels: int = 3, ngf: int = 64,
                 n_downsampling: int = 2, n_blocks: int = 9, image_size: int | None = 256):
        super().__init__()
        self.in_channels = in_channels
        self.image_size = image_size
        # no in-place activations here: encoder outputs are tapped for patch features
        enc = [nn.ReflectionPad2d(3), nn.Conv2d(in_channels, ngf, 7),
               nn.InstanceNorm2d(ngf), nn.ReLU()]
        for i in range(n_downsampling):
            mult = 2 ** i
            enc += [nn.Conv2d(ngf * mult, ngf * mult * 2, 3, stride=2, padding=1),
                    nn.InstanceNorm2d(ngf * mult * 2), nn.ReLU()]
        self.encoder = nn.Sequential(*enc)
        mult = 2 ** n_downsampling
        self.blocks = nn.Sequential(*[ResnetBlock(ngf * mult) for _ in range(n_blocks)])
        dec = []
        for i in range(n_downsampling):
            m = 2 ** (n_downsampling - i)
            dec += [nn.ConvTranspose2d(ngf * m, ngf * m // 2, 3, stride=2, padding=1,
                                       output_padding=1),
                    nn.InstanceNorm2d(ngf * m // 2), nn.ReLU(True)]
        dec += [nn.ReflectionPad2d(3), nn.Conv2d(ngf, out_channels, 7), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)

    def default_taps(self, count: int = 5) -> tuple[int, ...]:
        """``count`` evenly spaced taps from the input through the last downsampling block."""
        n = len(self.encoder)
        taps = np.unique(np.floor(np.linspace(0, n, count)).astype(int))
        return tuple(int(t) for t in taps)

    def forward(self, x):
        x = _check_frames(x, self.in_channels, self.image_size, type(self).__name__)
        return self.decoder(self.blocks(self.encoder(x)))

    def encode(self, x, taps) -> list[torch.Tensor]:
        """Feature maps at the requested encoder taps, in the order given."""
        x = _check_frames(x, self.in_channels, self.image_size, type(self).__name__)
        taps = list(taps)
        n = len(self.encoder)
        for t in taps:
            if not 0 <= t <= n:
                raise ValueError(f"encoder tap {t} outside 0..{n}")
        wanted = set(taps)
        feats = {0: x} if 0 in wanted else {}
        h = x
        last = max(taps)
        for i, layer in enumerate(self.encoder, start=1):
            if i > last:
                break
            h = layer(h)
            if i in wanted:
                feats[i] = h
        return [feats[t] for t in taps]


class Predictor(ResnetGenerator):
    """Temporal predictor: two frames concatenated along channels -> next frame."""

    def __init__(self, channels: int = 3, **kwargs):
        super().__init__(in_channels=2 * channels, out_channels=channels, **kwargs)
        self.channels = channels

    def forward(self, f_t, f_t1=None):
        if f_t1 is not None:
            a = _check_frames(f_t, self.channels, self.image_size, "Predictor")
            b = _check_frames(f_t1, self.channels, self.image_size, "Predictor")
            if a.shape != b.shape:
                raise ShapeError(f"Predictor: frame shapes differ {tuple(a.shape)} vs {tuple(b.shape)}")
            f_t = torch.cat([a, b], dim=1)
        return super().forward(f_t)


class PatchDiscriminator(nn.Module):
    """PatchGAN: a map of realness scores, one per overlapping input patch."""

    def __init__(self, in_channels: int = 3, ndf: int = 64, n_layers: int = 3,
                 use_sigmoid: bool = False, image_size: int | None = 256):
        super().__init__()
        self.in_channels = in_channels
        self.image_size = image_size
        self.use_sigmoid = use_sigmoid
        layers = [nn.Conv2d(in_channels, ndf, 4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        mult = 1
        for n in range(1, n_layers + 1):
            prev, mult = mult, min(2 ** n, 8)
            stride = 2 if n < n_layers else 1
            layers += [nn.Conv2d(ndf * prev, ndf * mult, 4, stride=stride, padding=1),
                       nn.InstanceNorm2d(ndf * mult), nn.LeakyReLU(0.2, True)]
        layers.append(nn.Conv2d(ndf * mult, 1, 4, stride=1, padding=1))
        if use_sigmoid:
            layers.append(nn.Sigmoid())
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        x = _check_frames(x, self.in_channels, self.image_size, "PatchDiscriminator")
        return self.model(x)

    def output_size(self, size: int) -> int:
        """Spatial size of the score map for a ``size`` x ``size`` input."""
        for m in self.model:
            if isinstance(m, nn.Conv2d):
                size = (size + 2 * m.padding[0] - m.kernel_size[0]) // m.stride[0] + 1
        return size


class ProjectionHead(nn.Module):
    """One two-layer MLP per tapped encoder layer; outputs are unit vectors."""

    def __init__(self, in_dims, hidden: int = 256, out_dim: int = 256):
        super().__init__()
        self.in_dims = tuple(int(d) for d in in_dims)
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(d, hidden), nn.ReLU(True), nn.Linear(hidden, out_dim))
            for d in self.in_dims
        )

    def forward(self, features):
        if len(features) != len(self.mlps):
            raise ShapeError(f"expected {len(self.mlps)} feature layers, got {len(features)}")
        out = []
        for i, (f, mlp) in enumerate(zip(features, self.mlps)):
            if f.shape[-1] != self.in_dims[i]:
                raise ShapeError(f"layer {i}: feature dim {f.shape[-1]} != head input {self.in_dims[i]}")
            out.append(F.normalize(mlp(f), dim=-1, eps=1e-12))
        return out


# VGG16 `features` indices of relu1_2, relu2_2, relu3_3, relu4_3
VGG16_TAPS = {"relu1_2": 3, "relu2_2": 8, "relu3_3": 15, "relu4_3": 22}
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


def _tiny_features(widths=(8, 16, 16, 32)) -> tuple[nn.Sequential, dict]:
    layers, taps, c = [], {}, 3
    for i, w in enumerate(widths, start=1):
        if i > 1:
            layers.append(nn.AvgPool2d(2))
        layers += [nn.Conv2d(c, w, 3, padding=1), nn.ReLU()]
        taps[f"relu{i}"] = len(layers) - 1
        c = w
    return nn.Sequential(*layers), taps


class PerceptualExtractor(nn.Module):
    """Frozen convolutional feature network exposing intermediate ReLU maps.

    ``arch="vgg16"`` builds the torchvision VGG16 trunk; pass ``weights``
    (a local ``.pth`` state dict) for ImageNet features. Without weights the
    trunk is initialised from ``seed`` and stays fixed, which keeps every
    loss well defined but is not a semantic feature space. ``arch="tiny"`` is
    a four-stage conv stack for tests and CPU smoke runs.
    """

    def __init__(self, arch: str = "vgg16", weights: str | None = None, seed: int = 0):
        super().__init__()
        self.arch = arch
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            if arch == "vgg16":
                from torchvision.models import vgg16
                trunk = vgg16(weights=None).features[:VGG16_TAPS["relu4_3"] + 1]
                for m in trunk:
                    if isinstance(m, nn.ReLU):
                        m.inplace = False
                taps = dict(VGG16_TAPS)
            elif arch == "tiny":
                trunk, taps = _tiny_features()
            else:
                raise ValueError(f"unknown perceptual architecture {arch!r}")
        if weights:
            state = torch.load(weights, map_location="cpu", weights_only=True)
            state = {k.removeprefix("features."): v for k, v in state.items()
                     if not k.startswith("classifier")}
            trunk.load_state_dict(state, strict=False)
            self.pretrained = True
        else:
            self.pretrained = False
        self.trunk = trunk
        self.taps = taps
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    @property
    def layers(self) -> tuple[str, ...]:
        return tuple(self.taps)

    @property
    def identifier(self) -> str:
        return f"{self.arch}{'-pretrained' if self.pretrained else '-fixed-init'}"

    def published_shapes(self, size: int) -> dict[str, tuple[int, int, int]]:
        with torch.no_grad():
            probe = torch.zeros(1, 3, size, size, dtype=self.mean.dtype, device=self.mean.device)
            feats = self.features(probe, self.layers)
        return {k: tuple(v.shape[1:]) for k, v in feats.items()}

    def features(self, x, layers=None) -> dict[str, torch.Tensor]:
        layers = self.layers if layers is None else tuple(layers)
        for name in layers:
            if name not in self.taps:
                raise KeyError(f"unknown perceptual layer {name!r}; available: {', '.join(self.taps)}")
        x = _check_frames(x, 3, None, "PerceptualExtractor")
        h = ((x + 1) / 2 - self.mean) / self.std
        wanted = {self.taps[n]: n for n in layers}
        last = max(wanted)
        out = {}
        for i, layer in enumerate(self.trunk):
            h = layer(h)
            if i in wanted:
                out[wanted[i]] = h
            if i >= last:
                break
        return out

    def forward(self, x, layers=None):
        return self.features(x, layers)


@dataclass
class ModelConfig:
    image_size: int = 256
    ngf: int = 64
    ndf: int = 64
    n_downsampling: int = 2
    n_blocks: int = 9
    d_layers: int = 3
    head_hidden: int = 256
    embed_dim: int = 256
    num_taps: int = 5
    perceptual: str = "vgg16"
    perceptual_weights: str | None = None
    adversarial_mode: str = "lsgan"
    seed: int = 0
    dtype: str = "float32"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ModelBundle(nn.Module):
    """All networks of one translation model, built from a :class:`ModelConfig`.

    ``heads_Y`` embeds patches from ``G_Y``'s encoder (the X->Y direction),
    ``heads_X`` those from ``G_X``.
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        dtype = getattr(torch, cfg.dtype)
        gen_kw = dict(ngf=cfg.ngf, n_downsampling=cfg.n_downsampling, n_blocks=cfg.n_blocks,
                      image_size=cfg.image_size)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.G_X = ResnetGenerator(**gen_kw)
            self.G_Y = ResnetGenerator(**gen_kw)
            self.P_X = Predictor(**gen_kw)
            self.P_Y = Predictor(**gen_kw)
            use_sigmoid = cfg.adversarial_mode == "log"
            self.D_X = PatchDiscriminator(ndf=cfg.ndf, n_layers=cfg.d_layers,
                                          use_sigmoid=use_sigmoid, image_size=cfg.image_size)
            self.D_Y = PatchDiscriminator(ndf=cfg.ndf, n_layers=cfg.d_layers,
                                          use_sigmoid=use_sigmoid, image_size=cfg.image_size)
            for net in (self.G_X, self.G_Y, self.P_X, self.P_Y, self.D_X, self.D_Y):
                init_weights(net)
            self.taps = self.G_Y.default_taps(cfg.num_taps)
            probe = self.G_Y.encode(torch.zeros(1, 3, cfg.image_size, cfg.image_size), self.taps)
            dims = [f.shape[1] for f in probe]
            self.tap_positions = [f.shape[-2] * f.shape[-1] for f in probe]
            self.heads_X = ProjectionHead(dims, cfg.head_hidden, cfg.embed_dim)
            self.heads_Y = ProjectionHead(dims, cfg.head_hidden, cfg.embed_dim)
            init_weights(self.heads_X)
            init_weights(self.heads_Y)
        self.perceptual = PerceptualExtractor(cfg.perceptual, cfg.perceptual_weights, seed=cfg.seed)
        self.to(dtype)

    def generator(self, direction: str) -> ResnetGenerator:
        """``"x2y"`` -> G_Y, ``"y2x"`` -> G_X."""
        if direction == "x2y":
            return self.G_Y
        if direction == "y2x":
            return self.G_X
        raise ValueError(f"direction must be 'x2y' or 'y2x', got {direction!r}")

    def trainable_generator_side(self) -> list[nn.Module]:
        return [self.G_X, self.G_Y, self.P_X, self.P_Y, self.heads_X, self.heads_Y]

    def discriminators(self) -> list[nn.Module]:
        return [self.D_X, self.D_Y]

    def arrays(self) -> dict[str, torch.Tensor]:
        """All parameters and buffers keyed ``<network>.<layer path>``."""
        out = {}
        for name in NETWORK_NAMES:
            for key, value in getattr(self, name).state_dict().items():
                out[f"{name}.{key}"] = value.detach().clone()
        return out

    def load_arrays(self, arrays: dict[str, torch.Tensor]) -> None:
        self.load_state_dict(arrays, strict=True)


BUNDLE_SCHEMA_VERSION = 1


class CheckpointError(Exception):
    pass


class SchemaVersionError(CheckpointError):
    pass


def read_archive(path, expected_version: int, kind: str) -> dict:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"corrupt or unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(blob, dict) or "schema_version" not in blob:
        raise CheckpointError(f"{path} is not a checkpoint archive")
    if blob.get("kind") != kind:
        raise CheckpointError(f"{path} holds a {blob.get('kind')!r} archive, expected {kind!r}")
    if blob["schema_version"] != expected_version:
        raise SchemaVersionError(
            f"checkpoint schema version {blob['schema_version']} != supported {expected_version}")
    return blob


def save_bundle(bundle: ModelBundle, path) -> None:
    torch.save({"schema_version": BUNDLE_SCHEMA_VERSION, "kind": "bundle",
                "model_config": asdict(bundle.config), "arrays": bundle.arrays()}, Path(path))


def load_bundle(path) -> ModelBundle:
    """Load the networks from a bundle archive or a full training checkpoint."""
    from i2vgan.trainer import CHECKPOINT_SCHEMA_VERSION

    try:
        blob = read_archive(path, BUNDLE_SCHEMA_VERSION, "bundle")
    except SchemaVersionError:
        raise
    except CheckpointError:
        blob = read_archive(path, CHECKPOINT_SCHEMA_VERSION, "train_state")
    bundle = ModelBundle(ModelConfig.from_dict(blob["model_config"]))
    bundle.load_arrays(blob["arrays"])
    return bundle


# Thin functional wrappers over the modules above.

def generate(G: ResnetGenerator, x: torch.Tensor) -> torch.Tensor:
    out = G(x)
    return out[0] if x.dim() == 3 else out


def predict_next(P: Predictor, f_t: torch.Tensor, f_t1: torch.Tensor) -> torch.Tensor:
    out = P(f_t, f_t1)
    return out[0] if f_t.dim() == 3 else out


def discriminate(D: PatchDiscriminator, f: torch.Tensor) -> torch.Tensor:
    out = D(f)
    return out[0] if f.dim() == 3 else out


def _positions(f) -> int:
    return int(f) if isinstance(f, int) else f.shape[-2] * f.shape[-1]


def sample_locations(maps_or_sizes, num_patches: int, generator: torch.Generator | None = None):
    """Random spatial indices into each flattened ``H*W`` grid.

    Accepts feature maps or plain position counts. When a grid has no more
    than ``num_patches`` positions, all of them are used (shuffled).
    """
    locs = []
    for f in maps_or_sizes:
        hw = _positions(f)
        perm = torch.randperm(hw, generator=generator)
        locs.append(perm[:min(num_patches, hw)])
    return locs


def grid_locations(maps_or_sizes, num_patches: int):
    """Deterministic, evenly spread spatial indices (identical on every call)."""
    locs = []
    for f in maps_or_sizes:
        hw = _positions(f)
        n = min(num_patches, hw)
        locs.append(torch.from_numpy(np.unique(np.linspace(0, hw - 1, n).round().astype(np.int64))))
    return locs


def gather_patches(feature_maps, locations) -> list[torch.Tensor]:
    """Pick columns of each ``(B, C, H, W)`` map -> list of ``(B, S, C)``."""
    out = []
    for f, idx in zip(feature_maps, locations):
        flat = f.flatten(2)
        hw = flat.shape[-1]
        if idx.numel() and (int(idx.min()) < 0 or int(idx.max()) >= hw):
            raise IndexError(f"patch location out of range for a map with {hw} positions")
        out.append(flat[:, :, idx].transpose(1, 2))
    return out


def encode_patches(G: ResnetGenerator, f: torch.Tensor, layers, locations) -> list[torch.Tensor]:
    """Raw encoder feature columns at ``locations`` for each tapped layer.

    Returns one ``(B, S_l, C_l)`` tensor per layer (``(S_l, C_l)`` for a single frame).
    """
    layers = list(layers)
    if len(locations) != len(layers):
        raise ValueError("need one location set per layer")
    feats = gather_patches(G.encode(f, layers), locations)
    return [p[0] for p in feats] if f.dim() == 3 else feats


def project(head: ProjectionHead, features) -> list[torch.Tensor]:
    return head(features)


def extract_perceptual(E: PerceptualExtractor, f: torch.Tensor, layer: str) -> torch.Tensor:
    out = E.features(f, [layer])[layer]
    return out[0] if f.dim() == 3 else out
