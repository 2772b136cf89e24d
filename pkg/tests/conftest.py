import numpy as np
import pytest
import torch

from i2vgan.networks import ModelBundle, ModelConfig, PerceptualExtractor, ProjectionHead, ResnetGenerator


def tiny_model_config(**overrides) -> ModelConfig:
    kw = dict(image_size=16, ngf=4, ndf=4, n_downsampling=1, n_blocks=1, d_layers=2,
              head_hidden=16, embed_dim=8, perceptual="tiny", dtype="float64")
    kw.update(overrides)
    return ModelConfig(**kw)


def small_model_config(**overrides) -> ModelConfig:
    kw = dict(image_size=32, ngf=8, ndf=8, n_blocks=2, head_hidden=32, embed_dim=32,
              perceptual="tiny")
    kw.update(overrides)
    return ModelConfig(**kw)


@pytest.fixture
def tiny_bundle():
    return ModelBundle(tiny_model_config())


def random_frames(*shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g, dtype=dtype) * 2 - 1


def fd_check(loss_fn, params, n=5, h=1e-6, seed=0, min_grad=1e-7):
    """Compare autograd against central differences on ``n`` random scalar
    parameters; returns a list of (analytic, numeric, relative error)."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    candidates = []
    for pi, g in enumerate(grads):
        if g is None:
            continue
        for j in torch.nonzero(g.abs().flatten() > min_grad).flatten().tolist():
            candidates.append((pi, j))
    assert candidates, "no parameter receives a gradient"
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(candidates), size=min(n, len(candidates)), replace=False)
    results = []
    for k in picks:
        pi, j = candidates[k]
        p = params[pi]
        flat = p.data.view(-1)
        orig = flat[j].item()
        with torch.no_grad():
            flat[j] = orig + h
            up = float(loss_fn())
            flat[j] = orig - h
            down = float(loss_fn())
            flat[j] = orig
        numeric = (up - down) / (2 * h)
        analytic = float(grads[pi].flatten()[j])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric))
        results.append((analytic, numeric, rel))
    return results


class StubGenerator(torch.nn.Module):
    """Three-conv generator exposing the same ``encode`` tap interface as the real one."""

    def __init__(self, in_channels=3, width=4, seed=0):
        super().__init__()
        self.in_channels, self.image_size = in_channels, None
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.encoder = torch.nn.Sequential(
                torch.nn.Conv2d(in_channels, width, 3, padding=1), torch.nn.Tanh(),
                torch.nn.Conv2d(width, width, 3, stride=2, padding=1), torch.nn.Tanh())
            self.decoder = torch.nn.Sequential(
                torch.nn.Upsample(scale_factor=2),
                torch.nn.Conv2d(width, 3, 3, padding=1), torch.nn.Tanh())
        self.double()

    encode = ResnetGenerator.encode

    def forward(self, x, x1=None):
        if x1 is not None:
            x = torch.cat([x, x1], dim=1)
        return self.decoder(self.encoder(x))


class StubDiscriminator(torch.nn.Module):
    def __init__(self, width=4, seed=0, sigmoid=False):
        super().__init__()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            layers = [torch.nn.Conv2d(3, width, 4, 2, 1), torch.nn.LeakyReLU(0.2),
                      torch.nn.Conv2d(width, width, 4, 2, 1), torch.nn.LeakyReLU(0.2),
                      torch.nn.Conv2d(width, 1, 3, 1, 1)]
            if sigmoid:
                layers.append(torch.nn.Sigmoid())
            self.model = torch.nn.Sequential(*layers)
        self.double()

    def forward(self, x):
        return self.model(x)


STUB_TAPS = (0, 2, 4)


def stub_heads(seed=0, width=4, embed=8):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return ProjectionHead([3, width, width], hidden=8, out_dim=embed).double()


def tiny_extractor():
    return PerceptualExtractor("tiny").double()
