"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` to see the lines in the output.
"""
import math
import time

import numpy as np
import pytest
import torch

from conftest import (
    STUB_TAPS, StubDiscriminator, StubGenerator, fd_check, random_frames, small_model_config,
    stub_heads, tiny_extractor, tiny_model_config,
)
from i2vgan import config as C
from i2vgan import losses as L
from i2vgan.cli import main
from i2vgan.data import VideoClip, load_manifest, triplets_of
from i2vgan.metrics import FeatureStats, PixelExtractor, fid, psnr, score_frames, ssim
from i2vgan.networks import gather_patches, grid_locations
from i2vgan.synthetic import make_layout_tree, make_moving_square_dataset, write_clip
from i2vgan.trainer import (
    TrainConfig, generator_terms, init_state, load_checkpoint, train, train_step,
)

TAU = 0.07


@pytest.fixture
def report(capsys):
    def _report(number: int, title: str, ok: bool, detail: str = ""):
        with capsys.disabled():
            print(f"\nCRITERION {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else ""))
        assert ok, detail
    return _report


# -- 1 ---------------------------------------------------------------------------

def _gradient_cases():
    E = tiny_extractor()
    G_X, G_Y = StubGenerator(seed=1), StubGenerator(seed=2)
    P_X, P_Y = StubGenerator(6, seed=3), StubGenerator(6, seed=4)
    D, D_log = StubDiscriminator(seed=5), StubDiscriminator(seed=6, sigmoid=True)
    heads = stub_heads(seed=7)
    x = tuple(random_frames(1, 3, 16, 16, seed=s) for s in range(3))
    y = random_frames(1, 3, 16, 16, seed=10)
    a = random_frames(1, 3, 16, 16, seed=11).requires_grad_(True)
    fmap = random_frames(4, 5, 5, seed=12).requires_grad_(True)
    probe = random_frames(4, 4, seed=13)
    v = torch.randn(8, dtype=torch.float64, generator=torch.Generator().manual_seed(0)).requires_grad_(True)
    pos, negs = torch.randn(8, dtype=torch.float64), torch.randn(5, 8, dtype=torch.float64)
    locs = grid_locations([256, 256, 64], 6)

    def embed(frames, l):
        return heads(gather_patches(G_Y.encode(frames, STUB_TAPS), l))

    def ins():
        d_in = L.motion_degree(x, embed, locs, TAU)
        d_syn = L.motion_degree(tuple(G_Y(f) for f in x), embed, locs, TAU)
        return L.internal_similarity(d_in, d_syn)

    def total():
        terms = {
            "adv": L.generator_adversarial(D, G_Y(x[0])),
            "cyc": L.cycle_loss(G_X, G_Y, E, x[0]),
            "rcur": L.recurrent_loss(P_X, E, *x),
            "rcyc": L.recycle_loss(G_X, G_Y, P_Y, E, *x),
            "exs": L.external_similarity(heads, G_Y, x[0], G_Y(x[0]), STUB_TAPS, locs, TAU),
            "ins": ins(),
        }
        return L.total_objective(terms, L.LossWeights())

    def params(*nets):
        return [p for n in nets for p in n.parameters()]

    return [
        ("adversarial D (lsgan)", lambda: L.discriminator_loss(D, y, G_Y(x[0])), params(D)),
        ("adversarial G (lsgan)", lambda: L.generator_adversarial(D, G_Y(x[0])), params(G_Y)),
        ("adversarial D (log)", lambda: L.discriminator_loss(D_log, y, G_Y(x[0]), "log"), params(D_log)),
        ("adversarial G (log)", lambda: L.generator_adversarial(D_log, G_Y(x[0]), "log"), params(G_Y)),
        ("l1_distance", lambda: L.l1_distance(a, y), [a]),
        ("gram", lambda: (L.gram(fmap) * probe).sum(), [fmap]),
        ("perceptual_content", lambda: L.perceptual_content(E, a, y), [a]),
        ("perceptual_style", lambda: L.perceptual_style(E, a, y), [a]),
        ("perceptual_total", lambda: L.perceptual_total(E, a, y), [a]),
        ("cycle_loss", lambda: L.cycle_loss(G_X, G_Y, E, x[0]), params(G_X, G_Y)),
        ("recurrent_loss", lambda: L.recurrent_loss(P_X, E, *x), params(P_X)),
        ("recycle_loss", lambda: L.recycle_loss(G_X, G_Y, P_Y, E, *x), params(G_X, G_Y, P_Y)),
        ("info_nce", lambda: L.info_nce(v / v.norm(), pos / pos.norm(),
                                        negs / negs.norm(dim=-1, keepdim=True), TAU), [v]),
        ("external_similarity", lambda: L.external_similarity(
            heads, G_Y, x[0], G_Y(x[0]), STUB_TAPS, locs, TAU), params(heads, G_Y)),
        ("motion_degree", lambda: L.motion_degree(tuple(G_Y(f) for f in x), embed, locs, TAU).sum(),
         params(G_Y, heads)),
        ("internal_similarity", ins, params(G_Y, heads)),
        ("total_objective", total, params(G_X, G_Y, P_X, P_Y, heads)),
    ]


def test_criterion_1_gradient_suite(report):
    start = time.perf_counter()
    worst, failures = 0.0, []
    for name, fn, params in _gradient_cases():
        for analytic, numeric, rel in fd_check(fn, params, n=5):
            worst = max(worst, rel)
            if rel >= 1e-3:
                failures.append(f"{name}: {analytic} vs {numeric}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 120
    report(1, "loss gradients match central differences", ok,
           f"worst rel err {worst:.2e}, {elapsed:.1f}s" + ("; " + "; ".join(failures) if failures else ""))


# -- 2 ---------------------------------------------------------------------------

def test_criterion_2_info_nce_oracle(report):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(0, 17))
        tau = float(rng.uniform(0.05, 1.0))
        vecs = rng.normal(size=(n + 2, 8))
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
        v, vp, vn = vecs[0], vecs[1], vecs[2:]
        sims = np.concatenate([[v @ vp], vn @ v]) / tau
        expo = np.exp(sims)
        oracle = -math.log(expo[0] / expo.sum())
        t = torch.from_numpy(vecs)
        got = float(L.info_nce(t[0], t[1], t[2:], tau))
        worst = max(worst, abs(got - oracle))
    e = torch.eye(8, dtype=torch.float64)
    zero = float(L.info_nce(e[0], e[0], e[:0], TAU))
    equal = max(abs(float(L.info_nce(e[0], e[1], e[1].repeat(n, 1), TAU)) - math.log(n + 1))
                for n in range(1, 17))
    ok = worst < 1e-6 and zero == 0.0 and equal < 1e-9
    report(2, "info_nce matches brute-force softmax oracle", ok,
           f"max abs err {worst:.1e}, N=0 -> {zero}, equal-sim err {equal:.1e}")


# -- 3 ---------------------------------------------------------------------------

def test_criterion_3_cyclic_identity_suite(report):
    E = tiny_extractor()
    rng = np.random.default_rng(0)
    worst_exact, least_perturbed = 0.0, float("inf")
    for i in range(100):
        sign = rng.choice([-1.0, 1.0], 3)
        scale = torch.tensor(sign * rng.uniform(0.3, 3.0, 3)).view(1, 3, 1, 1)
        shift = torch.tensor(rng.uniform(-0.5, 0.5, 3)).view(1, 3, 1, 1)
        x0 = torch.from_numpy(rng.uniform(-0.5, 0.5, (1, 3, 16, 16)))
        step = torch.from_numpy(rng.uniform(-0.2, 0.2, (1, 3, 16, 16)))
        x = (x0, x0 + step, x0 + 2 * step)

        def g_y(f, s=scale, b=shift):
            return f * s + b

        def g_x(f, s=scale, b=shift):
            return (f - b) / s

        def extrapolate(p, q):
            return 2 * q - p
        wrong = 1.0 + float(rng.uniform(0.02, 0.2))

        def g_x_off(f, s=scale, b=shift, k=wrong):
            return (f - b) / (s * k)

        def predict_off(p, q, k=wrong):
            return q + k * (q - p) * 0.5
        exact = [L.cycle_loss(g_x, g_y, E, x[0]), L.recurrent_loss(extrapolate, E, *x),
                 L.recycle_loss(g_x, g_y, extrapolate, E, *x)]
        off = [L.cycle_loss(g_x_off, g_y, E, x[0]), L.recurrent_loss(predict_off, E, *x),
               L.recycle_loss(g_x_off, g_y, extrapolate, E, *x),
               L.recycle_loss(g_x, g_y, predict_off, E, *x)]
        worst_exact = max(worst_exact, *(float(t) for t in exact))
        least_perturbed = min(least_perturbed, *(float(t) for t in off))
    ok = worst_exact < 1e-9 and least_perturbed > 1e-9
    report(3, "cyclic losses vanish exactly for exact stubs", ok,
           f"max exact {worst_exact:.1e}, min perturbed {least_perturbed:.2e}")


# -- 4 ---------------------------------------------------------------------------

def test_criterion_4_internal_similarity_invariance(report):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        d = torch.from_numpy(rng.normal(size=int(rng.integers(2, 9))))
        c = 10.0 * (1.0 - rng.random())  # in (0, 10]
        worst = max(worst, float(L.internal_similarity(d, c * d)))
    static_err = 0.0
    for seed in range(5):
        G, heads = StubGenerator(seed=seed), stub_heads(seed=seed)

        def embed(frames, l, G=G, heads=heads):
            return heads(gather_patches(G.encode(frames, STUB_TAPS), l))
        f = random_frames(3, 16, 16, seed=seed)
        with torch.no_grad():
            deg = L.motion_degree((f, f, f), embed, grid_locations([256, 256, 64], 16), TAU)
        static_err = max(static_err, float((deg - 1).abs().max()))
    ok = worst < 1e-9 and static_err < 1e-6
    report(4, "internal similarity scale invariance and static motion degree", ok,
           f"max 1-cos {worst:.1e}, static max |d-1| {static_err:.1e}")


# -- 5 ---------------------------------------------------------------------------

def test_criterion_5_metric_oracles(report):
    base = np.full((32, 32, 3), 100, np.uint8)
    p = psnr(base, base + 16)
    rng = np.random.default_rng(0)
    frames = [rng.integers(0, 256, (32, 32, 3), dtype=np.uint8) for _ in range(20)]
    ssim_same = all(ssim(f, f) == 1.0 for f in frames)
    f1d = fid(FeatureStats(np.array([0.0]), np.array([[1.0]])), FeatureStats(np.array([1.0]), np.array([[1.0]])))

    def corrupt(amplitude, seed):
        r = np.random.default_rng(seed)
        return [np.clip(f + r.normal(0, amplitude, f.shape), 0, 255).astype(np.uint8) for f in frames]
    ext = PixelExtractor(2)
    light = score_frames(corrupt(10, 1), frames, ext)
    heavy = score_frames(corrupt(60, 2), frames, ext)
    ordered = (light.psnr_mean > heavy.psnr_mean and light.ssim_mean > heavy.ssim_mean
               and light.fid < heavy.fid)
    ok = abs(p - 24.0488) <= 1e-3 and ssim_same and abs(f1d - 1.0) <= 1e-6 and ordered
    report(5, "metric oracles", ok,
           f"PSNR {p:.4f}, SSIM(a,a)=1 {ssim_same}, 1-D FID {f1d:.7f}, "
           f"light/heavy PSNR {light.psnr_mean:.2f}/{heavy.psnr_mean:.2f} "
           f"SSIM {light.ssim_mean:.3f}/{heavy.ssim_mean:.3f} FID {light.fid:.4f}/{heavy.fid:.4f}")


# -- 6 ---------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_synthetic_smoke_training(report, tmp_path):
    make_moving_square_dataset(tmp_path, frames_per_domain=200, test_frames=0, size=32)
    manifest = load_manifest(tmp_path)
    cfg = TrainConfig(weights=L.LossWeights(num_patches=64), model=small_model_config(),
                      total_iterations=500, checkpoint_interval=0, seed=0)
    start = time.perf_counter()
    _, history = train(manifest, cfg, log_every=0)
    elapsed = time.perf_counter() - start
    cyc = np.array([r["cyc"] for r in history])
    first = cyc[:20].mean()
    # trailing running mean over the same window length as the baseline
    last = cyc[-20:].mean()
    reduction = 1 - last / first
    finite = math.isfinite(history[-1]["total"])
    ok = len(history) == 500 and reduction >= 0.30 and finite
    report(6, "synthetic smoke run reduces cycle loss", ok,
           f"first-20 mean {first:.4f}, last-20 mean {last:.4f}, reduction {reduction:.1%}, "
           f"overall mean {cyc.mean():.4f}, final total {history[-1]['total']:.4f}, {elapsed:.0f}s")


# -- 7 ---------------------------------------------------------------------------

def _flag_config(flags):
    values = C.resolve(None, [f"ablation.no_{f}=true" for f in flags], env={})
    cfg = C.to_train_config(values)
    return TrainConfig(weights=L.LossWeights(num_patches=16), model=tiny_model_config(),
                       total_iterations=5, checkpoint_interval=0, seed=0, ablation=cfg.ablation)


def _hash(modules):
    import hashlib
    h = hashlib.sha256()
    for m in modules:
        for v in m.state_dict().values():
            h.update(v.numpy().tobytes())
    return h.hexdigest()


def test_criterion_7_ablation_isolation(report, tmp_path):
    make_moving_square_dataset(tmp_path, frames_per_domain=8, test_frames=0, size=16)
    manifest = load_manifest(tmp_path)
    defaults = L.LossWeights()
    assert (defaults.lambda_cycle, defaults.lambda_recurrent, defaults.lambda_recycle,
            defaults.lambda_external, defaults.lambda_internal) == (10, 10, 10, 0.1, 40)
    cfg = _flag_config([])
    _, history = train(manifest, cfg)
    sum_err = max(abs(r["total"] - sum(cfg.weights.weight(t) * r[t] for t in L.TERM_NAMES))
                  for r in history)

    from i2vgan.data import load_triplet
    x = load_triplet(manifest.clips("X")[0], 0, 16)
    y = load_triplet(manifest.clips("Y")[0], 3, 16)
    state = init_state(cfg)
    params = [p for net in state.bundle.trainable_generator_side() for p in net.parameters()]

    def grads(c):
        rng = torch.Generator().manual_seed(99)
        terms, parts, *_ = generator_terms(state.bundle, x, y, c, rng)
        total = L.total_objective(terms, c.weights)
        g = torch.autograd.grad(total, params, allow_unused=True, retain_graph=True)
        return terms, parts, [torch.zeros_like(p) if gi is None else gi for p, gi in zip(params, g)]

    full_terms, full_parts, full_g = grads(cfg)
    w = cfg.weights
    components = {
        "pcp": lambda p: sum(w.weight(s) * p[f"{s}_pcp_{d}"] for s in ("cyc", "rcur", "rcyc")
                             for d in ("x2y", "y2x")),
        "exs": lambda p: w.lambda_external * (p["exs_x2y"] + p["exs_y2x"]),
        "ins": lambda p: w.lambda_internal * (p["ins_x2y"] + p["ins_y2x"]),
        "recycle": lambda p: w.lambda_recycle * sum(p[f"rcyc_{k}_{d}"] for k in ("l1", "pcp")
                                                   for d in ("x2y", "y2x")),
    }
    owned_terms = {"pcp": set(), "exs": {"exs"}, "ins": {"ins"}, "recycle": {"rcyc"}}
    grad_err, value_err = 0.0, 0.0
    for flag, component in components.items():
        c = _flag_config([flag])
        terms, _, g = grads(c)
        comp_g = torch.autograd.grad(component(full_parts), params, allow_unused=True, retain_graph=True)
        for gf, ga, gc, p in zip(full_g, g, comp_g, params):
            gc = torch.zeros_like(p) if gc is None else gc
            grad_err = max(grad_err, float((gf - ga - gc).abs().max()))
        for t in L.TERM_NAMES:
            if t not in owned_terms[flag] and flag != "pcp":
                value_err = max(value_err, abs(float(terms[t].detach()) - float(full_terms[t].detach())))
    # heads learn only through the similarity terms: with both off they never move
    off = _flag_config(["exs", "ins"])
    s = init_state(off)
    heads_before = _hash([s.bundle.heads_X, s.bundle.heads_Y])
    gens_before = _hash([s.bundle.G_X, s.bundle.G_Y])
    train_step(s, x, y, off)
    heads_fixed = heads_before == _hash([s.bundle.heads_X, s.bundle.heads_Y])
    gens_moved = gens_before != _hash([s.bundle.G_X, s.bundle.G_Y])
    ok = sum_err <= 1e-6 and grad_err < 1e-9 and value_err == 0.0 and heads_fixed and gens_moved
    report(7, "ablation isolation", ok,
           f"weighted-sum err {sum_err:.1e}, gradient residual {grad_err:.1e}, "
           f"other-term drift {value_err:.1e}, heads frozen {heads_fixed}")


# -- 8 ---------------------------------------------------------------------------

def test_criterion_8_determinism_and_resume(report, tmp_path):
    make_moving_square_dataset(tmp_path / "data", frames_per_domain=10, test_frames=0, size=16)
    manifest = load_manifest(tmp_path / "data")
    cfg = TrainConfig(weights=L.LossWeights(num_patches=16), model=tiny_model_config(),
                      total_iterations=100, checkpoint_interval=0, seed=3)
    _, a = train(manifest, cfg)
    _, b = train(manifest, cfg)
    identical = a == b
    cfg20 = TrainConfig(weights=L.LossWeights(num_patches=16), model=tiny_model_config(),
                        total_iterations=20, checkpoint_interval=10, seed=3)
    _, full = train(manifest, cfg20, tmp_path / "full")
    state = load_checkpoint(tmp_path / "full" / "checkpoints" / "iter_000010.pt")
    _, rest = train(manifest, cfg20, tmp_path / "resumed", state)
    keys = ("total", *L.TERM_NAMES, "d_x", "d_y")
    diff = max(abs(full[-1][k] - rest[-1][k]) for k in keys)
    ok = identical and len(a) == 100 and rest[-1]["iteration"] == 19 and diff <= 1e-6
    report(8, "determinism and resume", ok,
           f"100-iteration logs identical {identical}, resume diff at +10 {diff:.1e}")


# -- 9 ---------------------------------------------------------------------------

IRVI_COUNTS = {"traffic": (17000, 1000), "sub-1": (1384, 347), "sub-2": (1040, 260),
               "sub-3": (1232, 308), "sub-4": (672, 169), "sub-5": (752, 188)}


def test_criterion_9_dataset_contract(report, tmp_path, capsys):
    make_layout_tree(tmp_path / "irvi", IRVI_COUNTS, size=4)
    code = main(["inspect", str(tmp_path / "irvi")])
    out = capsys.readouterr().out
    rows = {line.split()[0]: line.split()[1:4] for line in out.splitlines()[3:] if line.strip()}
    table_ok = code == 0 and all(rows.get(k) == [str(tr), str(te), str(tr + te)]
                                 for k, (tr, te) in IRVI_COUNTS.items())
    write_clip(np.zeros((50, 4, 4, 3), np.uint8), tmp_path / "clip")
    paths = tuple(sorted((tmp_path / "clip").iterdir()))
    counts_ok = True
    for T in range(3, 51):
        clip = VideoClip(paths[:T], "X", f"len{T}")
        trips = list(triplets_of(clip, size=4))
        enumerated = [t for t in range(T) if t + 2 <= T - 1]
        counts_ok &= len(trips) == len(enumerated) == T - 2
        counts_ok &= [tr.start_index for tr in trips] == enumerated
    ok = table_ok and counts_ok
    report(9, "dataset contract", ok,
           f"traffic row {rows.get('traffic')}, triplet counts T-2 for T=3..50 {counts_ok}")
