"""End-to-end acceptance runs A1-A9 on the tri-sphere scene.

The slow criteria share one trained field and one cache of embedding runs.
Each test records a PASS/FAIL line that pytest prints in its summary.
"""

import time

import numpy as np
import pytest

from noisenerf import autodiff as ad
from noisenerf.autodiff import GradTape, Tensor
from noisenerf.cli import write_ablation_csv
from noisenerf.metrics import lsb_embed, lsb_extract, psnr, ssim
from noisenerf.nerf import (
    SampleConfig,
    TrainConfig,
    composite,
    init_params,
    prepare_view,
    render_samples,
    render_view,
    train_nerf,
)
from noisenerf.persist import write_ppm
from noisenerf.scene import make_dataset, make_poses, make_secret, oracle_render, standard_scene
from noisenerf.stego import (
    ABLATION_VARIANTS,
    AblationRun,
    NoiseField,
    StegoConfig,
    ablation_config,
    embed,
    embed_tiled,
    extract_tiled,
    noise_update_step,
    perturb_loss,
    start_state,
    stego_rgb_loss,
)

RES = 64
SEEDS = (0, 1, 2)
LOSS_THRESHOLD = 5e-3
# four views share a 40 minute budget, so each tile gets a longer, faster run
TILED_STEGO = StegoConfig(iters=600, lr=0.06)


@pytest.fixture(scope="module")
def scene():
    return standard_scene("tri-sphere")


@pytest.fixture(scope="module")
def heldout_poses():
    return make_poses(3, RES, seed=1000)


@pytest.fixture(scope="module")
def trained(scene):
    t0 = time.perf_counter()
    data = make_dataset(scene, 8, RES, seed=0)
    params, history, _ = train_nerf(init_params(0), data, TrainConfig())
    return params, history, time.perf_counter() - t0


@pytest.fixture(scope="module")
def secret():
    return make_secret("checker", RES, RES, seed=0)


class RunCache:
    """Embedding runs keyed by (variant, seed) so A3 and A6 share the full runs."""

    def __init__(self, params, pose, secret):
        self.params, self.pose, self.secret = params, pose, secret
        self.runs, self.seconds = {}, {}

    def get(self, variant, seed):
        key = (variant, seed)
        if key not in self.runs:
            t0 = time.perf_counter()
            cfg = ablation_config(StegoConfig(), variant, seed)
            self.runs[key] = embed(self.params, self.pose, self.secret, cfg)
            self.seconds[key] = time.perf_counter() - t0
        return self.runs[key]


@pytest.fixture(scope="module")
def runs(trained, heldout_poses, secret):
    return RunCache(trained[0], heldout_poses[0], secret)


# ---------------------------------------------------------------- A1


def test_a1_losslessness(trained, heldout_poses, secret, tmp_path, verdicts):
    params = trained[0]
    t0 = time.perf_counter()
    weights = [t.data.tobytes() for t in params.tensors()]
    before = []
    for k, pose in enumerate(heldout_poses):
        write_ppm(tmp_path / f"before_{k}.ppm", render_view(params, pose))
        before.append((tmp_path / f"before_{k}.ppm").read_bytes())
    for k, pose in enumerate(heldout_poses):
        embed(params, pose, secret, StegoConfig(iters=20, seed=k))
    same = []
    for k, pose in enumerate(heldout_poses):
        write_ppm(tmp_path / f"after_{k}.ppm", render_view(params, pose))
        same.append((tmp_path / f"after_{k}.ppm").read_bytes() == before[k])
    untouched = [t.data.tobytes() for t in params.tensors()] == weights
    elapsed = time.perf_counter() - t0
    ok = all(same) and untouched and elapsed < 60
    verdicts.record("A1 losslessness", ok,
                    f"identical PPMs {sum(same)}/3, weights untouched={untouched}, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- A2


def test_a2_tiny_nerf_fidelity(trained, scene, heldout_poses, verdicts):
    params, history, train_seconds = trained
    t0 = time.perf_counter()
    scores = [psnr(render_view(params, p), oracle_render(scene, p)) for p in heldout_poses]
    elapsed = train_seconds + time.perf_counter() - t0
    iters = len(history)
    ok = min(scores) >= 25.0 and iters <= 20_000 and history[-1] < LOSS_THRESHOLD \
        and elapsed <= 15 * 60
    verdicts.record("A2 tiny-NeRF fidelity", ok,
                    f"held-out PSNR {', '.join(f'{s:.2f}' for s in scores)} dB, "
                    f"{iters} iters, final loss {history[-1]:.2e}, {elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- A3


def test_a3_embed_convergence(runs, verdicts):
    scores, trend, times = [], [], []
    for seed in SEEDS:
        _, report = runs.get("full", seed)
        scores.append(report.final_ssim)
        times.append(runs.seconds[("full", seed)])
        loss = np.asarray(report.frame_loss)
        trend.append(np.median(loss[199:300]) < np.median(loss[:50]))
    ok = min(scores) >= 0.95 and all(trend) and max(times) <= 600
    verdicts.record("A3 embed convergence", ok,
                    f"SSIM {', '.join(f'{s:.4f}' for s in scores)}, "
                    f"loss trend down {sum(trend)}/3, max {max(times):.0f}s/seed")
    assert ok


# ---------------------------------------------------------------- A4


def _mlp64(x, w1, b1, w2, b2, y):
    h = np.maximum(x @ w1 + b1, 0)
    return np.mean((h @ w2 + b2 - y) ** 2)


def _ray64(layers, enc, enc_dir, deltas, noise):
    """Float64 re-derivation of one ray's colour, independent of the tape."""
    h = enc.astype(np.float64) + noise
    *trunk, dens, ch, co = layers
    for w, b in trunk:
        h = np.maximum(h @ w + b, 0)
    z = (h @ dens[0] + dens[1])[:, 0]
    sigma = 0.5 * (z + np.sqrt(z * z + 4))
    hd = np.concatenate([h, np.broadcast_to(enc_dir, (len(h), len(enc_dir)))], axis=1)
    rgb = 1 / (1 + np.exp(-(np.maximum(hd @ ch[0] + ch[1], 0) @ co[0] + co[1])))
    od = sigma * deltas
    trans = np.exp(-np.concatenate([[0.0], np.cumsum(od)[:-1]]))
    return (trans * (1 - np.exp(-od))) @ rgb


def _rel(g, fd):
    return abs(g - fd) / max(abs(g), abs(fd), 1e-6)


def test_a4_gradient_correctness(trained, heldout_poses, verdicts):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    h = 1e-5

    # (i) random two-layer MLP, every parameter tensor probed
    x, y = rng.normal(size=(8, 5)), rng.normal(size=(8, 3))
    shapes = [(5, 16), (16,), (16, 3), (3,)]
    params = [rng.normal(size=s) for s in shapes]
    leaves = [Tensor(p, requires_grad=True) for p in params]
    with GradTape() as tape:
        hidden = ad.relu(ad.linear(Tensor(x), leaves[0], leaves[1]))
        loss = ad.mse(ad.linear(hidden, leaves[2], leaves[3]), Tensor(y))
    grads = tape.backward(loss)
    p64 = [Tensor(p).data.astype(np.float64) for p in params]
    mlp_err = []
    for _ in range(120):
        k = rng.integers(4)
        i = tuple(rng.integers(d) for d in shapes[k])
        hi, lo = [p.copy() for p in p64], [p.copy() for p in p64]
        hi[k][i] += h
        lo[k][i] -= h
        fd = (_mlp64(x, *hi, y) - _mlp64(x, *lo, y)) / (2 * h)
        mlp_err.append(_rel(float(grads[leaves[k]][i]), fd))

    # (ii) d pixel / d noise through encoding, field and compositing
    params = trained[0]
    pose = heldout_poses[1]
    view = prepare_view(pose, SampleConfig())
    layers = [(w.data.astype(np.float64), b.data.astype(np.float64)) for w, b in params.layers]
    clean = render_view(params, pose, view=view).reshape(-1, 3)
    hit = np.flatnonzero(clean.sum(axis=1) > 0.3)
    pix_err = []
    for p in rng.choice(hit, 25, replace=False):
        base = rng.normal(0, 0.05, view.enc_pos.shape[1:])
        c = int(rng.integers(3))
        leaf = Tensor(base[None], requires_grad=True)
        with GradTape() as tape:
            rgb = render_samples(params, view.enc_pos[p:p + 1], view.enc_dir[p:p + 1],
                                 view.grid.deltas[p:p + 1], leaf)
            out = ad.sum(ad.mul(rgb, Tensor(np.eye(3)[c][None])))
        g = tape.backward(out)[leaf][0]
        # probe samples that actually contribute to this pixel
        row_mag = np.abs(g).max(axis=1)
        live = np.flatnonzero(row_mag > 1e-3 * row_mag.max())
        enc_dir = view.enc_dir[p].astype(np.float64)
        deltas = view.grid.deltas[p].astype(np.float64)
        for _ in range(4):
            i = (rng.choice(live), rng.integers(base.shape[1]))
            hi, lo = base.copy(), base.copy()
            hi[i] += h
            lo[i] -= h
            fd = (_ray64(layers, view.enc_pos[p], enc_dir, deltas, hi)[c]
                  - _ray64(layers, view.enc_pos[p], enc_dir, deltas, lo)[c]) / (2 * h)
            pix_err.append(_rel(float(g[i]), fd))

    elapsed = time.perf_counter() - t0
    ok = max(mlp_err) <= 1e-3 and max(pix_err) <= 1e-3 and len(pix_err) >= 100 \
        and len(mlp_err) >= 100 and elapsed < 60
    verdicts.record("A4 gradient correctness", ok,
                    f"max rel err MLP {max(mlp_err):.1e} ({len(mlp_err)} probes), "
                    f"pixel/noise {max(pix_err):.1e} ({len(pix_err)} probes), {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- A5


def test_a5_tiled_secret(trained, verdicts):
    params = trained[0]
    t0 = time.perf_counter()
    poses = make_poses(4, RES, seed=2000)
    big = make_secret("random-smooth", 2 * RES, 2 * RES, seed=0)
    noises, layout, _ = embed_tiled(params, poses, big, TILED_STEGO)
    out = extract_tiled(params, poses, noises, layout)
    score = ssim(out, big.pixels)
    elapsed = time.perf_counter() - t0
    ok = out.shape == big.pixels.shape and score >= 0.95 and elapsed <= 40 * 60
    verdicts.record("A5 tiled secret", ok,
                    f"reassembled {out.shape[0]}x{out.shape[1]} SSIM {score:.4f}, "
                    f"{elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- A6


def test_a6_ablation_ordering(runs, tmp_path, verdicts):
    t0 = time.perf_counter()
    shared = sum(runs.seconds.get(("full", s), 0.0) for s in SEEDS)
    results = [AblationRun(v, s, runs.get(v, s)[1]) for v in ABLATION_VARIANTS for s in SEEDS]
    elapsed = time.perf_counter() - t0 + shared
    mean = {v: float(np.mean([r.final_loss for r in results if r.variant == v]))
            for v in ABLATION_VARIANTS}
    table = write_ablation_csv(tmp_path, results, [50, 200, 300])
    rows = [line.split(",") for line in table.read_text().splitlines()[1:]]
    csv_loss = {r[0]: float(r[-1]) for r in rows}
    order_ok = [r[0] for r in rows] == list(ABLATION_VARIANTS)
    beats_perturb = mean["full"] < mean["no-perturb"] and csv_loss["full"] < csv_loss["no-perturb"]
    beats_adaptive = mean["full"] < mean["no-adaptive"] and \
        csv_loss["full"] < csv_loss["no-adaptive"]
    ok = order_ok and beats_perturb and beats_adaptive and elapsed <= 30 * 60
    verdicts.record("A6 ablation ordering", ok,
                    "mean final rgb loss " + ", ".join(f"{v} {mean[v]:.3f}" for v in mean)
                    + f"; full<no-perturb={beats_perturb}, full<no-adaptive={beats_adaptive}, "
                    f"{elapsed / 60:.1f} min")
    assert ok


# ---------------------------------------------------------------- A7


def test_a7_rendering_invariants(verdicts):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    violations, total = 0, 0
    for n in range(1, 65):
        batch = 157 if n < 64 else 10_000 - 157 * 63
        sig = (rng.exponential(1.0, (batch, n)) * rng.choice([0.0, 1.0, 20.0], (batch, 1))) \
            .astype(np.float32)
        dl = rng.uniform(0, 0.5, (batch, n)).astype(np.float32)
        _, w = composite(np.ones((batch, n, 3), np.float32), sig, dl)
        sums = w.data.sum(axis=1)
        violations += int(np.sum((sums < -1e-6) | (sums > 1 + 1e-5)))
        trans = np.exp(-np.concatenate([np.zeros((batch, 1)),
                                        np.cumsum(sig * dl, axis=1)[:, :-1]], axis=1))
        violations += int(np.sum(np.any(np.diff(trans, axis=1) > 1e-7, axis=1)))
        # thicken one sample: nothing behind it may gain weight
        j = rng.integers(n, size=batch)
        thick = sig.copy()
        thick[np.arange(batch), j] += rng.uniform(0.1, 50, batch).astype(np.float32)
        _, w2 = composite(np.ones((batch, n, 3), np.float32), thick, dl)
        behind = np.arange(n)[None, :] > j[:, None]
        violations += int(np.sum(np.any((w2.data > w.data + 1e-6) & behind, axis=1)))
        total += batch
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and total == 10_000 and elapsed < 60
    verdicts.record("A7 rendering invariants", ok,
                    f"{violations} violations over {total} sequences, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- A8


def test_a8_metric_sanity(verdicts):
    rng = np.random.default_rng(8)
    x = rng.uniform(0, 0.9, (32, 32, 3))
    p = psnr(x, x + 0.1)
    s = ssim(x, x)
    lsb_ok = 0
    for _ in range(1000):
        cover = rng.integers(0, 256, tuple(rng.integers(1, 16, 2)) + (3,), dtype=np.uint8)
        bits = rng.integers(0, 2, rng.integers(0, cover.size + 1), dtype=np.uint8)
        lsb_ok += bool(np.array_equal(lsb_extract(lsb_embed(cover, bits), bits.size), bits))
    ok = abs(p - 20.0) <= 1e-6 and s == pytest.approx(1.0, abs=1e-12) and lsb_ok == 1000
    verdicts.record("A8 metric sanity", ok,
                    f"psnr {p:.9f} dB, ssim(x,x) {s:.12f}, LSB exact {lsb_ok}/1000")
    assert ok


# ---------------------------------------------------------------- A9


def test_a9_schedule_contract(trained, heldout_poses, verdicts):
    params = trained[0]
    pose = make_poses(1, 16, seed=1000)[0]
    cfg = StegoConfig(batch_sizes=(32, 64, 128, 256))
    assert (cfg.mu, cfg.lambda1, cfg.lambda2) == (50, 0.5, 0.5)
    target = make_secret("checker", 16, 16, seed=0, block=4)
    view = prepare_view(pose, SampleConfig())
    noise = NoiseField.random(view, cfg.noise_init_sigma, cfg.seed)
    state = start_state(params, pose, target, cfg, noise, view=view)
    checks, components = {}, []
    for it in range(1, cfg.iters + 1):
        before = noise
        noise, rec = noise_update_step(params, pose, noise, target, it, cfg, state)
        if it in (1, 50, 51, 300):
            expect = cfg.lambda1 * rec.rgb_loss + cfg.lambda2 * rec.perturb_loss \
                if it <= cfg.mu else rec.rgb_loss
            checks[it] = abs(rec.total_loss - expect) / max(abs(expect), 1e-12)
            # the recorded terms must be the real losses of the pre-step noise
            rgb = stego_rgb_loss(params, pose, before, target, rec.pixels, view=view).item()
            pert = perturb_loss(params, pose, before, rec.pixels, view=view).item()
            components += [abs(rec.rgb_loss - rgb) / abs(rgb),
                           abs(rec.perturb_loss - pert) / max(abs(pert), 1e-12)]
    ok = max(checks.values()) <= 1e-6 and max(components) <= 1e-5
    verdicts.record("A9 schedule contract", ok,
                    "relative error " + ", ".join(f"it{k} {v:.1e}" for k, v in checks.items())
                    + f"; recorded terms vs recomputation {max(components):.1e}")
    assert ok
