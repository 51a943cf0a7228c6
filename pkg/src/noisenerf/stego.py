"""Hide an image in a frozen radiance field by optimising additive input noise.

The noise lives on the encoded sample positions of one viewpoint's
deterministic sample grid. Rendering that viewpoint with the noise reveals the
secret; rendering anything without it touches only the untouched weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, GradTape, Tensor, adam_step
from .metrics import psnr, ssim
from .nerf import (
    CameraPose,
    RadianceFieldParams,
    SampleConfig,
    ViewpointMismatch,
    ViewSamples,
    check_noise,
    prepare_view,
    render_samples,
    render_view,
)
from .scene import SecretImage

_F32 = np.float32


@dataclass
class StegoConfig:
    """Loss weights, schedule and pixel-selection settings for one embedding run.

    ``adaptive=False`` replaces adaptive selection by a uniformly random batch
    of ``max(batch_sizes)`` pixels per iteration (the ablation baseline).
    """

    lambda1: float = 0.5
    lambda2: float = 0.5
    mu: int = 50
    lr: float = 0.03
    decay: float = 1.0
    decay_every: int = 100
    iters: int = 300
    batch_sizes: tuple = (256, 512, 1024, 2048)
    noise_init_sigma: float = 0.01
    seed: int = 0
    adaptive: bool = True
    adam_beta2: float = 0.9

    def __post_init__(self):
        self.batch_sizes = tuple(int(s) for s in self.batch_sizes)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.decay_every < 1 or self.iters < 0:
            raise ValueError("decay_every must be >= 1 and iters >= 0")
        if not self.batch_sizes:
            raise ValueError("batch size set S must be non-empty")
        if list(self.batch_sizes) != sorted(set(self.batch_sizes)) or self.batch_sizes[0] < 1:
            raise ValueError("batch sizes must be positive and strictly ascending")
        if self.noise_init_sigma < 0:
            raise ValueError("noise_init_sigma must be non-negative")
        if not 0 <= self.adam_beta2 < 1:
            raise ValueError("adam_beta2 must lie in [0, 1)")

    def lr_at(self, iteration: int) -> float:
        return self.lr * self.decay ** ((iteration - 1) // self.decay_every)


@dataclass
class NoiseField:
    viewpoint_id: bytes
    grid_hash: bytes
    values: Tensor  # [n_rays, n_samples, pos_width]

    @classmethod
    def zeros(cls, view: ViewSamples) -> "NoiseField":
        return cls(view.viewpoint_id, view.grid_hash,
                   Tensor._wrap(np.zeros(view.enc_pos.shape, _F32)))

    @classmethod
    def random(cls, view: ViewSamples, sigma: float, seed: int) -> "NoiseField":
        rng = np.random.default_rng(seed)
        vals = (sigma * rng.standard_normal(view.enc_pos.shape)).astype(_F32)
        return cls(view.viewpoint_id, view.grid_hash, Tensor._wrap(vals))

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass
class EmbedReport:
    total_loss: list = field(default_factory=list)
    rgb_loss: list = field(default_factory=list)
    perturb_loss: list = field(default_factory=list)
    batch_size: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    frame_loss: list = field(default_factory=list)  # full-frame rgb loss
    final_ssim: float = float("nan")
    final_psnr: float = float("nan")
    final_rgb_loss: float = float("nan")
    iterations: int = 0

    def rows(self):
        for i in range(self.iterations):
            yield {
                "iteration": i + 1,
                "total_loss": self.total_loss[i],
                "rgb_loss": self.rgb_loss[i],
                "perturb_loss": self.perturb_loss[i],
                "batch_size": self.batch_size[i],
                "ssim": self.ssim[i],
                "frame_loss": self.frame_loss[i],
            }

    def summary(self) -> dict:
        return {
            "final_ssim": self.final_ssim,
            "final_psnr": "inf" if math.isinf(self.final_psnr) else self.final_psnr,
            "final_rgb_loss": self.final_rgb_loss,
            "iterations": self.iterations,
        }


@dataclass
class ProbeState:
    """Loss reduction per queried pixel, last measured for each batch size."""

    scores: dict = field(default_factory=dict)
    last_probe: dict = field(default_factory=dict)


@dataclass
class StegoState:
    """Mutable optimisation state carried between noise updates."""

    view: ViewSamples
    target: np.ndarray  # [R, 3] secret pixels
    clean: np.ndarray  # [R, 3] noise-free render, a constant
    frame: np.ndarray  # [R, 3] render with the current noise
    pixel_losses: np.ndarray  # [R] current rgb loss per pixel
    adam: AdamState
    probe: ProbeState = field(default_factory=ProbeState)


@dataclass
class StepRecord:
    total_loss: float
    rgb_loss: float
    perturb_loss: float
    batch_size: int
    pixels: np.ndarray


# ---------------------------------------------------------------- losses


def _view_for(params, pose, cfg, view):
    if view is not None:
        return view
    return prepare_view(pose, cfg or SampleConfig(), params.l_pos, params.l_dir)


def _pixel_index(pixels, n) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.intp).ravel()
    if pixels.size == 0:
        raise ValueError("pixel batch is empty")
    if pixels.min() < 0 or pixels.max() >= n:
        raise IndexError("pixel index outside the image")
    return pixels


def _render_rows(params, view: ViewSamples, noise_rows, pixels):
    return render_samples(params, view.enc_pos[pixels], view.enc_dir[pixels],
                          view.grid.deltas[pixels], noise_rows)


def _noise_rows(noise: NoiseField, pixels):
    return ad.take(noise.values, pixels, axis=0)


def _secret_flat(secret, pose: CameraPose) -> np.ndarray:
    pix = secret.pixels if isinstance(secret, SecretImage) else np.asarray(secret)
    if pix.shape != (pose.height, pose.width, 3):
        raise ValueError(
            f"secret is {pix.shape[:2]} but the viewpoint renders "
            f"{(pose.height, pose.width)}"
        )
    return np.asarray(pix, _F32).reshape(-1, 3)


def stego_rgb_loss(params, pose, noise: NoiseField, secret, pixels,
                   cfg: SampleConfig | None = None, view: ViewSamples | None = None) -> Tensor:
    """Summed squared colour error of the noisy render against the secret on ``pixels``."""
    view = _view_for(params, pose, cfg, view)
    check_noise(noise, view)
    target = _secret_flat(secret, pose)
    pixels = _pixel_index(pixels, view.n_rays)
    rgb = _render_rows(params.frozen(), view, _noise_rows(noise, pixels), pixels)
    return ad.sum(ad.square(ad.sub(rgb, target[pixels])))


def perturb_loss(params, pose, noise: NoiseField, pixels, cfg: SampleConfig | None = None,
                 view: ViewSamples | None = None, clean=None) -> Tensor:
    """Negated summed squared distance between noisy and clean renders on ``pixels``.

    ``clean`` is the cached noise-free render ([R, 3] or [H, W, 3]); it is
    computed here when absent.
    """
    view = _view_for(params, pose, cfg, view)
    check_noise(noise, view)
    pixels = _pixel_index(pixels, view.n_rays)
    frozen = params.frozen()
    if clean is None:
        clean_rows = _render_rows(frozen, view, None, pixels).data
    else:
        clean_rows = np.asarray(clean, _F32).reshape(-1, 3)[pixels]
    rgb = _render_rows(frozen, view, _noise_rows(noise, pixels), pixels)
    return ad.neg(ad.sum(ad.square(ad.sub(rgb, clean_rows))))


def total_loss(rgb_loss, perturb_loss, iteration: int, config: StegoConfig) -> Tensor:
    """Weighted sum up to and including iteration ``mu``; plain rgb loss after."""
    if iteration < 1:
        raise ValueError("iterations are counted from 1")
    if iteration > config.mu:
        return rgb_loss if isinstance(rgb_loss, Tensor) else Tensor(rgb_loss)
    return ad.add(ad.mul(rgb_loss, config.lambda1), ad.mul(perturb_loss, config.lambda2))


# ---------------------------------------------------------------- pixel selection


def rank_pixels(per_pixel_losses) -> np.ndarray:
    """Pixel indices by descending loss, ties broken by ascending index."""
    losses = np.asarray(per_pixel_losses, dtype=np.float64).ravel()
    return np.lexsort((np.arange(losses.size), -losses))


def choose_batch_size(config: StegoConfig, probe: ProbeState, n_pixels: int) -> int:
    sizes = [min(s, n_pixels) for s in config.batch_sizes]
    if not probe.scores:
        return sizes[-1]
    unprobed = [s for s in sizes if s not in probe.scores]
    if unprobed:
        return unprobed[0]
    # highest reduction per query; equal scores go to the larger batch
    return max(sizes, key=lambda s: (probe.scores[s], s))


def select_pixels_adaptive(per_pixel_losses, config: StegoConfig,
                           probe_state: ProbeState | None = None):
    """Top-``s`` pixels by current loss, with ``s`` picked from the probe history.

    Returns ``(pixel indices, chosen size)``.
    """
    if not config.batch_sizes:
        raise ValueError("batch size set S must be non-empty")
    order = rank_pixels(per_pixel_losses)
    size = choose_batch_size(config, probe_state or ProbeState(), order.size)
    return order[:size], size


# ---------------------------------------------------------------- optimisation


def start_state(params, pose, secret, config: StegoConfig, noise: NoiseField,
                cfg: SampleConfig | None = None, view: ViewSamples | None = None) -> StegoState:
    """Clean render, current noisy frame and exact per-pixel losses for ``noise``."""
    view = _view_for(params, pose, cfg, view)
    target = _secret_flat(secret, pose)
    clean = render_view(params, pose, view.cfg, view=view).reshape(-1, 3)
    frame = render_view(params, pose, view.cfg, noise=noise, view=view).reshape(-1, 3)
    zeros = np.zeros(view.enc_pos.shape, _F32)
    adam = AdamState(zeros, zeros.copy(), beta2=config.adam_beta2)
    return StegoState(view, target, clean, frame, _rgb_per_pixel(frame, target), adam)


def _rgb_per_pixel(rgb: np.ndarray, target: np.ndarray) -> np.ndarray:
    d = rgb.astype(np.float64) - target
    return np.sum(d * d, axis=-1)


def _pixel_objective(state: StegoState, iteration: int, config: StegoConfig, rows=slice(None)):
    """Per-pixel value of the loss in force at ``iteration`` on the current frame."""
    rgb = state.pixel_losses[rows]
    if iteration > config.mu:
        return rgb
    pert = _rgb_per_pixel(state.frame[rows], state.clean[rows])
    return config.lambda1 * rgb - config.lambda2 * pert


def _objective(state: StegoState, rows, iteration: int, config: StegoConfig) -> float:
    return float(_pixel_objective(state, iteration, config, rows).sum())


def noise_update_step(params, pose, noise: NoiseField, secret, iteration: int,
                      config: StegoConfig, state: StegoState):
    """One optimisation step on the noise; returns ``(noise, StepRecord)``.

    Candidates are the ``max(S)`` worst pixels (or a random batch when
    ``config.adaptive`` is off). Their gradient is computed once and the
    chosen top-``s`` subset reuses its rows; only those rows are updated and
    then re-rendered, which keeps ``state.frame`` and the per-pixel losses
    exact since every ray depends on its own noise rows only.
    """
    view = state.view
    check_noise(noise, view)
    n = view.n_rays
    frozen = params.frozen()
    s_max = min(config.batch_sizes[-1], n)

    if config.adaptive:
        if iteration == config.mu + 1:
            # the objective just changed, so earlier reductions are not comparable
            state.probe = ProbeState()
        candidates = rank_pixels(_pixel_objective(state, iteration, config))[:s_max]
        size = choose_batch_size(config, state.probe, n)
    else:
        rng = np.random.default_rng((config.seed, iteration))
        candidates = np.sort(rng.choice(n, size=s_max, replace=False))
        size = s_max

    leaf = Tensor._wrap(noise.values.data[candidates], True)
    target = state.target[candidates]
    with GradTape() as tape:
        rgb = _render_rows(frozen, view, leaf, candidates)
        sq_rgb = ad.sum(ad.square(ad.sub(rgb, target)), axis=1)
        sq_pert = ad.sum(ad.square(ad.sub(rgb, state.clean[candidates])), axis=1)
        root = total_loss(ad.sum(sq_rgb), ad.neg(ad.sum(sq_pert)), iteration, config)
    grad = tape.backward(root)[leaf]

    l_rgb = ad.sum(Tensor._wrap(sq_rgb.data[:size]))
    l_pert = ad.neg(ad.sum(Tensor._wrap(sq_pert.data[:size])))
    l_total = total_loss(l_rgb, l_pert, iteration, config)

    batch = candidates[:size]
    lr = config.lr_at(iteration)
    values = noise.values
    if lr > 0:
        full = np.zeros(values.shape, _F32)
        full[batch] = grad[:size]
        values = adam_step(values, full, state.adam, lr, rows=batch)
    noise = NoiseField(noise.viewpoint_id, noise.grid_hash, values)

    before = _objective(state, batch, iteration, config)
    after_rgb = _render_rows(frozen, view, Tensor._wrap(values.data[batch]), batch).data
    state.frame[batch] = after_rgb
    state.pixel_losses[batch] = _rgb_per_pixel(after_rgb, state.target[batch])
    if config.adaptive:
        reduction = before - _objective(state, batch, iteration, config)
        state.probe.scores[size] = reduction / size
        state.probe.last_probe[size] = iteration

    record = StepRecord(l_total.item(), l_rgb.item(), l_pert.item(), size, batch)
    return noise, record


def embed(params: RadianceFieldParams, pose: CameraPose, secret, config: StegoConfig | None = None,
          cfg: SampleConfig | None = None, callback=None):
    """Optimise a noise field so ``pose`` renders ``secret``; weights are never written.

    Returns ``(NoiseField, EmbedReport)``.
    """
    config = config or StegoConfig()
    if not config.lr > 0:
        raise ValueError("embedding needs a positive learning rate")
    cfg = cfg or SampleConfig()
    view = prepare_view(pose, cfg, params.l_pos, params.l_dir)
    noise = NoiseField.random(view, config.noise_init_sigma, config.seed)
    state = start_state(params, pose, secret, config, noise, view=view)
    shape = (pose.height, pose.width, 3)
    target_img = state.target.reshape(shape)
    report = EmbedReport()

    for it in range(1, config.iters + 1):
        noise, rec = noise_update_step(params, pose, noise, secret, it, config, state)
        report.total_loss.append(rec.total_loss)
        report.rgb_loss.append(rec.rgb_loss)
        report.perturb_loss.append(rec.perturb_loss)
        report.batch_size.append(rec.batch_size)
        report.ssim.append(ssim(state.frame.reshape(shape), target_img))
        report.frame_loss.append(float(state.pixel_losses.sum()))
        report.iterations = it
        if callback is not None:
            callback(it, rec, report)

    final = extract(params, pose, noise, cfg, view=view)
    report.final_ssim = ssim(final, target_img)
    report.final_psnr = psnr(final, target_img)
    report.final_rgb_loss = float(_rgb_per_pixel(final.reshape(-1, 3), state.target).sum())
    return noise, report


def extract(params, pose: CameraPose, noise: NoiseField, cfg: SampleConfig | None = None,
            view: ViewSamples | None = None) -> np.ndarray:
    """Render ``pose`` with ``noise``; raises :class:`ViewpointMismatch` on a foreign noise."""
    return render_view(params, pose, cfg, noise=noise, view=view)


# ---------------------------------------------------------------- ablation


ABLATION_VARIANTS = ("full", "no-adaptive", "no-perturb", "neither")


def ablation_config(config: StegoConfig, variant: str, seed: int) -> StegoConfig:
    """``config`` with adaptive selection and/or the perturbation term switched off."""
    if variant not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {variant!r}")
    adaptive = config.adaptive and variant in ("full", "no-perturb")
    lambda2 = config.lambda2 if variant in ("full", "no-adaptive") else 0.0
    return replace(config, adaptive=adaptive, lambda2=lambda2, seed=seed)


@dataclass
class AblationRun:
    variant: str
    seed: int
    report: EmbedReport

    @property
    def final_loss(self) -> float:
        return self.report.final_rgb_loss


def run_ablation(params, pose: CameraPose, secret, config: StegoConfig, seeds=(0,),
                 cfg: SampleConfig | None = None, variants=ABLATION_VARIANTS, log=None):
    """Embed once per (variant, seed); runs come back grouped by variant."""
    runs = []
    for variant in variants:
        for seed in seeds:
            _, report = embed(params, pose, secret, ablation_config(config, variant, seed), cfg)
            runs.append(AblationRun(variant, seed, report))
            if log is not None:
                log(f"{variant} seed={seed} final_loss={report.final_rgb_loss:.4f} "
                    f"ssim={report.final_ssim:.4f}")
    return runs


# ---------------------------------------------------------------- tiling


@dataclass
class Tile:
    index: int
    pose_index: int
    row: int
    col: int
    top: int
    left: int
    height: int
    width: int


def tile_layout(poses, height: int, width: int) -> list[Tile]:
    """Row-major partition of a ``height x width`` secret into one tile per pose."""
    if not poses:
        raise ValueError("need at least one viewpoint")
    th, tw = poses[0].height, poses[0].width
    if any((p.height, p.width) != (th, tw) for p in poses):
        raise ValueError("all tiling viewpoints must share one resolution")
    if height % th or width % tw:
        raise ValueError(f"secret {height}x{width} is not a multiple of tile {th}x{tw}")
    rows, cols = height // th, width // tw
    if rows * cols != len(poses):
        raise ValueError(f"secret splits into {rows * cols} tiles but {len(poses)} poses given")
    return [
        Tile(k, k, k // cols, k % cols, (k // cols) * th, (k % cols) * tw, th, tw)
        for k in range(len(poses))
    ]


def split_secret(big_secret, layout: list[Tile]) -> list[np.ndarray]:
    pix = big_secret.pixels if isinstance(big_secret, SecretImage) else np.asarray(big_secret)
    return [pix[t.top:t.top + t.height, t.left:t.left + t.width] for t in layout]


def assemble(tiles, layout: list[Tile], height: int, width: int) -> np.ndarray:
    out = np.zeros((height, width, 3), _F32)
    for img, t in zip(tiles, layout):
        out[t.top:t.top + t.height, t.left:t.left + t.width] = img
    return out


def embed_tiled(params, poses, big_secret, config: StegoConfig | None = None,
                cfg: SampleConfig | None = None):
    """Embed each row-major tile of ``big_secret`` at its own viewpoint.

    Returns ``(noises, layout, reports)``; tile ``k`` uses seed ``config.seed + k``.
    """
    config = config or StegoConfig()
    pix = big_secret.pixels if isinstance(big_secret, SecretImage) else np.asarray(big_secret)
    layout = tile_layout(poses, pix.shape[0], pix.shape[1])
    noises, reports = [], []
    for tile, sub in zip(layout, split_secret(pix, layout)):
        tile_cfg = StegoConfig(**{**config.__dict__, "seed": config.seed + tile.index})
        noise, rep = embed(params, poses[tile.pose_index], sub, tile_cfg, cfg)
        noises.append(noise)
        reports.append(rep)
    return noises, layout, reports


def extract_tiled(params, poses, noises, layout: list[Tile], cfg: SampleConfig | None = None):
    tiles = [extract(params, poses[t.pose_index], n, cfg) for t, n in zip(layout, noises)]
    th, tw = layout[0].height, layout[0].width
    rows = max(t.row for t in layout) + 1
    cols = max(t.col for t in layout) + 1
    return assemble(tiles, layout, rows * th, cols * tw)


__all__ = [
    "StegoConfig", "NoiseField", "EmbedReport", "ProbeState", "StegoState", "StepRecord",
    "ViewpointMismatch", "stego_rgb_loss", "perturb_loss", "total_loss", "rank_pixels",
    "choose_batch_size", "select_pixels_adaptive", "start_state", "noise_update_step",
    "embed", "extract", "tile_layout", "split_secret", "assemble", "embed_tiled",
    "extract_tiled",
]
