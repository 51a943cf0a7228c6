"""Tiny radiance field: camera rays, sampling, encoding, MLP field, quadrature, training."""

from __future__ import annotations

import hashlib
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, GradTape, Tensor, adam_step

_F32 = np.float32


class ViewpointMismatch(ValueError):
    """Noise was created for a different pose or sample grid."""


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("zero-length vector")
    return v / n


@dataclass(frozen=True)
class CameraPose:
    position: tuple
    forward: tuple
    up: tuple
    fov_y: float
    width: int
    height: int

    def __post_init__(self):
        for name in ("position", "forward", "up"):
            vec = tuple(float(x) for x in getattr(self, name))
            if len(vec) != 3 or not all(np.isfinite(vec)):
                raise ValueError(f"{name} must be a finite 3-vector")
            object.__setattr__(self, name, vec)
        f, u = np.array(self.forward), np.array(self.up)
        if abs(np.linalg.norm(f) - 1) > 1e-5 or abs(np.linalg.norm(u) - 1) > 1e-5:
            raise ValueError("forward and up must be unit vectors")
        if abs(float(f @ u)) > 1e-5:
            raise ValueError("forward and up must be orthogonal")
        if not 0 < self.fov_y < np.pi:
            raise ValueError("fov_y must lie in (0, pi)")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("image size must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "fov_y", float(self.fov_y))

    @classmethod
    def look_at(cls, position, target=(0.0, 0.0, 0.0), world_up=(0.0, 0.0, 1.0),
                fov_y=np.deg2rad(40.0), width=64, height=64) -> "CameraPose":
        pos = np.asarray(position, dtype=np.float64)
        fwd = _unit(np.asarray(target, dtype=np.float64) - pos)
        right = np.cross(fwd, np.asarray(world_up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [0.0, 1.0, 0.0])
        right = _unit(right)
        up = _unit(np.cross(right, fwd))
        return cls(tuple(pos), tuple(fwd), tuple(up), fov_y, width, height)

    def to_dict(self) -> dict:
        return {
            "position": list(self.position),
            "forward": list(self.forward),
            "up": list(self.up),
            "fov_y": self.fov_y,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(d["position"], d["forward"], d["up"], d["fov_y"], d["width"], d["height"])

    def key_bytes(self) -> bytes:
        return struct.pack(
            "<10dII", *self.position, *self.forward, *self.up, self.fov_y,
            self.width, self.height,
        )


@dataclass(frozen=True)
class Ray:
    origin: tuple
    direction: tuple
    pixel_index: tuple


@dataclass(frozen=True)
class SampleConfig:
    """Depth range and sample count shared by training, rendering and embedding.

    ``scene_bound`` maps world coordinates into [-1, 1] before encoding; it must
    cover every sample point or the encoding aliases.
    """

    near: float = 2.5
    far: float = 5.5
    n_samples: int = 32
    far_cap: float = 1.0
    scene_bound: float = 3.0
    chunk: int = 2048

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.n_samples < 2:
            raise ValueError("need at least 2 samples per ray")
        if self.scene_bound <= 0 or self.far_cap <= 0:
            raise ValueError("scene_bound and far_cap must be positive")

    def key_bytes(self) -> bytes:
        return struct.pack("<ddIdd", self.near, self.far, self.n_samples,
                           self.far_cap, self.scene_bound)


@dataclass
class SampleGrid:
    t_values: np.ndarray
    deltas: np.ndarray
    deterministic: bool
    seed: int = 0

    def digest(self) -> bytes:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.t_values, dtype=_F32).tobytes())
        h.update(np.ascontiguousarray(self.deltas, dtype=_F32).tobytes())
        return h.digest()


# ---------------------------------------------------------------- encoding and rays


def positional_encode(p, L: int) -> np.ndarray:
    """Sinusoidal lifting: per component (sin 2^k pi p, cos 2^k pi p), k < L."""
    if L < 1:
        raise ValueError("encoding level L must be >= 1")
    p = np.asarray(p, dtype=np.float64)
    ang = p[..., None] * (np.pi * 2.0 ** np.arange(L))
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
    shape = p.shape[:-1] + (p.shape[-1] * 2 * L,) if p.ndim else (2 * L,)
    return enc.reshape(shape).astype(_F32)


def ray_bundle(pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for every pixel centre, row-major, float32."""
    W, H = pose.width, pose.height
    fwd = np.array(pose.forward)
    up = np.array(pose.up)
    right = np.cross(fwd, up)
    tan_y = np.tan(pose.fov_y / 2)
    tan_x = tan_y * W / H
    cols = (2 * (np.arange(W) + 0.5) / W - 1) * tan_x
    rows = (1 - 2 * (np.arange(H) + 0.5) / H) * tan_y
    yy, xx = np.meshgrid(rows, cols, indexing="ij")
    d = fwd + xx[..., None] * right + yy[..., None] * up
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    d = d.reshape(-1, 3).astype(_F32)
    o = np.broadcast_to(np.array(pose.position, dtype=_F32), d.shape).copy()
    return o, d


def generate_rays(pose: CameraPose) -> list[Ray]:
    o, d = ray_bundle(pose)
    W = pose.width
    return [
        Ray(tuple(o[k].tolist()), tuple(d[k].tolist()), divmod(k, W))
        for k in range(len(d))
    ]


def sample_grid(n_rays: int, cfg: SampleConfig, jitter: bool = False,
                seed: int = 0, rng: np.random.Generator | None = None) -> SampleGrid:
    """Depths for ``n_rays`` rays: bin midpoints, or one uniform draw per bin."""
    N = cfg.n_samples
    width = (cfg.far - cfg.near) / N
    lower = cfg.near + width * np.arange(N)
    if jitter:
        rng = rng if rng is not None else np.random.default_rng(seed)
        u = rng.random((n_rays, N))
        t = lower + width * u
    else:
        t = np.broadcast_to(lower + 0.5 * width, (n_rays, N))
    t = np.ascontiguousarray(t, dtype=_F32)
    deltas = np.empty_like(t)
    deltas[:, :-1] = t[:, 1:] - t[:, :-1]
    deltas[:, -1] = cfg.far_cap
    return SampleGrid(t, deltas, deterministic=not jitter, seed=int(seed))


def sample_along_ray(ray: Ray, near: float, far: float, N: int,
                     jitter: bool = False, seed: int = 0, far_cap: float = 1.0) -> SampleGrid:
    cfg = SampleConfig(near=near, far=far, n_samples=N, far_cap=far_cap)
    return sample_grid(1, cfg, jitter=jitter, seed=seed)


# ---------------------------------------------------------------- field


@dataclass
class RadianceFieldParams:
    """MLP weights: a relu trunk, a density head, and a direction-conditioned colour head.

    ``layers`` holds (W, b) pairs in order: trunk layers, density head, then
    the two colour layers. The colour head input is the trunk output
    concatenated with the encoded view direction.
    """

    layers: list
    l_pos: int = 6
    l_dir: int = 2
    density_activation: str = "squareplus"

    def __post_init__(self):
        dims = self.dims
        if len(dims) < 4:
            raise ValueError("need at least one trunk layer plus density and colour heads")
        if dims[0][0] != self.pos_width:
            raise ValueError(f"first layer expects {dims[0][0]} inputs, encoding gives {self.pos_width}")
        trunk = dims[:-3]
        for (_, out), (inp, _) in zip(trunk, trunk[1:]):
            if out != inp:
                raise ValueError("trunk layer dimensions do not chain")
        hidden = trunk[-1][1]
        if dims[-3] != (hidden, 1):
            raise ValueError("density head must map hidden -> 1")
        if dims[-2][0] != hidden + self.dir_width or dims[-1][0] != dims[-2][1] or dims[-1][1] != 3:
            raise ValueError("colour head dimensions do not chain")
        if self.density_activation not in _DENSITY_ACTS:
            raise ValueError(f"unknown density activation {self.density_activation!r}")

    @property
    def dims(self) -> list[tuple[int, int]]:
        return [tuple(w.shape) for w, _ in self.layers]

    @property
    def pos_width(self) -> int:
        return 3 * 2 * self.l_pos

    @property
    def dir_width(self) -> int:
        return 3 * 2 * self.l_dir

    @property
    def hidden_width(self) -> int:
        return self.layers[0][0].shape[1]

    def tensors(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]

    def with_tensors(self, tensors: Sequence[Tensor]) -> "RadianceFieldParams":
        it = iter(tensors)
        return replace(self, layers=[(next(it), next(it)) for _ in self.layers])

    def frozen(self) -> "RadianceFieldParams":
        return self.with_tensors([Tensor._wrap(t.data) for t in self.tensors()])

    def trainable(self) -> "RadianceFieldParams":
        return self.with_tensors([Tensor._wrap(t.data, True) for t in self.tensors()])


_DENSITY_ACTS = {"relu": ad.relu, "softplus": ad.softplus, "squareplus": ad.squareplus}


def init_params(seed: int = 0, l_pos: int = 6, l_dir: int = 2, hidden: int = 64,
                depth: int = 4, color_hidden: int = 32,
                density_activation: str = "squareplus") -> RadianceFieldParams:
    rng = np.random.default_rng(seed)
    pos_w, dir_w = 6 * l_pos, 6 * l_dir
    dims = [(pos_w, hidden)] + [(hidden, hidden)] * (depth - 1)
    dims += [(hidden, 1), (hidden + dir_w, color_hidden), (color_hidden, 3)]
    layers = []
    for fan_in, fan_out in dims:
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, (fan_in, fan_out))
        layers.append((Tensor(w), Tensor(np.zeros(fan_out))))
    return RadianceFieldParams(layers, l_pos, l_dir, density_activation)


def field_eval(params: RadianceFieldParams, enc_pos, enc_dir, noise=None):
    """Colour and density for a batch of encoded points.

    ``enc_pos`` is [P, pos_width] (or a single vector), ``enc_dir`` likewise.
    Noise, when given, is added to the encoded position only.
    """
    enc_pos = enc_pos if isinstance(enc_pos, Tensor) else Tensor._wrap(np.asarray(enc_pos, _F32))
    enc_dir = enc_dir if isinstance(enc_dir, Tensor) else Tensor._wrap(np.asarray(enc_dir, _F32))
    single = enc_pos.data.ndim == 1
    if single:
        enc_pos = enc_pos.reshape(1, -1)
        enc_dir = enc_dir.reshape(1, -1)
    if enc_pos.shape[-1] != params.pos_width or enc_dir.shape[-1] != params.dir_width:
        raise ad.ShapeError(
            f"encoded widths {enc_pos.shape[-1]}/{enc_dir.shape[-1]} do not match "
            f"params {params.pos_width}/{params.dir_width}"
        )
    if enc_pos.shape[0] != enc_dir.shape[0]:
        raise ad.ShapeError("position and direction batches differ in length")
    x = enc_pos
    if noise is not None:
        if single and isinstance(noise, Tensor) and noise.data.ndim == 1:
            noise = noise.reshape(1, -1)
        if noise.shape != x.shape:
            raise ad.ShapeError(f"noise shape {noise.shape} != encoding shape {x.shape}")
        x = ad.add(x, noise)

    *trunk, density, color_hidden, color_out = params.layers
    h = x
    for w, b in trunk:
        h = ad.relu(ad.linear(h, w, b))
    sigma = _DENSITY_ACTS[params.density_activation](ad.linear(h, *density))
    sigma = ad.reshape(sigma, (sigma.shape[0],))
    hc = ad.relu(ad.linear(ad.concat([h, enc_dir], axis=-1), *color_hidden))
    rgb = ad.sigmoid(ad.linear(hc, *color_out))
    if single:
        return ad.reshape(rgb, (3,)), ad.reshape(sigma, ())
    return rgb, sigma


# ---------------------------------------------------------------- quadrature


def composite(colors, sigmas, deltas):
    """Alpha-composite samples along the last sample axis; returns (rgb, weights)."""
    colors, sigmas, deltas = (
        t if isinstance(t, Tensor) else Tensor._wrap(np.asarray(t, _F32))
        for t in (colors, sigmas, deltas)
    )
    if sigmas.shape != deltas.shape or colors.shape[:-1] != sigmas.shape:
        raise ad.ShapeError(
            f"colors {colors.shape}, sigmas {sigmas.shape}, deltas {deltas.shape} disagree"
        )
    if np.any(sigmas.data < 0) or np.any(deltas.data < 0):
        raise ValueError("densities and sample spacings must be non-negative")
    optical = ad.mul(sigmas, deltas)
    alpha = ad.sub(1.0, ad.exp(ad.neg(optical)))
    trans = ad.exp(ad.neg(ad.exclusive_cumsum(optical)))
    weights = ad.mul(trans, alpha)
    return ad.weighted_sum(weights, colors), weights


def volume_render(colors, sigmas, deltas):
    return composite(colors, sigmas, deltas)[0]


# ---------------------------------------------------------------- rendering


@dataclass
class ViewSamples:
    """Everything about a viewpoint that does not depend on the field weights."""

    pose: CameraPose
    cfg: SampleConfig
    origins: np.ndarray
    dirs: np.ndarray
    grid: SampleGrid
    enc_pos: np.ndarray  # [R, N, pos_width]
    enc_dir: np.ndarray  # [R, dir_width]

    @property
    def n_rays(self) -> int:
        return self.origins.shape[0]

    @property
    def viewpoint_id(self) -> bytes:
        return viewpoint_id(self.pose, self.cfg)

    @property
    def grid_hash(self) -> bytes:
        return self.grid.digest()


def viewpoint_id(pose: CameraPose, cfg: SampleConfig) -> bytes:
    return hashlib.sha256(b"view" + pose.key_bytes() + cfg.key_bytes()).digest()


def encode_samples(origins, dirs, t_values, cfg: SampleConfig, l_pos: int) -> np.ndarray:
    pts = origins[:, None, :] + t_values[..., None] * dirs[:, None, :]
    return positional_encode(pts / cfg.scene_bound, l_pos)


def prepare_view(pose: CameraPose, cfg: SampleConfig, l_pos: int = 6,
                 l_dir: int = 2) -> ViewSamples:
    o, d = ray_bundle(pose)
    grid = sample_grid(len(d), cfg, jitter=False)
    return ViewSamples(
        pose, cfg, o, d, grid,
        encode_samples(o, d, grid.t_values, cfg, l_pos),
        positional_encode(d, l_dir),
    )


def render_samples(params: RadianceFieldParams, enc_pos, enc_dir, deltas, noise=None):
    """Render rays from pre-encoded samples. Shapes: [R,N,P], [R,D], [R,N]."""
    enc_pos = enc_pos if isinstance(enc_pos, Tensor) else Tensor._wrap(np.asarray(enc_pos))
    R, N, P = enc_pos.shape
    dir_rep = np.repeat(np.asarray(enc_dir, _F32), N, axis=0)
    flat_noise = None if noise is None else ad.reshape(noise, (R * N, P))
    rgb, sigma = field_eval(params, ad.reshape(enc_pos, (R * N, P)), dir_rep, flat_noise)
    rgb = ad.reshape(rgb, (R, N, 3))
    sigma = ad.reshape(sigma, (R, N))
    return volume_render(rgb, sigma, deltas)


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("NOISENERF_THREADS", "1")))
    except ValueError:
        return 1


def check_noise(noise, view: ViewSamples) -> None:
    if noise.viewpoint_id != view.viewpoint_id:
        raise ViewpointMismatch("noise was created for a different viewpoint")
    if noise.grid_hash != view.grid_hash:
        raise ViewpointMismatch("noise sample grid does not match this viewpoint")
    expected = (view.n_rays, view.cfg.n_samples, view.enc_pos.shape[-1])
    if tuple(noise.values.shape) != expected:
        raise ViewpointMismatch(f"noise shape {noise.values.shape} != {expected}")


def render_view(params: RadianceFieldParams, pose: CameraPose,
                cfg: SampleConfig | None = None, noise=None,
                view: ViewSamples | None = None) -> np.ndarray:
    """Full-frame render as an [H, W, 3] float32 array in [0, 1].

    Without ``noise`` no noise arithmetic happens at all. ``view`` may be
    passed to reuse precomputed encodings for the same pose and config.
    """
    cfg = cfg or SampleConfig()
    if view is None:
        view = prepare_view(pose, cfg, params.l_pos, params.l_dir)
    if noise is not None:
        check_noise(noise, view)
    frozen = params.frozen()
    noise_data = None if noise is None else np.asarray(
        noise.values.data if isinstance(noise.values, Tensor) else noise.values, _F32)

    step = cfg.chunk
    starts = range(0, view.n_rays, step)

    def one(s):
        sl = slice(s, s + step)
        nz = None if noise_data is None else Tensor._wrap(noise_data[sl])
        return render_samples(frozen, view.enc_pos[sl], view.enc_dir[sl],
                              view.grid.deltas[sl], nz).data

    threads = _thread_count()
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, starts))
    else:
        parts = [one(s) for s in starts]
    return np.concatenate(parts).reshape(pose.height, pose.width, 3)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    iters: int = 2000
    batch_rays: int = 512
    lr: float = 1e-3
    lr_final: float = 1e-4
    seed: int = 0
    jitter: bool = True
    sample: SampleConfig = field(default_factory=SampleConfig)

    def __post_init__(self):
        if self.iters < 0 or self.batch_rays < 1:
            raise ValueError("iters must be >= 0 and batch_rays >= 1")
        if self.lr <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")

    def lr_at(self, it: int) -> float:
        frac = it / max(self.iters, 1)
        return self.lr * (self.lr_final / self.lr) ** frac


@dataclass
class TrainState:
    """Optimizer state needed to resume training bit-exactly."""

    adam: list
    iteration: int = 0


def _ray_pool(dataset, cfg: TrainConfig):
    if not dataset:
        raise ValueError("training needs at least one view")
    views = sorted(dataset, key=lambda pv: pv[0].key_bytes())
    origins, dirs, colors = [], [], []
    for pose, image in views:
        image = np.asarray(image, _F32)
        if image.shape != (pose.height, pose.width, 3):
            raise ValueError(
                f"image shape {image.shape} does not match pose resolution "
                f"{(pose.height, pose.width, 3)}"
            )
        o, d = ray_bundle(pose)
        origins.append(o)
        dirs.append(d)
        colors.append(image.reshape(-1, 3))
    return np.concatenate(origins), np.concatenate(dirs), np.concatenate(colors)


def train_nerf(params: RadianceFieldParams, dataset, cfg: TrainConfig | None = None,
               state: TrainState | None = None, callback=None, stop: int | None = None):
    """Fit ``params`` to posed images by minimising per-ray colour MSE with Adam.

    The batch at iteration ``i`` is drawn from a generator seeded by
    ``(cfg.seed, i)`` and views are put in canonical order first, so curves are
    reproducible regardless of dataset order and resumable from ``state``.
    ``stop`` ends the run early after that many total iterations without
    changing the learning-rate schedule. Returns ``(params, history, state)``.
    """
    cfg = cfg or TrainConfig()
    origins, dirs, colors = _ray_pool(dataset, cfg)
    n_pool = len(origins)
    params = params.trainable()
    tensors = params.tensors()
    if state is None:
        state = TrainState([AdamState.zeros_like(t) for t in tensors])
    history = []
    batch = min(cfg.batch_rays, n_pool)

    end = cfg.iters if stop is None else min(stop, cfg.iters)
    for it in range(state.iteration, end):
        rng = np.random.default_rng((cfg.seed, it))
        idx = rng.choice(n_pool, size=batch, replace=False)
        grid = sample_grid(batch, cfg.sample, jitter=cfg.jitter, rng=rng)
        o, d = origins[idx], dirs[idx]
        enc_pos = encode_samples(o, d, grid.t_values, cfg.sample, params.l_pos)
        enc_dir = positional_encode(d, params.l_dir)
        with GradTape() as tape:
            pred = render_samples(params, enc_pos, enc_dir, grid.deltas)
            loss = ad.mse(pred, colors[idx])
        grads = tape.backward(loss)
        lr = cfg.lr_at(it)
        tensors = [adam_step(t, grads[t], s, lr) for t, s in zip(tensors, state.adam)]
        params = params.with_tensors(tensors)
        history.append(loss.item())
        state.iteration = it + 1
        if callback is not None:
            callback(it, history[-1])

    return params.frozen(), history, state
