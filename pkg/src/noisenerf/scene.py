"""Procedural analytic scenes, their oracle renders, and procedural secret images."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .nerf import CameraPose, SampleConfig, ray_bundle, sample_grid, volume_render

_F32 = np.float32

SHAPES = ("sphere", "box")
SECRET_KINDS = ("checker", "gradient", "text-glyph", "random-smooth")


@dataclass(frozen=True)
class Primitive:
    shape: str
    center: tuple
    size: float | tuple  # radius for spheres, half-extents for boxes
    color: tuple
    density: float

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        center = tuple(float(c) for c in self.center)
        color = tuple(float(c) for c in self.color)
        if len(center) != 3 or len(color) != 3:
            raise ValueError("center and color must be 3-vectors")
        if isinstance(self.size, (int, float)):
            size = float(self.size)
            half = np.full(3, size)
        else:
            size = tuple(float(s) for s in self.size)
            if len(size) != 3:
                raise ValueError("box size must be a scalar or 3 half-extents")
            half = np.array(size)
        if np.any(half <= 0):
            raise ValueError("primitive size must be positive")
        if np.any(np.abs(center) + half > 1.0 + 1e-9):
            raise ValueError("primitive extends outside [-1, 1]^3")
        if self.density < 0:
            raise ValueError("density must be non-negative")
        if min(color) < 0 or max(color) > 1:
            raise ValueError("color must lie in [0, 1]^3")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "density", float(self.density))

    def contains(self, x: np.ndarray) -> np.ndarray:
        rel = x - np.asarray(self.center)
        if self.shape == "sphere":
            return np.einsum("...i,...i->...", rel, rel) <= self.size**2
        return np.all(np.abs(rel) <= np.broadcast_to(self.size, (3,)), axis=-1)


@dataclass
class AnalyticScene:
    primitives: list = field(default_factory=list)
    name: str = "custom"
    background: str = "black"

    def __post_init__(self):
        if self.background != "black":
            raise ValueError("only a black background is supported")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "background": self.background,
            "primitives": [
                {
                    "shape": p.shape,
                    "center": list(p.center),
                    "size": p.size if isinstance(p.size, float) else list(p.size),
                    "color": list(p.color),
                    "density": p.density,
                }
                for p in self.primitives
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnalyticScene":
        unknown = set(d) - {"name", "background", "primitives"}
        if unknown:
            raise ValueError(f"unknown scene keys: {sorted(unknown)}")
        prims = []
        for p in d.get("primitives", []):
            extra = set(p) - {"shape", "center", "size", "color", "density"}
            if extra:
                raise ValueError(f"unknown primitive keys: {sorted(extra)}")
            size = p["size"] if isinstance(p["size"], (int, float)) else tuple(p["size"])
            prims.append(Primitive(p["shape"], tuple(p["center"]), size,
                                   tuple(p["color"]), p["density"]))
        return cls(prims, d.get("name", "custom"), d.get("background", "black"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "AnalyticScene":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _tri_sphere() -> AnalyticScene:
    return AnalyticScene(
        [
            Primitive("sphere", (0.45, 0.0, 0.05), 0.38, (0.9, 0.15, 0.1), 8.0),
            Primitive("sphere", (-0.35, 0.45, -0.05), 0.32, (0.15, 0.8, 0.2), 8.0),
            Primitive("sphere", (-0.25, -0.45, 0.15), 0.3, (0.15, 0.3, 0.95), 8.0),
        ],
        name="tri-sphere",
    )


def _single_sphere() -> AnalyticScene:
    return AnalyticScene([Primitive("sphere", (0.0, 0.0, 0.0), 0.5, (0.9, 0.6, 0.2), 8.0)],
                         name="single-sphere")


def _box_sphere() -> AnalyticScene:
    return AnalyticScene(
        [
            Primitive("box", (0.0, 0.0, -0.55), (0.7, 0.7, 0.12), (0.7, 0.7, 0.7), 8.0),
            Primitive("sphere", (0.1, -0.1, 0.1), 0.35, (0.2, 0.5, 0.9), 8.0),
        ],
        name="box-sphere",
    )


STANDARD_SCENES = {
    "tri-sphere": _tri_sphere,
    "single-sphere": _single_sphere,
    "box-sphere": _box_sphere,
}


def standard_scene(name: str) -> AnalyticScene:
    try:
        return STANDARD_SCENES[name]()
    except KeyError:
        raise KeyError(
            f"unknown scene {name!r}; known scenes: {', '.join(sorted(STANDARD_SCENES))}"
        ) from None


def scene_field(scene: AnalyticScene, x):
    """Density and density-weighted colour at point(s) ``x`` (shape [..., 3])."""
    x = np.asarray(x, dtype=np.float64)
    sigma = np.zeros(x.shape[:-1])
    acc = np.zeros(x.shape)
    for p in scene.primitives:
        inside = p.contains(x) * p.density
        sigma += inside
        acc += inside[..., None] * np.asarray(p.color)
    with np.errstate(invalid="ignore", divide="ignore"):
        color = np.where(sigma[..., None] > 0, acc / sigma[..., None], 0.0)
    return color, sigma


def oracle_render(scene: AnalyticScene, pose: CameraPose, n_samples: int = 128,
                  cfg: SampleConfig | None = None) -> np.ndarray:
    """Ground-truth view: the analytic field pushed through the shared quadrature."""
    base = cfg or SampleConfig()
    cfg = SampleConfig(base.near, base.far, n_samples, base.far_cap, base.scene_bound, base.chunk)
    o, d = ray_bundle(pose)
    grid = sample_grid(len(d), cfg, jitter=False)
    pts = o[:, None, :].astype(np.float64) + grid.t_values[..., None] * d[:, None, :]
    color, sigma = scene_field(scene, pts)
    rgb = volume_render(color.astype(_F32), sigma.astype(_F32), grid.deltas)
    return rgb.data.reshape(pose.height, pose.width, 3)


def orbit_pose(azimuth: float, elevation: float, radius: float, resolution: int,
               fov_y: float = np.deg2rad(40.0)) -> CameraPose:
    pos = radius * np.array([
        np.cos(elevation) * np.cos(azimuth),
        np.cos(elevation) * np.sin(azimuth),
        np.sin(elevation),
    ])
    return CameraPose.look_at(pos, fov_y=fov_y, width=resolution, height=resolution)


def make_poses(n_views: int, resolution: int, radius: float = 4.0, seed: int = 0,
               elevation_range=(np.deg2rad(10.0), np.deg2rad(50.0))) -> list[CameraPose]:
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    rng = np.random.default_rng(seed)
    phase = rng.uniform(0, 2 * np.pi)
    elev = rng.uniform(*elevation_range, size=n_views)
    return [
        orbit_pose(phase + 2 * np.pi * k / n_views, elev[k], radius, resolution)
        for k in range(n_views)
    ]


def make_dataset(scene: AnalyticScene, n_views: int, resolution: int = 64,
                 radius: float = 4.0, seed: int = 0, n_samples: int = 128,
                 cfg: SampleConfig | None = None) -> list[tuple[CameraPose, np.ndarray]]:
    """Poses orbiting the origin at ``radius`` with their oracle renders."""
    return [
        (pose, oracle_render(scene, pose, n_samples, cfg))
        for pose in make_poses(n_views, resolution, radius, seed)
    ]


# ---------------------------------------------------------------- secrets


@dataclass
class SecretImage:
    pixels: np.ndarray  # [H, W, 3] float32 in [0, 1]
    kind: str
    seed: int

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


CHECKER_COLORS = ((0.95, 0.85, 0.25), (0.1, 0.15, 0.45))


def _checker(w, h, block):
    yy, xx = np.mgrid[0:h, 0:w]
    parity = ((yy // block) + (xx // block)) % 2
    a, b = (np.asarray(c) for c in CHECKER_COLORS)
    return np.where(parity[..., None] == 0, a, b)


def _gradient(w, h, rng):
    a, b = rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3)
    s = np.linspace(0.0, 1.0, w)[None, :, None]
    return np.broadcast_to((1 - s) * a + s * b, (h, w, 3))


def _text_glyph(w, h, rng):
    from PIL import Image, ImageDraw, ImageFont

    letters = "ABCDEFGHJKLMNPQRSTUVWXYZ23456789"
    text = "".join(rng.choice(list(letters), size=2))
    img = Image.new("RGB", (w, h), (20, 30, 80))
    draw = ImageDraw.Draw(img)
    font = ImageFont.load_default()
    left, top, right, bottom = draw.textbbox((0, 0), text, font=font)
    small = Image.new("RGB", (right - left + 2, bottom - top + 2), (20, 30, 80))
    ImageDraw.Draw(small).text((1 - left, 1 - top), text, font=font, fill=(240, 230, 120))
    scale = max(1, min((w - 4) // small.width, (h - 4) // small.height))
    big = small.resize((small.width * scale, small.height * scale), Image.NEAREST)
    img.paste(big, ((w - big.width) // 2, (h - big.height) // 2))
    return np.asarray(img, dtype=np.float64) / 255.0


def _random_smooth(w, h, rng):
    noise = rng.standard_normal((h, w, 3))
    sm = ndimage.gaussian_filter(noise, sigma=(max(h, w) / 10, max(h, w) / 10, 0), mode="wrap")
    lo, hi = sm.min(axis=(0, 1)), sm.max(axis=(0, 1))
    return (sm - lo) / np.where(hi > lo, hi - lo, 1.0)


def make_secret(kind: str, width: int, height: int, seed: int = 0, block: int = 8) -> SecretImage:
    """Deterministic procedural secret image of the given kind."""
    if width < 8 or height < 8:
        raise ValueError("secret images must be at least 8x8")
    rng = np.random.default_rng(seed)
    if kind == "checker":
        pix = _checker(width, height, block)
    elif kind == "gradient":
        pix = _gradient(width, height, rng)
    elif kind == "text-glyph":
        pix = _text_glyph(width, height, rng)
    elif kind == "random-smooth":
        pix = _random_smooth(width, height, rng)
    else:
        raise ValueError(f"unknown secret kind {kind!r}; choose from {SECRET_KINDS}")
    pix = np.clip(np.ascontiguousarray(pix, dtype=_F32), 0.0, 1.0)
    return SecretImage(pix, kind, seed)
