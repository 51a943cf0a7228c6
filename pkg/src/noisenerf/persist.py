"""On-disk formats: weight and noise checkpoints, optimiser state, PPM images, run configs.

All binary formats are little-endian and round-trip bit-exactly.

NNRF weights::

    b"NNRF" | u16 version | u8 l_pos | u8 l_dir | u8 density act | u16 n_layers
    | n_layers x (u32 fan_in, u32 fan_out) | per layer: W row-major, then b (f32)

NNSZ noise::

    b"NNSZ" | u16 version | 32B viewpoint_id | 32B grid_hash | 3 x u32 shape | f32 data
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tensor
from .nerf import CameraPose, RadianceFieldParams, SampleConfig, TrainConfig, TrainState
from .stego import NoiseField, StegoConfig

WEIGHTS_MAGIC = b"NNRF"
NOISE_MAGIC = b"NNSZ"
FORMAT_VERSION = 1
DENSITY_CODES = {"relu": 0, "softplus": 1, "squareplus": 2}
_LE_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """A file is truncated, has the wrong magic, or an unsupported version."""


class ConfigError(ValueError):
    """A run configuration is malformed or references missing files."""


# ---------------------------------------------------------------- helpers


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data, self.pos, self.what = data, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype=_LE_F32).astype(np.float32)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")


def _header(r: _Reader, magic: bytes) -> None:
    if r.take(4) != magic:
        raise FormatError(f"{r.what}: bad magic, expected {magic!r}")
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise FormatError(f"{r.what}: unsupported version {version}")


def _f32_bytes(a) -> bytes:
    return np.ascontiguousarray(a, dtype=_LE_F32).tobytes()


# ---------------------------------------------------------------- weights


def weights_to_bytes(params: RadianceFieldParams) -> bytes:
    dims = params.dims
    out = [WEIGHTS_MAGIC, struct.pack("<HBBBH", FORMAT_VERSION, params.l_pos, params.l_dir,
                                      DENSITY_CODES[params.density_activation], len(dims))]
    out += [struct.pack("<II", i, o) for i, o in dims]
    for w, b in params.layers:
        out += [_f32_bytes(w.data), _f32_bytes(b.data)]
    return b"".join(out)


def weights_from_bytes(data: bytes, what: str = "weights") -> RadianceFieldParams:
    r = _Reader(data, what)
    _header(r, WEIGHTS_MAGIC)
    l_pos, l_dir, act, n = r.unpack("<BBBH")
    names = {v: k for k, v in DENSITY_CODES.items()}
    if act not in names:
        raise FormatError(f"{what}: unknown density activation code {act}")
    dims = [r.unpack("<II") for _ in range(n)]
    layers = []
    for i, o in dims:
        w = r.floats(i * o).reshape(i, o)
        b = r.floats(o)
        layers.append((Tensor._wrap(w), Tensor._wrap(b)))
    r.finish()
    try:
        return RadianceFieldParams(layers, l_pos, l_dir, names[act])
    except ValueError as exc:
        raise FormatError(f"{what}: {exc}") from None


def save_weights(path, params: RadianceFieldParams) -> None:
    Path(path).write_bytes(weights_to_bytes(params))


def load_weights(path) -> RadianceFieldParams:
    return weights_from_bytes(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- noise


def noise_to_bytes(noise: NoiseField) -> bytes:
    if len(noise.viewpoint_id) != 32 or len(noise.grid_hash) != 32:
        raise ValueError("viewpoint_id and grid_hash must be 32-byte digests")
    shape = noise.values.shape
    if len(shape) != 3:
        raise ValueError("noise values must be [rays, samples, width]")
    return b"".join([
        NOISE_MAGIC, struct.pack("<H", FORMAT_VERSION), noise.viewpoint_id, noise.grid_hash,
        struct.pack("<III", *shape), _f32_bytes(noise.values.data),
    ])


def noise_from_bytes(data: bytes, what: str = "noise") -> NoiseField:
    r = _Reader(data, what)
    _header(r, NOISE_MAGIC)
    vid, ghash = r.take(32), r.take(32)
    shape = r.unpack("<III")
    vals = r.floats(int(np.prod(shape))).reshape(shape)
    r.finish()
    return NoiseField(vid, ghash, Tensor._wrap(vals))


def save_noise(path, noise: NoiseField) -> None:
    Path(path).write_bytes(noise_to_bytes(noise))


def load_noise(path) -> NoiseField:
    return noise_from_bytes(Path(path).read_bytes(), str(path))


# ---------------------------------------------------------------- optimiser state


def save_train_state(path, state: TrainState) -> None:
    arrays = {"iteration": np.array(state.iteration, np.int64)}
    for k, s in enumerate(state.adam):
        arrays[f"m{k}"] = s.first_moment
        arrays[f"v{k}"] = s.second_moment
        arrays[f"t{k}"] = np.array(s.step_count, np.int64)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_train_state(path) -> TrainState:
    try:
        with np.load(path) as z:
            n = sum(1 for k in z.files if k.startswith("m"))
            adam = [
                AdamState(z[f"m{k}"].copy(), z[f"v{k}"].copy(), int(z[f"t{k}"]))
                for k in range(n)
            ]
            return TrainState(adam, int(z["iteration"]))
    except (KeyError, ValueError, OSError) as exc:
        raise FormatError(f"{path}: unreadable optimiser state ({exc})") from None


# ---------------------------------------------------------------- images


def write_ppm(path, img) -> None:
    """Binary P6, 8-bit. Float input in [0, 1] is rounded to the nearest level."""
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr.astype(np.float64), 0.0, 1.0) * 255).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("PPM images must be H x W x 3")
    h, w, _ = arr.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())


def _ppm_tokens(data: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("PPM header is truncated")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # exactly one whitespace byte precedes the raster


def read_ppm(path) -> np.ndarray:
    """Return the raster as uint8 [H, W, 3]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P6":
        raise FormatError(f"{path}: not a binary PPM")
    tokens, pos = _ppm_tokens(data, 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{path}: malformed PPM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported")
    raster = data[pos:]
    if len(raster) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} raster bytes, found {len(raster)}")
    return np.frombuffer(raster, np.uint8).reshape(h, w, 3).copy()


def read_image(path) -> np.ndarray:
    """Float image in [0, 1] from a PPM file."""
    return read_ppm(path).astype(np.float32) / 255.0


def write_png(path, img) -> None:
    from PIL import Image

    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr.astype(np.float64), 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


# ---------------------------------------------------------------- poses


def save_pose(path, pose: CameraPose, sample: SampleConfig | None = None) -> None:
    doc = {"pose": pose.to_dict()}
    if sample is not None:
        doc["sample"] = sample_to_dict(sample)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_pose(path) -> tuple[CameraPose, SampleConfig | None]:
    try:
        doc = json.loads(Path(path).read_text())
        _reject_unknown(doc, {"pose", "sample"}, str(path))
        pose = CameraPose.from_dict(doc["pose"])
        sample = _build(SampleConfig, doc["sample"], "sample") if "sample" in doc else None
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a pose file ({exc})") from None
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return pose, sample


def sample_to_dict(sample: SampleConfig) -> dict:
    return dataclasses.asdict(sample)


# ---------------------------------------------------------------- run configuration


MODEL_KEYS = {"seed", "l_pos", "l_dir", "hidden", "depth", "color_hidden", "density_activation"}


@dataclasses.dataclass
class RunConfig:
    """Everything a CLI command needs; see README for the JSON schema."""

    out: Path
    scene_dir: Path | None = None
    weights: Path | None = None
    view: Path | None = None
    secret: str | None = None
    model: dict = dataclasses.field(default_factory=dict)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    sample: SampleConfig = dataclasses.field(default_factory=SampleConfig)
    stego: StegoConfig = dataclasses.field(default_factory=StegoConfig)
    seeds: list = dataclasses.field(default_factory=lambda: [0])
    checkpoints: list = dataclasses.field(default_factory=lambda: [50, 200, 300])
    loss_threshold: float | None = None


_TOP_KEYS = {"out", "scene_dir", "weights", "view", "secret", "model", "train", "sample",
             "stego", "seeds", "checkpoints", "loss_threshold"}


def _reject_unknown(d, allowed, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _build(cls, d, where: str, **extra):
    names = {f.name for f in dataclasses.fields(cls)} - set(extra)
    _reject_unknown(d, names, where)
    try:
        return cls(**d, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_run_config(doc: dict, base: Path = Path(".")) -> RunConfig:
    """Validate a config mapping; relative paths resolve against ``base``."""
    _reject_unknown(doc, _TOP_KEYS, "config")
    if "out" not in doc:
        raise ConfigError("config: 'out' (output directory) is required")

    def path(key, must_exist=True):
        if doc.get(key) is None:
            return None
        p = Path(doc[key])
        p = p if p.is_absolute() else base / p
        if must_exist and not p.exists():
            raise ConfigError(f"config: {key} {str(p)!r} does not exist")
        return p

    sample = _build(SampleConfig, doc.get("sample", {}), "sample")
    train = _build(TrainConfig, doc.get("train", {}), "train", sample=sample)
    stego_doc = dict(doc.get("stego", {}))
    if "batch_sizes" in stego_doc and not isinstance(stego_doc["batch_sizes"], list):
        raise ConfigError("stego: batch_sizes must be a list")
    stego = _build(StegoConfig, stego_doc, "stego")
    model = doc.get("model", {})
    _reject_unknown(model, MODEL_KEYS, "model")

    seeds = doc.get("seeds", [0])
    default_checks = [c for c in (50, 200, 300) if c < stego.iters] + [stego.iters]
    checkpoints = doc.get("checkpoints", default_checks)
    if not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("config: seeds must be a non-empty list of integers")
    if not all(isinstance(c, int) and 1 <= c <= stego.iters for c in checkpoints):
        raise ConfigError("config: checkpoints must be iterations within 1..stego.iters")

    secret = doc.get("secret")
    if secret is not None and not isinstance(secret, str):
        raise ConfigError("config: secret must be a path or a procedural kind name")
    if secret is not None and secret.endswith(".ppm") and not (base / secret).exists() \
            and not Path(secret).exists():
        raise ConfigError(f"config: secret {secret!r} does not exist")

    return RunConfig(
        out=path("out", must_exist=False),
        scene_dir=path("scene_dir"),
        weights=path("weights"),
        view=path("view"),
        secret=secret,
        model=model,
        train=train,
        sample=sample,
        stego=stego,
        seeds=list(seeds),
        checkpoints=list(checkpoints),
        loss_threshold=doc.get("loss_threshold"),
    )


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {str(path)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return parse_run_config(doc, path.parent)
