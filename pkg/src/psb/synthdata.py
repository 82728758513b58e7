"""Bouncing-sprite videos with exact instance masks and per-object factors.

Sprites move with constant velocity and reflect elastically off the canvas
walls.  Rendering is hard-edged (a pixel belongs to a sprite iff its center
is inside the shape) and back-to-front by id, so masks are exact and frames
can be re-rendered bit-for-bit from the stored factors.

Dataset file layout (all integers little-endian u32)::

    b"PSBD" | version | episode count
    per episode:
        json length | json bytes (seed + factors)
        T | C | H | W
        frames  float32 little-endian, T*C*H*W values, row-major
        masks   uint8, T*H*W values, row-major (0 = background)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SHAPES = ("square", "circle", "triangle")
SIZES = (3, 4, 5)
PALETTE = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
    (1.0, 0.5, 0.0),
    (0.75, 0.75, 0.75),
)
BACKGROUND = (0.0, 0.0, 0.0)

MAGIC = b"PSBD"
VERSION = 1


class DatasetError(ValueError):
    pass


class HeaderError(DatasetError):
    """Magic bytes do not match."""


class VersionError(DatasetError):
    """File written by an unsupported format version."""


class TruncatedError(DatasetError):
    """File ends before the declared payload."""


@dataclass
class SynthConfig:
    T: int = 6
    H: int = 32
    W: int = 32
    min_objects: int = 2
    max_objects: int = 3
    max_speed: float = 1.5
    palette: tuple = PALETTE

    def __post_init__(self):
        if self.H < 16 or self.W < 16:
            raise ValueError("H and W must be >= 16")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 1 <= self.min_objects <= self.max_objects <= len(self.palette):
            raise ValueError("invalid object count range")


@dataclass
class SpriteSpec:
    shape: str
    color: tuple[float, float, float]
    size: int
    position: tuple[float, float]
    velocity: tuple[float, float]


@dataclass
class Episode:
    """frames [T,3,H,W] float32, masks [T,H,W] uint8 (0 = background, ids 1..M).

    ``factors`` holds one record per object with its static attributes and
    per-time-step positions and velocities.
    """

    frames: np.ndarray
    masks: np.ndarray
    factors: list[dict] = field(default_factory=list)
    seed: int = 0

    @property
    def num_objects(self) -> int:
        return len(self.factors)

    def factor_arrays(self) -> dict[str, np.ndarray]:
        """Per-factor arrays shaped [T, M, ...]; categoricals as int indices."""
        pos = np.array([f["positions"] for f in self.factors]).transpose(1, 0, 2)
        vel = np.array([f["velocities"] for f in self.factors]).transpose(1, 0, 2)
        T = pos.shape[0]
        color = np.array([color_index(f["color"]) for f in self.factors])[None].repeat(T, axis=0)
        shape = np.array([SHAPES.index(f["shape"]) for f in self.factors])[None].repeat(T, axis=0)
        size = np.array([SIZES.index(f["size"]) for f in self.factors])[None].repeat(T, axis=0)
        return {"position": pos, "velocity": vel, "color": color, "shape": shape, "size": size}

    def __eq__(self, other) -> bool:
        if not isinstance(other, Episode):
            return NotImplemented
        return (self.seed == other.seed and self.factors == other.factors
                and self.frames.dtype == other.frames.dtype
                and np.array_equal(self.frames, other.frames)
                and np.array_equal(self.masks, other.masks))


def color_index(color) -> int:
    return PALETTE.index(tuple(float(c) for c in color))


def reflect(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    """Fold a coordinate back into [lo, hi], flipping velocity per bounce."""
    while pos < lo or pos > hi:
        if pos < lo:
            pos = 2 * lo - pos
        else:
            pos = 2 * hi - pos
        vel = -vel
    return pos, vel


def step_sprite(position, velocity, size: int, H: int, W: int):
    x, y = position
    vx, vy = velocity
    x, vx = reflect(x + vx, vx, size, W - size)
    y, vy = reflect(y + vy, vy, size, H - size)
    return (x, y), (vx, vy)


def shape_mask(shape: str, position, size: int, H: int, W: int) -> np.ndarray:
    """Boolean coverage of pixel centers; ``position`` is the shape centroid."""
    x, y = position
    px = np.arange(W) + 0.5
    py = np.arange(H) + 0.5
    dx = px[None, :] - x
    dy = py[:, None] - y
    r = float(size)
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "triangle":
        # apex at y - r, base at y + r/2, half-width r at the base
        return (dy >= -r) & (dy <= r / 2) & (np.abs(dx) <= (dy + r) / 1.5)
    raise ValueError(f"unknown shape {shape}")


def render(sprites: list[dict], t: int, H: int, W: int):
    """Render time-step t; later sprites occlude earlier ones."""
    frame = np.empty((3, H, W), dtype=np.float32)
    frame[:] = np.asarray(BACKGROUND, dtype=np.float32)[:, None, None]
    mask = np.zeros((H, W), dtype=np.uint8)
    for obj in sprites:
        cover = shape_mask(obj["shape"], obj["positions"][t], obj["size"], H, W)
        frame[:, cover] = np.asarray(obj["color"], dtype=np.float32)[:, None]
        mask[cover] = obj["id"]
    return frame, mask


def render_from_factors(factors: list[dict], T: int, H: int, W: int):
    frames = np.empty((T, 3, H, W), dtype=np.float32)
    masks = np.empty((T, H, W), dtype=np.uint8)
    for t in range(T):
        frames[t], masks[t] = render(factors, t, H, W)
    return frames, masks


def simulate(spec: SpriteSpec, T: int, H: int, W: int):
    pos, vel = tuple(spec.position), tuple(spec.velocity)
    positions, velocities = [list(pos)], [list(vel)]
    for _ in range(T - 1):
        pos, vel = step_sprite(pos, vel, spec.size, H, W)
        positions.append(list(pos))
        velocities.append(list(vel))
    return positions, velocities


def sample_sprites(rng: np.random.Generator, cfg: SynthConfig) -> list[SpriteSpec]:
    m = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    colors = rng.choice(len(cfg.palette), size=m, replace=False)
    specs = []
    for ci in colors:
        size = int(rng.choice(SIZES))
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        x = float(rng.uniform(size, cfg.W - size))
        y = float(rng.uniform(size, cfg.H - size))
        vx, vy = (float(v) for v in rng.uniform(-cfg.max_speed, cfg.max_speed, size=2))
        specs.append(SpriteSpec(shape, tuple(float(c) for c in cfg.palette[int(ci)]),
                                size, (x, y), (vx, vy)))
    return specs


def episode_from_specs(specs: list[SpriteSpec], cfg: SynthConfig, seed: int = 0) -> Episode:
    factors = []
    for i, spec in enumerate(specs, start=1):
        positions, velocities = simulate(spec, cfg.T, cfg.H, cfg.W)
        factors.append({"id": i, "shape": spec.shape, "color": list(spec.color),
                        "size": spec.size, "positions": positions, "velocities": velocities})
    frames, masks = render_from_factors(factors, cfg.T, cfg.H, cfg.W)
    return Episode(frames, masks, factors, seed)


def generate_episode(seed: int, cfg: SynthConfig | None = None) -> Episode:
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    return episode_from_specs(sample_sprites(rng, cfg), cfg, seed)


def episode_seed(root_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([root_seed, index]).generate_state(1)[0])


def generate_dataset(count: int, root_seed: int = 0, cfg: SynthConfig | None = None) -> list[Episode]:
    return [generate_episode(episode_seed(root_seed, i), cfg) for i in range(count)]


def write_dataset(path, episodes: list[Episode]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", VERSION, len(episodes)))
        for ep in episodes:
            meta = json.dumps({"seed": ep.seed, "factors": ep.factors}).encode()
            fh.write(struct.pack("<I", len(meta)))
            fh.write(meta)
            T, C, H, W = ep.frames.shape
            fh.write(struct.pack("<IIII", T, C, H, W))
            fh.write(np.ascontiguousarray(ep.frames, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(ep.masks, dtype="u1").tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out


def read_dataset(path) -> list[Episode]:
    r = _Reader(Path(path).read_bytes())
    if len(r.buf) < 4 or r.buf[:4] != MAGIC:
        raise HeaderError(f"{path}: bad magic")
    r.take(4)
    version, count = struct.unpack("<II", r.take(8))
    if version != VERSION:
        raise VersionError(f"{path}: format version {version}, expected {VERSION}")
    episodes = []
    for _ in range(count):
        (n,) = struct.unpack("<I", r.take(4))
        meta = json.loads(r.take(n))
        T, C, H, W = struct.unpack("<IIII", r.take(16))
        frames = np.frombuffer(r.take(4 * T * C * H * W), dtype="<f4").reshape(T, C, H, W)
        masks = np.frombuffer(r.take(T * H * W), dtype="u1").reshape(T, H, W)
        episodes.append(Episode(frames.astype(np.float32), masks.copy(), meta["factors"], meta["seed"]))
    return episodes
