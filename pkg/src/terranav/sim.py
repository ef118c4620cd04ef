"""Procedural 2-D off-road world, kinematic vehicle, and synthetic sensors.

Coordinates: ``x`` grows east along grid columns, ``y`` grows north along grid
rows, heading 0 points east and increases counter-clockwise. All sensors are
pure functions of the world, the pose, the config and (for the IMU) an RNG.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import CameraConfig, ConfigError, ImuConfig, SimConfig, WorldConfig, \
    section_from_text, section_text

WORLD_MAGIC = b"TERRANAV-WORLD"
WORLD_VERSION = 1

# RGB in [0, 1]; pairwise Euclidean gaps exceed twice the worst-case texture noise
CLASS_COLORS = np.array([
    [0.80, 0.76, 0.52],   # smooth
    [0.56, 0.44, 0.26],   # medium
    [0.30, 0.24, 0.30],   # rough
    [0.78, 0.12, 0.10],   # obstacle
])
THREE_CLASS_COLORS = CLASS_COLORS[[0, 2, 3]]
CANOPY_COLOR = np.array([0.08, 0.42, 0.12])
GRASS_COLOR = np.array([0.42, 0.80, 0.30])
SKY_COLOR = np.array([0.55, 0.75, 0.98])
BORDER_COLOR = np.array([0.95, 0.05, 0.95])


class WorldGenerationError(RuntimeError):
    pass


def class_palette(n_classes: int) -> np.ndarray:
    if n_classes == 4:
        return CLASS_COLORS
    if n_classes == 3:
        return THREE_CLASS_COLORS
    raise ValueError(f"no color palette for {n_classes} classes")


@dataclass
class WorldMap:
    grid: np.ndarray            # (rows, cols) uint8 terrain class
    obstacle: np.ndarray        # (rows, cols) bool
    canopy: np.ndarray          # (rows, cols) bool, hides the ground from above
    grass: np.ndarray           # (rows, cols) bool, shortens the ground camera's view
    texture: np.ndarray         # (rows, cols, 3) per-cell color offset
    config: WorldConfig
    seed: int

    @property
    def cell_size(self) -> float:
        return self.config.cell_size

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    @property
    def shape(self):
        return self.grid.shape

    def cell_index(self, x, y):
        """Row/col indices and an in-bounds mask for world coordinates."""
        col = np.floor(np.asarray(x) / self.cell_size).astype(np.int64)
        row = np.floor(np.asarray(y) / self.cell_size).astype(np.int64)
        inside = (row >= 0) & (row < self.grid.shape[0]) & (col >= 0) & (col < self.grid.shape[1])
        return np.clip(row, 0, self.grid.shape[0] - 1), np.clip(col, 0, self.grid.shape[1] - 1), inside

    def class_at(self, x, y) -> int:
        row, col, inside = self.cell_index(x, y)
        if not inside:
            return self.n_classes - 1
        return int(self.grid[row, col])

    def in_bounds(self, x, y) -> bool:
        return bool(self.cell_index(x, y)[2])

    def cell_center(self, row, col):
        return ((col + 0.5) * self.cell_size, (row + 0.5) * self.cell_size)


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    heading: float
    speed: float
    wheelbase: float


@dataclass(frozen=True)
class StepEvent:
    collided: bool
    traversed_class: int
    min_range: float


# --------------------------------------------------------------------------- #
# generation


def _smooth_field(rng, shape, sigma_cells):
    noise = rng.standard_normal(shape)
    return ndimage.gaussian_filter(noise, sigma=max(sigma_cells, 0.5), mode="wrap")


def _top_fraction(field, fraction, eligible=None):
    """Boolean mask of the ``fraction`` (of all cells) with the largest field values."""
    n_total = field.size
    n_pick = int(round(fraction * n_total))
    mask = np.zeros(field.shape, dtype=bool)
    if n_pick <= 0:
        return mask
    flat = field.ravel().copy()
    if eligible is not None:
        flat[~eligible.ravel()] = -np.inf
    order = np.argsort(-flat, kind="stable")[:n_pick]
    order = order[np.isfinite(flat[order])]
    mask.ravel()[order] = True
    return mask


def _free_is_connected(obstacle):
    labels, n = ndimage.label(~obstacle)
    return n <= 1


def generate_world(config: WorldConfig, seed: int) -> WorldMap:
    """Lay out terrain classes, tree cover, tall grass and obstacles.

    Terrain comes from thresholded smoothed noise at the requested class
    shares; canopy and grass are disjoint patches taking exactly their
    requested share of all cells. Trees sit under the canopy, rock clusters
    anywhere. Layouts whose free space is disconnected are regenerated.
    """
    if config.width_m <= 0 or config.height_m <= 0 or config.cell_size <= 0:
        raise ConfigError("world extents and cell size must be positive")
    if len(config.class_fractions) != config.n_classes - 1:
        raise ConfigError(f"class_fractions needs {config.n_classes - 1} entries")
    rows = int(round(config.height_m / config.cell_size))
    cols = int(round(config.width_m / config.cell_size))
    ss = np.random.SeedSequence([seed, 0x7E44])
    for attempt in range(config.max_retries):
        rng = np.random.default_rng(ss.spawn(1)[0])
        world = _generate_once(config, seed, rows, cols, rng)
        if _free_is_connected(world.obstacle):
            return world
    raise WorldGenerationError(
        f"free space disconnected after {config.max_retries} attempts (seed {seed})")


def _generate_once(config, seed, rows, cols, rng):
    n_free = config.n_classes - 1
    terrain = _smooth_field(rng, (rows, cols), config.terrain_scale / config.cell_size)
    fractions = np.asarray(config.class_fractions, dtype=float)
    fractions = fractions / fractions.sum()
    cuts = np.quantile(terrain, np.cumsum(fractions)[:-1])
    grid = np.searchsorted(cuts, terrain).astype(np.uint8)
    grid = np.minimum(grid, n_free - 1).astype(np.uint8)

    mask_sigma = config.mask_scale / config.cell_size
    canopy = _top_fraction(_smooth_field(rng, (rows, cols), mask_sigma), config.canopy_fraction)
    grass = _top_fraction(_smooth_field(rng, (rows, cols), mask_sigma), config.grass_fraction,
                          eligible=~canopy)

    obstacle = np.zeros((rows, cols), dtype=bool)
    obstacle |= canopy & (rng.random((rows, cols)) < config.tree_density)
    seeds = rng.random((rows, cols)) < config.rock_density
    if config.rock_cluster > 1 and seeds.any():
        # grow each rock into a small random blob
        for r, c in zip(*np.nonzero(seeds)):
            for _ in range(config.rock_cluster - 1):
                obstacle[r, c] = True
                r = int(np.clip(r + rng.integers(-1, 2), 0, rows - 1))
                c = int(np.clip(c + rng.integers(-1, 2), 0, cols - 1))
            obstacle[r, c] = True
    else:
        obstacle |= seeds
    if config.border:
        obstacle[0, :] = obstacle[-1, :] = True
        obstacle[:, 0] = obstacle[:, -1] = True
    grid[obstacle] = config.n_classes - 1

    texture = rng.uniform(-1.0, 1.0, size=(rows, cols, 1)) * np.ones((1, 1, 3))
    return WorldMap(grid=grid, obstacle=obstacle, canopy=canopy, grass=grass,
                    texture=texture, config=config, seed=seed)


def make_world(grid, config: WorldConfig | None = None, canopy=None, grass=None, seed=0,
               texture=True) -> WorldMap:
    """Wrap a hand-built class grid (obstacle cells carry the top class)."""
    grid = np.asarray(grid, dtype=np.uint8)
    config = config or WorldConfig(height_m=grid.shape[0] * 0.5, width_m=grid.shape[1] * 0.5)
    obstacle = grid == config.n_classes - 1
    canopy = np.zeros(grid.shape, bool) if canopy is None else np.asarray(canopy, bool)
    grass = np.zeros(grid.shape, bool) if grass is None else np.asarray(grass, bool)
    if texture:
        tex = np.random.default_rng(seed).uniform(-1, 1, size=grid.shape + (1,)) * np.ones(3)
    else:
        tex = np.zeros(grid.shape + (3,))
    return WorldMap(grid=grid, obstacle=obstacle, canopy=canopy, grass=grass, texture=tex,
                    config=config, seed=seed)


# --------------------------------------------------------------------------- #
# vehicle


def initial_state(x, y, heading, config: SimConfig) -> VehicleState:
    return VehicleState(float(x), float(y), float(heading), config.speed, config.wheelbase)


def step(world: WorldMap, state: VehicleState, action: float, config: SimConfig,
         dt: float | None = None):
    """Advance the kinematic bicycle for one control period.

    Steering is held for the whole period so the motion is integrated as an
    exact circular arc. Leaving the map clamps the pose and counts as a
    collision.
    """
    dt = config.dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    if abs(action) > 1.0 + 1e-12:
        raise ValueError(f"steering action {action} outside [-1, 1]")
    delta = math.radians(config.max_steer_deg) * float(action)
    rate = state.speed / state.wheelbase * math.tan(delta)
    dist = state.speed * dt
    th0 = state.heading
    if abs(rate) < 1e-12:
        x = state.x + dist * math.cos(th0)
        y = state.y + dist * math.sin(th0)
        th1 = th0
    else:
        th1 = th0 + rate * dt
        radius = state.speed / rate
        x = state.x + radius * (math.sin(th1) - math.sin(th0))
        y = state.y - radius * (math.cos(th1) - math.cos(th0))
    th1 = math.atan2(math.sin(th1), math.cos(th1))
    out_of_bounds = not world.in_bounds(x, y)
    if out_of_bounds:
        rows, cols = world.shape
        eps = 1e-6
        x = min(max(x, 0.0), cols * world.cell_size - eps)
        y = min(max(y, 0.0), rows * world.cell_size - eps)
    new = VehicleState(x, y, th1, state.speed, state.wheelbase)
    rng_min = sense_range(world, new, config)
    collided = out_of_bounds or rng_min < config.collision_range
    traversed = world.n_classes - 1 if collided else world.class_at(x, y)
    return new, StepEvent(collided=bool(collided), traversed_class=int(traversed),
                          min_range=float(rng_min))


# --------------------------------------------------------------------------- #
# range sensing


def _march(world, x, y, angles, distances):
    """Obstacle hits along rays; returns (hits[n_rays, n_samples], row, col)."""
    px = x + np.cos(angles)[:, None] * distances[None, :]
    py = y + np.sin(angles)[:, None] * distances[None, :]
    row, col, inside = world.cell_index(px, py)
    hit = world.obstacle[row, col] | ~inside
    return hit, row, col, inside


def sense_range(world: WorldMap, state: VehicleState, config: SimConfig) -> float:
    """Minimum distance to an obstacle cell over a forward fan of beams."""
    res = world.cell_size / 5.0
    distances = np.concatenate([[0.0], np.arange(res, config.max_range + 1e-9, res)])
    half = math.radians(config.fan_deg) / 2.0
    angles = state.heading + np.linspace(-half, half, config.n_beams)
    hit, *_ = _march(world, state.x, state.y, angles, distances)
    any_hit = hit.any(axis=1)
    if not any_hit.any():
        return float(config.max_range)
    first = np.argmax(hit, axis=1)
    return float(distances[first[any_hit]].min())


# --------------------------------------------------------------------------- #
# cameras


class _GroundGeometry:
    """Per-pixel ray geometry of the pinhole ground camera (cached per config)."""

    def __init__(self, cam: CameraConfig):
        h, w = cam.ground_height, cam.ground_width
        tan_h = math.tan(math.radians(cam.hfov_deg) / 2.0)
        tan_v = tan_h * h / w
        pitch = math.radians(cam.pitch_deg)
        su = (2.0 * (np.arange(w) + 0.5) / w - 1.0) * tan_h      # right positive
        sv = (1.0 - 2.0 * (np.arange(h) + 0.5) / h) * tan_v      # up positive
        fwd = np.array([math.cos(pitch), 0.0, -math.sin(pitch)])
        right = np.array([0.0, -1.0, 0.0])
        up = np.array([math.sin(pitch), 0.0, math.cos(pitch)])
        d = fwd[None, None, :] + su[None, :, None] * right + sv[:, None, None] * up
        horiz = np.hypot(d[..., 0], d[..., 1])
        # column azimuth relative to heading (same for all rows of a column)
        self.azimuth = np.arctan2(d[0, :, 1], d[0, :, 0])
        self.slope = d[..., 2] / horiz                       # dz per metre travelled
        with np.errstate(divide="ignore"):
            ground = np.where(self.slope < 0, cam.cam_height / -self.slope, np.inf)
        self.ground_dist = ground                            # (h, w)
        self.cam = cam
        self.samples = np.arange(cam.march_step / 2, cam.view_depth, cam.march_step)


_GEOMETRY_CACHE: dict = {}


def _ground_geometry(cam):
    geo = _GEOMETRY_CACHE.get(cam)
    if geo is None:
        geo = _GEOMETRY_CACHE[cam] = _GroundGeometry(cam)
    return geo


def ground_view_limits(world: WorldMap, state: VehicleState, cam: CameraConfig):
    """Per-column distances to the first obstacle and to the grass wall.

    The grass wall is where the length of ray travelled through tall grass
    first exceeds ``grass_view_depth``. Either is ``inf`` when not reached
    within ``view_depth``.
    """
    geo = _ground_geometry(cam)
    d = geo.samples
    angles = state.heading + geo.azimuth
    hit, row, col, inside = _march(world, state.x, state.y, angles, d)
    n_cols = len(angles)
    obstacle_dist = np.full(n_cols, np.inf)
    has = hit.any(axis=1)
    obstacle_dist[has] = d[np.argmax(hit[has], axis=1)] - cam.march_step / 2
    in_grass = world.grass[row, col] & inside
    grass_len = np.cumsum(in_grass, axis=1) * cam.march_step
    over = grass_len > cam.grass_view_depth
    grass_dist = np.full(n_cols, np.inf)
    hg = over.any(axis=1)
    grass_dist[hg] = d[np.argmax(over[hg], axis=1)]
    return obstacle_dist, grass_dist


def render_ground(world: WorldMap, state: VehicleState, cam: CameraConfig) -> np.ndarray:
    """Forward camera raster ``(H, W, 3)`` in [0, 1].

    Floor pixels show the class color of the cell under them plus per-cell
    texture. Obstacles are vertical blockers ``obstacle_height`` tall; tall
    grass turns into an opaque wall once the ray has crossed
    ``grass_view_depth`` metres of it. Floor beyond ``view_depth`` and rays
    passing over everything show sky.
    """
    geo = _ground_geometry(cam)
    palette = class_palette(world.n_classes)
    obstacle_dist, grass_dist = ground_view_limits(world, state, cam)
    h, w = geo.ground_dist.shape
    img = np.empty((h, w, 3))
    img[:] = SKY_COLOR

    gd = geo.ground_dist
    floor = gd < cam.view_depth
    # floor pixels
    ang = state.heading + geo.azimuth[None, :]
    gx = state.x + np.cos(ang) * np.where(floor, gd, 0.0)
    gy = state.y + np.sin(ang) * np.where(floor, gd, 0.0)
    row, col, inside = world.cell_index(gx, gy)
    cls = world.grid[row, col]
    tex = world.texture[row, col]
    floor_rgb = palette[cls] + cam.noise_amplitude * tex
    floor_rgb[~inside] = palette[world.n_classes - 1]
    img[floor] = floor_rgb[floor]

    # walls: grass in front of obstacles wins
    for dist, height, color, is_obstacle in (
            (obstacle_dist, cam.obstacle_height, None, True),
            (grass_dist, cam.grass_height, GRASS_COLOR, False)):
        dist_b = dist[None, :]
        finite = np.isfinite(dist_b)
        wall_h = cam.cam_height + geo.slope * np.where(finite, dist_b, 0.0)
        covered = finite & (gd >= dist_b) & (wall_h <= height)
        if is_obstacle:
            covered &= ~(np.isfinite(grass_dist)[None, :] & (grass_dist[None, :] <= dist_b))
            wx = state.x + np.cos(ang) * np.where(finite, dist_b + cam.march_step / 2, 0.0)
            wy = state.y + np.sin(ang) * np.where(finite, dist_b + cam.march_step / 2, 0.0)
            wr, wc, _ = world.cell_index(wx, wy)
            wall_rgb = palette[world.n_classes - 1] + cam.noise_amplitude * world.texture[wr, wc]
            wall_rgb = np.broadcast_to(wall_rgb, (h, w, 3))
        else:
            covered &= ~(np.isfinite(obstacle_dist)[None, :] & (obstacle_dist[None, :] < dist_b))
            gr, gc, _ = world.cell_index(
                state.x + np.cos(ang) * np.where(finite, dist_b, 0.0),
                state.y + np.sin(ang) * np.where(finite, dist_b, 0.0))
            wall_rgb = color + cam.noise_amplitude * world.texture[gr, gc]
            wall_rgb = np.broadcast_to(wall_rgb, (h, w, 3))
        img[covered] = wall_rgb[covered]
    return np.clip(img, 0.0, 1.0)


def aerial_sample_points(state: VehicleState, cam: CameraConfig):
    """World coordinates of every aerial texel, shape ``(Ha, Wa)`` each.

    The patch is ``patch_length`` metres along the heading (top row farthest
    ahead) by ``patch_width`` metres across, centred ``patch_offset`` ahead.
    """
    ha, wa = cam.aerial_height, cam.aerial_width
    fwd = cam.patch_offset + (ha / 2.0 - (np.arange(ha) + 0.5)) * (cam.patch_length / ha)
    lat = (wa / 2.0 - (np.arange(wa) + 0.5)) * (cam.patch_width / wa)
    c, s = math.cos(state.heading), math.sin(state.heading)
    f = fwd[:, None]
    l = lat[None, :]
    return state.x + f * c - l * s, state.y + f * s + l * c


def render_aerial(world: WorldMap, state: VehicleState, cam: CameraConfig) -> np.ndarray:
    """Top-down patch aligned with the vehicle, ``(Ha, Wa, 3)`` in [0, 1]."""
    palette = class_palette(world.n_classes)
    px, py = aerial_sample_points(state, cam)
    row, col, inside = world.cell_index(px, py)
    tex = cam.noise_amplitude * world.texture[row, col]
    img = palette[world.grid[row, col]] + tex
    canopy = world.canopy[row, col]
    img[canopy] = CANOPY_COLOR + tex[canopy]
    img[~inside] = BORDER_COLOR
    return np.clip(img, 0.0, 1.0)


def pixel_classes(img, n_classes):
    """Nearest-palette label per pixel: class index, or -1 canopy, -2 grass,
    -3 sky, -4 border."""
    colors = np.vstack([class_palette(n_classes), CANOPY_COLOR, GRASS_COLOR, SKY_COLOR,
                        BORDER_COLOR])
    codes = np.array(list(range(n_classes)) + [-1, -2, -3, -4])
    d = ((img[..., None, :] - colors) ** 2).sum(-1)
    return codes[np.argmin(d, axis=-1)]


# --------------------------------------------------------------------------- #
# vibration


def synth_imu(world: WorldMap, state: VehicleState, config: ImuConfig, rng,
              terrain_class: int | None = None) -> np.ndarray:
    """Ground-normal acceleration window for the terrain under the vehicle.

    A sine at a class-specific dominant frequency (with random phase and a
    small frequency/amplitude jitter) plus white noise. The configured
    amplitudes are RMS values at ``ref_speed`` and scale with
    ``(speed / ref_speed) ** speed_exponent``.
    """
    cls = world.class_at(state.x, state.y) if terrain_class is None else terrain_class
    cls = min(int(cls), len(config.amplitudes) - 1)
    scale = (state.speed / config.ref_speed) ** config.speed_exponent
    amp = config.amplitudes[cls] * scale
    if config.amp_jitter > 0:
        amp *= math.exp(config.amp_jitter * rng.standard_normal())
    freq = config.frequencies[cls]
    if config.freq_jitter > 0:
        freq += rng.uniform(-config.freq_jitter, config.freq_jitter)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    t = np.arange(config.n_samples) / config.rate
    signal = math.sqrt(2.0) * amp * np.sin(2.0 * math.pi * freq * t + phase)
    if config.noise > 0:
        signal = signal + config.noise * config.amplitudes[cls] * scale * \
            rng.standard_normal(config.n_samples)
    return signal


# --------------------------------------------------------------------------- #
# persistence


def save_world(world: WorldMap, path) -> None:
    """Text header (magic, version, dimensions, generating config) then raw
    little-endian arrays: class grid u8, packed mask byte u8, texture f64."""
    rows, cols = world.shape
    header = (f"{WORLD_MAGIC.decode()} {WORLD_VERSION}\n"
              f"rows = {rows}\ncols = {cols}\nseed = {world.seed}\n"
              f"[world]\n{section_text(world.config)}").encode()
    masks = (world.obstacle.astype(np.uint8) | (world.canopy.astype(np.uint8) << 1)
             | (world.grass.astype(np.uint8) << 2))
    buf = io.BytesIO()
    buf.write(len(header).to_bytes(8, "little"))
    buf.write(header)
    buf.write(world.grid.astype("u1").tobytes())
    buf.write(masks.astype("u1").tobytes())
    buf.write(world.texture[..., 0].astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_world(path) -> WorldMap:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        n = int.from_bytes(data[:8], "little")
        header = data[8:8 + n].decode()
        first, rest = header.split("\n", 1)
        magic, version = first.split()
    except (ValueError, UnicodeDecodeError):
        raise ValueError(f"{path}: not a world file") from None
    if magic.encode() != WORLD_MAGIC or int(version) != WORLD_VERSION:
        raise ValueError(f"{path}: unsupported world file ({first!r})")
    meta, cfg_text = rest.split("[world]\n", 1)
    kv = dict(line.split(" = ", 1) for line in meta.strip().splitlines())
    rows, cols, seed = int(kv["rows"]), int(kv["cols"]), int(kv["seed"])
    config = section_from_text(WorldConfig, cfg_text)
    off = 8 + n
    size = rows * cols
    if len(data) != off + size * 10:
        raise ValueError(f"{path}: truncated world file")
    grid = np.frombuffer(data, "u1", size, off).reshape(rows, cols).copy()
    masks = np.frombuffer(data, "u1", size, off + size).reshape(rows, cols)
    tex = np.frombuffer(data, "<f8", size, off + 2 * size).reshape(rows, cols)
    return WorldMap(grid=grid, obstacle=(masks & 1).astype(bool),
                    canopy=(masks & 2).astype(bool), grass=(masks & 4).astype(bool),
                    texture=tex[..., None] * np.ones(3), config=config, seed=seed)


def write_ppm(img, path) -> None:
    """Binary PPM (P6) of an ``(H, W, 3)`` image in [0, 1]."""
    img = np.asarray(img)
    data = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def world_raster(world: WorldMap, show_canopy=True) -> np.ndarray:
    """Top-down color image of the whole map, north up."""
    palette = class_palette(world.n_classes)
    img = palette[world.grid].copy()
    if show_canopy:
        img[world.canopy] = 0.5 * img[world.canopy] + 0.5 * CANOPY_COLOR
    img[world.grass & ~world.obstacle] = 0.6 * img[world.grass & ~world.obstacle] + 0.4 * GRASS_COLOR
    return img[::-1]
