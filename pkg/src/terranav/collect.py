"""Off-policy data collection and dataset assembly.

A collection episode drives the exploration policy through a world at the
control rate, recording both camera views, a vibration window and a range
reading per step. Record ``k`` stores the action applied at step ``k`` and
everything observed after it, so the label in a record is the terrain class
traversed after applying that record's action.

A :class:`Dataset` is the record table plus a sample table. Sample ``j``
anchored at record ``t`` observes the frames of records ``t-M+1 .. t`` and
predicts the labels of records ``t+1 .. t+H`` under their actions.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import sim
from .config import CameraConfig, CollectConfig, ExploreConfig, ImuConfig, SimConfig
from .model import TrainingBatch

DATA_MAGIC = "TERRANAV-DATA"
DATA_VERSION = 1


# --------------------------------------------------------------------------- #
# exploration policy


class ExplorationPolicy:
    """Held random steering: a uniform base action kept for a Gaussian-length
    interval, with small per-step Gaussian jitter, clamped to [-1, 1]."""

    def __init__(self, rng, config: ExploreConfig, dt: float):
        if config.hold_std < 0 or config.jitter_std < 0:
            raise ValueError("standard deviations must be non-negative")
        self.rng = rng
        self.config = config
        self.dt = dt
        self._base = 0.0
        self._left = 0

    def hold_duration(self) -> float:
        cfg = self.config
        while True:
            d = self.rng.normal(cfg.hold_mean, cfg.hold_std) if cfg.hold_std > 0 else cfg.hold_mean
            if d >= cfg.hold_min:
                return d

    def next_interval(self):
        """``(base_action, n_steps)`` of the next hold interval."""
        base = self.rng.uniform(-1.0, 1.0)
        n = max(1, int(round(self.hold_duration() / self.dt)))
        return base, n

    def __iter__(self):
        return self

    def __next__(self) -> float:
        if self._left <= 0:
            self._base, self._left = self.next_interval()
        self._left -= 1
        a = self._base
        if self.config.jitter_std > 0:
            a += self.rng.normal(0.0, self.config.jitter_std)
        return float(min(1.0, max(-1.0, a)))

    def take(self, n):
        return np.array([next(self) for _ in range(n)])


# --------------------------------------------------------------------------- #
# records


def record_dtype(camera: CameraConfig, imu: ImuConfig):
    return np.dtype([
        ("episode", "<u4"), ("step", "<u4"),
        ("x", "<f8"), ("y", "<f8"), ("heading", "<f8"),
        ("action", "<f8"), ("distance", "<f8"), ("min_range", "<f8"),
        ("vibration", "<f8", (imu.n_samples,)),
        ("true_class", "u1"), ("label", "i1"), ("collided", "u1"),
        ("ground", "u1", (camera.ground_height, camera.ground_width, 3)),
        ("aerial", "u1", (camera.aerial_height, camera.aerial_width, 3)),
    ])


@dataclass(frozen=True)
class TrajectoryRecord:
    timestep: int
    pose: tuple
    action: float
    ground: np.ndarray
    aerial: np.ndarray
    vibration: np.ndarray
    terrain_class: int
    min_range: float
    collided: bool
    distance: float


def as_records(table) -> list[TrajectoryRecord]:
    return [TrajectoryRecord(int(r["step"]), (float(r["x"]), float(r["y"]), float(r["heading"])),
                             float(r["action"]), r["ground"], r["aerial"], r["vibration"],
                             int(r["label"]), float(r["min_range"]), bool(r["collided"]),
                             float(r["distance"]))
            for r in table]


def to_u8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def spawn_pose(world: sim.WorldMap, rng, clearance: float, classes=None):
    """Random pose on a cell at least ``clearance`` metres from any obstacle,
    optionally restricted to cells whose terrain class is in ``classes``."""
    free = ~world.obstacle
    dist = ndimage.distance_transform_edt(free) * world.cell_size
    ok = dist >= clearance
    if classes is not None:
        ok &= np.isin(world.grid, list(classes))
    rows, cols = np.nonzero(ok)
    if len(rows) == 0:
        rows, cols = np.nonzero(free)
    i = rng.integers(len(rows))
    x, y = world.cell_center(rows[i], cols[i])
    return x, y, rng.uniform(-math.pi, math.pi)


def episode_rng(seed: int, index: int):
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def run_collection_episode(world: sim.WorldMap, policy, sim_cfg: SimConfig, camera: CameraConfig,
                           imu: ImuConfig, max_steps: int, rng, episode: int = 0,
                           start=None, labeler=None, clearance: float = 2.0):
    """Drive ``policy`` until collision or ``max_steps``; returns a record table.

    ``labeler`` (a fitted :class:`~terranav.labeling.VibrationLabeler`) fills
    the ``label`` column; without one labels stay -1 for a later pass.
    """
    x, y, heading = start if start is not None else spawn_pose(world, rng, clearance)
    state = sim.initial_state(x, y, heading, sim_cfg)
    table = np.zeros(max_steps, dtype=record_dtype(camera, imu))
    n = 0
    for k in range(max_steps):
        action = next(policy)
        state, event = sim.step(world, state, action, sim_cfg)
        r = table[k]
        r["episode"], r["step"] = episode, k
        r["x"], r["y"], r["heading"] = state.x, state.y, state.heading
        r["action"] = action
        r["distance"] = state.speed * sim_cfg.dt
        r["min_range"] = event.min_range
        r["vibration"] = sim.synth_imu(world, state, imu, rng,
                                       terrain_class=event.traversed_class)
        r["true_class"] = event.traversed_class
        r["label"] = -1
        r["collided"] = event.collided
        r["ground"] = to_u8(sim.render_ground(world, state, camera))
        r["aerial"] = to_u8(sim.render_aerial(world, state, camera))
        n = k + 1
        if event.collided:
            break
    table = table[:n]
    if labeler is not None:
        table["label"] = labeler.predict(table["vibration"], table["min_range"])
    return table


def collect_corpus(world, sim_cfg, camera, imu, explore: ExploreConfig, collect: CollectConfig,
                   seed: int, n_episodes: int | None = None, labeler=None):
    """Independent episodes with RNG streams derived from ``(seed, index)``."""
    n_episodes = collect.episodes if n_episodes is None else n_episodes
    tables = []
    for i in range(n_episodes):
        rng = episode_rng(seed, i)
        policy = ExplorationPolicy(episode_rng(seed + 7919, i), explore, sim_cfg.dt)
        tables.append(run_collection_episode(world, policy, sim_cfg, camera, imu,
                                             collect.max_steps, rng, episode=i,
                                             labeler=labeler, clearance=collect.spawn_clearance))
    return np.concatenate(tables) if tables else np.zeros(0, record_dtype(camera, imu))


# --------------------------------------------------------------------------- #
# samples


def episode_slices(records):
    """``(episode_id, start, stop)`` for each contiguous episode run."""
    ep = records["episode"]
    if len(ep) == 0:
        return []
    cuts = np.flatnonzero(np.diff(ep.astype(np.int64)) != 0) + 1
    starts = np.concatenate([[0], cuts])
    stops = np.concatenate([cuts, [len(ep)]])
    return [(int(ep[s]), int(s), int(e)) for s, e in zip(starts, stops)]


def distance_keep(distances, spacing):
    """Indices kept when resampling a run every ``spacing`` metres travelled."""
    keep = [0]
    acc = 0.0
    for i in range(1, len(distances)):
        acc += distances[i]
        if acc >= spacing - 1e-9:
            keep.append(i)
            acc = 0.0
    return np.array(keep, dtype=np.int64)


def build_samples(records, history: int, horizon: int, mode: str = "time",
                  spacing: float = 0.35):
    """Sample table: frame indices ``(n, M)`` and future indices ``(n, H)``
    into ``records``. Episodes shorter than ``M + H`` contribute nothing."""
    if mode not in ("time", "distance"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    frames, future = [], []
    for _, start, stop in episode_slices(records):
        idx = np.arange(start, stop)
        if mode == "distance":
            idx = idx[distance_keep(records["distance"][start:stop], spacing)]
        n = len(idx)
        for t in range(history - 1, n - horizon):
            frames.append(idx[t - history + 1:t + 1])
            future.append(idx[t + 1:t + 1 + horizon])
    frames = np.array(frames, dtype=np.int64).reshape(-1, history)
    future = np.array(future, dtype=np.int64).reshape(-1, horizon)
    return frames, future


class Dataset:
    """Record table plus sample table; ``get_batch`` stacks frames for the network."""

    def __init__(self, records, frames, future, manifest=None):
        self.records = records
        self.frames = np.asarray(frames, dtype=np.int64)
        self.future = np.asarray(future, dtype=np.int64)
        self.manifest = dict(manifest or {})

    def __len__(self):
        return len(self.frames)

    @property
    def history(self):
        return self.frames.shape[1]

    @property
    def horizon(self):
        return self.future.shape[1]

    @property
    def ground_shape(self):
        return self.records.dtype["ground"].shape[:2]

    @property
    def aerial_shape(self):
        return self.records.dtype["aerial"].shape[:2]

    def sample_episodes(self):
        return self.records["episode"][self.frames[:, -1]]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.records, self.frames[indices], self.future[indices], self.manifest)

    def labels(self):
        return self.records["label"][self.future].astype(np.int64)

    def actions(self):
        return self.records["action"][self.future]

    @staticmethod
    def _stack(images):
        # (N, M, H, W, 3) -> (N, H, W, 3M), oldest frame first
        n, m, h, w, c = images.shape
        return images.transpose(0, 2, 3, 1, 4).reshape(n, h, w, m * c) / 255.0

    def observation(self, i):
        g = self._stack(self.records["ground"][self.frames[i:i + 1]])[0]
        a = self._stack(self.records["aerial"][self.frames[i:i + 1]])[0]
        return g, a

    def get_batch(self, indices, mode="fusion") -> TrainingBatch:
        indices = np.asarray(indices, dtype=np.int64)
        fr = self.frames[indices]
        fut = self.future[indices]
        ground = self._stack(self.records["ground"][fr]) if mode != "air_only" else None
        aerial = self._stack(self.records["aerial"][fr]) if mode != "ground_only" else None
        labels = self.records["label"][fut].astype(np.int64)
        if np.any(labels < 0):
            raise ValueError("dataset contains unlabeled records")
        return TrainingBatch(ground=ground, aerial=aerial, actions=self.records["action"][fut],
                             labels=labels)


def build_dataset(records, history, horizon, mode="time", spacing=0.35, manifest=None):
    frames, future = build_samples(records, history, horizon, mode, spacing)
    return Dataset(records, frames, future, manifest)


def split_dataset(dataset: Dataset, train_fraction: float = 0.75, seed: int = 0):
    """Seeded split by whole episodes; no episode contributes to both sides."""
    if len(dataset) < 4:
        raise ValueError("need at least 4 samples to split")
    eps = dataset.sample_episodes()
    unique = np.unique(eps)
    order = np.random.default_rng(seed).permutation(unique)
    n_train = int(round(train_fraction * len(unique)))
    n_train = min(max(n_train, 1), len(unique) - 1) if len(unique) > 1 else len(unique)
    train_eps = np.sort(order[:n_train])
    mask = np.isin(eps, train_eps)
    return dataset.subset(np.flatnonzero(mask)), dataset.subset(np.flatnonzero(~mask))


# --------------------------------------------------------------------------- #
# persistence


def save_dataset(dataset: Dataset, path) -> None:
    """Container layout (all little-endian):

    ``u64`` header length, UTF-8 text header (magic/version line then
    ``key = value`` manifest lines), the record table as fixed-size records,
    then the sample table as ``M + H`` ``u32`` record indices per sample.
    """
    rec = dataset.records
    fields_desc = ";".join(f"{name}:{rec.dtype[name].str}:{'x'.join(map(str, rec.dtype[name].shape))}"
                           for name in rec.dtype.names)
    manifest = dict(dataset.manifest)
    manifest.update({
        "n_records": len(rec), "record_bytes": rec.dtype.itemsize, "record_fields": fields_desc,
        "n_samples": len(dataset), "history": dataset.frames.shape[1],
        "horizon": dataset.future.shape[1],
        "ground_shape": "x".join(map(str, dataset.ground_shape)),
        "aerial_shape": "x".join(map(str, dataset.aerial_shape)),
        "n_vibration": rec.dtype["vibration"].shape[0],
    })
    lines = [f"{DATA_MAGIC} {DATA_VERSION}"]
    for key in sorted(manifest):
        value = str(manifest[key]).replace("\n", "\\n")
        lines.append(f"{key} = {value}")
    header = ("\n".join(lines) + "\n").encode()
    buf = io.BytesIO()
    buf.write(len(header).to_bytes(8, "little"))
    buf.write(header)
    buf.write(rec.tobytes())
    table = np.concatenate([dataset.frames, dataset.future], axis=1).astype("<u4")
    buf.write(table.tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_manifest(path) -> dict:
    with open(path, "rb") as fh:
        n = int.from_bytes(fh.read(8), "little")
        header = fh.read(n)
    return _parse_header(header, path)


def _parse_header(header, path):
    try:
        text = header.decode()
        first, *rest = text.splitlines()
        magic, version = first.split()
    except (ValueError, UnicodeDecodeError):
        raise ValueError(f"{path}: not a dataset file") from None
    if magic != DATA_MAGIC or int(version) != DATA_VERSION:
        raise ValueError(f"{path}: unsupported dataset file ({first!r})")
    return {k: v.replace("\\n", "\n") for k, v in (line.split(" = ", 1) for line in rest)}


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        data = fh.read()
    n = int.from_bytes(data[:8], "little")
    manifest = _parse_header(data[8:8 + n], path)
    try:
        gh, gw = map(int, manifest["ground_shape"].split("x"))
        ah, aw = map(int, manifest["aerial_shape"].split("x"))
        camera = CameraConfig(ground_height=gh, ground_width=gw, aerial_height=ah, aerial_width=aw)
        dtype = record_dtype(camera, ImuConfig(n_samples=int(manifest["n_vibration"])))
        n_rec = int(manifest["n_records"])
        n_samples = int(manifest["n_samples"])
        m, h = int(manifest["history"]), int(manifest["horizon"])
    except (KeyError, ValueError):
        raise ValueError(f"{path}: incomplete dataset manifest") from None
    if dtype.itemsize != int(manifest["record_bytes"]):
        raise ValueError(f"{path}: record size mismatch")
    off = 8 + n
    expected = off + n_rec * dtype.itemsize + n_samples * (m + h) * 4
    if len(data) != expected:
        raise ValueError(f"{path}: truncated or corrupt dataset ({len(data)} != {expected} bytes)")
    records = np.frombuffer(data, dtype, n_rec, off).copy()
    off += n_rec * dtype.itemsize
    table = np.frombuffer(data, "<u4", n_samples * (m + h), off).reshape(n_samples, m + h)
    table = table.astype(np.int64)
    keep = {k: v for k, v in manifest.items()
            if k not in ("n_records", "record_bytes", "record_fields", "n_samples", "history",
                         "horizon", "ground_shape", "aerial_shape", "n_vibration")}
    return Dataset(records, table[:, :m], table[:, m:], keep)
