"""Random-shooting MPC over the terrain network's predicted class distributions."""

from __future__ import annotations

import csv
import itertools
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import model as tm
from . import sim
from .collect import ExplorationPolicy, to_u8
from .config import CameraConfig, ExploreConfig, PlannerConfig, SimConfig


def reward_map(label, n_classes):
    """Smoother terrain earns more: class ``y`` is worth ``|C| - 1 - y``."""
    y = np.asarray(label)
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError(f"terrain class out of range [0, {n_classes})")
    r = n_classes - 1 - y
    return int(r) if r.ndim == 0 else r


def class_rewards(n_classes):
    return reward_map(np.arange(n_classes), n_classes).astype(np.float64)


def expected_return(prediction, n_classes=None, rewards=None, tol=1e-6):
    """Probability-weighted reward summed over the horizon.

    ``prediction`` is ``(H, C)`` or a stack ``(K, H, C)``; returns a scalar or
    ``(K,)``. Rows must be normalized to within ``tol``.
    """
    p = np.asarray(prediction, dtype=np.float64)
    n_classes = p.shape[-1] if n_classes is None else n_classes
    if p.shape[-1] != n_classes:
        raise ValueError(f"prediction has {p.shape[-1]} classes, expected {n_classes}")
    if np.any(np.abs(p.sum(-1) - 1.0) > tol) or np.any(p < -tol):
        raise ValueError("prediction rows are not normalized probability vectors")
    r = class_rewards(n_classes) if rewards is None else np.asarray(rewards, dtype=np.float64)
    out = (p @ r).sum(-1)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class RolloutCandidate:
    actions: np.ndarray
    expected_return: float


def sample_rollouts(n_candidates, horizon, rng, scheme="held_interval",
                    explore: ExploreConfig | None = None, dt=1.0 / 6.0):
    """``(K, H)`` random steering sequences in [-1, 1]."""
    if n_candidates < 1:
        raise ValueError("need at least one candidate")
    if scheme == "per_step_uniform":
        return rng.uniform(-1.0, 1.0, size=(n_candidates, horizon))
    if scheme != "held_interval":
        raise ValueError(f"unknown rollout scheme {scheme!r}")
    cfg = explore or ExploreConfig()
    out = np.empty((n_candidates, horizon))
    for k in range(n_candidates):
        out[k] = ExplorationPolicy(rng, cfg, dt).take(horizon)
    return out


def enumerate_rollouts(values, horizon):
    """Every sequence over a discrete action set, in lexicographic order."""
    return np.array(list(itertools.product(values, repeat=horizon)), dtype=np.float64)


def score_candidates(model: tm.TerrainModel, ground, aerial, candidates, rewards=None,
                     veto_threshold=None):
    h0, c0 = tm.encode(model, ground, aerial)
    probs = tm.rollout_from_state(model, h0, c0, candidates)
    returns = expected_return(probs, model.arch.n_classes, rewards)
    if veto_threshold is not None:
        p_obstacle = probs[..., -1]
        p_clear = np.prod(1.0 - p_obstacle, axis=-1)
        returns = np.where(1.0 - p_clear > veto_threshold, -np.inf, returns)
    return returns, probs


def select_action(model: tm.TerrainModel, ground, aerial, n_candidates=128, rng=None,
                  candidates=None, config: PlannerConfig | None = None,
                  explore: ExploreConfig | None = None, dt=1.0 / 6.0, rewards=None):
    """Score K rollouts and return ``(first_action, best, all_candidates)``.

    Ties go to the lowest candidate index. Pass ``candidates`` to score a
    fixed set instead of sampling.
    """
    config = config or PlannerConfig(n_candidates=n_candidates)
    if candidates is None:
        candidates = sample_rollouts(n_candidates, model.arch.horizon, rng, config.scheme,
                                     explore, dt)
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    veto = config.veto_threshold if config.collision_veto else None
    returns, _ = score_candidates(model, ground, aerial, candidates, rewards, veto)
    if veto is not None and np.all(np.isneginf(returns)):
        returns, _ = score_candidates(model, ground, aerial, candidates, rewards)
    best = int(np.argmax(returns))
    all_c = [RolloutCandidate(candidates[k], float(returns[k])) for k in range(len(candidates))]
    return float(candidates[best, 0]), all_c[best], all_c


# --------------------------------------------------------------------------- #
# closed loop


@dataclass
class EpisodeTrace:
    step: list = field(default_factory=list)
    x: list = field(default_factory=list)
    y: list = field(default_factory=list)
    heading: list = field(default_factory=list)
    action: list = field(default_factory=list)
    chosen_return: list = field(default_factory=list)
    traversed_class: list = field(default_factory=list)
    collided: list = field(default_factory=list)
    start: tuple = (0.0, 0.0, 0.0)

    def __len__(self):
        return len(self.step)

    @property
    def ended_in_collision(self):
        return bool(self.collided and self.collided[-1])

    def append(self, k, state, action, ret, cls, collided):
        self.step.append(k)
        self.x.append(state.x)
        self.y.append(state.y)
        self.heading.append(state.heading)
        self.action.append(float(action))
        self.chosen_return.append(float(ret))
        self.traversed_class.append(int(cls))
        self.collided.append(bool(collided))


class FrameHistory:
    """Last M frames of one view; the first frame seeds all M slots."""

    def __init__(self, history):
        self.frames = deque(maxlen=history)
        self.history = history

    def push(self, frame):
        if not self.frames:
            for _ in range(self.history):
                self.frames.append(frame)
        else:
            self.frames.append(frame)

    def stacked(self):
        return np.concatenate(list(self.frames), axis=-1)


def observe(world, state, camera):
    g = to_u8(sim.render_ground(world, state, camera)) / 255.0
    a = to_u8(sim.render_aerial(world, state, camera)) / 255.0
    return g, a


class ModelPolicy:
    """MPC policy: replan every step from the frame history."""

    def __init__(self, model: tm.TerrainModel, config: PlannerConfig, explore: ExploreConfig,
                 dt: float):
        self.model = model
        self.config = config
        self.explore = explore
        self.dt = dt

    def reset(self, rng):
        self.rng = rng
        self.ground = FrameHistory(self.model.arch.history)
        self.aerial = FrameHistory(self.model.arch.history)

    def act(self, g, a):
        self.ground.push(g)
        self.aerial.push(a)
        action, best, _ = select_action(
            self.model,
            self.ground.stacked() if self.model.uses_ground else None,
            self.aerial.stacked() if self.model.uses_aerial else None,
            rng=self.rng, config=self.config, explore=self.explore, dt=self.dt)
        return action, best.expected_return


class RandomPolicy:
    """Held-interval exploration actions; ignores observations."""

    needs_images = False

    def __init__(self, explore: ExploreConfig, dt: float):
        self.explore = explore
        self.dt = dt

    def reset(self, rng):
        self._policy = ExplorationPolicy(rng, self.explore, self.dt)

    def act(self, g, a):
        return next(self._policy), float("nan")


def mpc_drive(world: sim.WorldMap, policy, sim_cfg: SimConfig, camera: CameraConfig,
              max_steps: int, rng, start) -> EpisodeTrace:
    """Observe, plan, step until collision or ``max_steps``."""
    state = sim.initial_state(*start, sim_cfg)
    trace = EpisodeTrace(start=tuple(float(v) for v in start))
    policy.reset(rng)
    needs_images = getattr(policy, "needs_images", True)
    for k in range(max_steps):
        g, a = observe(world, state, camera) if needs_images else (None, None)
        action, ret = policy.act(g, a)
        state, event = sim.step(world, state, action, sim_cfg)
        trace.append(k, state, action, ret, event.traversed_class, event.collided)
        if event.collided:
            break
    return trace


# --------------------------------------------------------------------------- #
# export

TRACE_FIELDS = ["step", "x", "y", "heading", "action", "chosen_return", "traversed_class",
                "collided"]


def write_trace_csv(trace: EpisodeTrace, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for i in range(len(trace)):
            w.writerow([trace.step[i], f"{trace.x[i]:.6f}", f"{trace.y[i]:.6f}",
                        f"{trace.heading[i]:.6f}", f"{trace.action[i]:.6f}",
                        f"{trace.chosen_return[i]:.6f}", trace.traversed_class[i],
                        int(trace.collided[i])])


def read_trace_csv(path) -> EpisodeTrace:
    trace = EpisodeTrace()
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            trace.step.append(int(row["step"]))
            trace.x.append(float(row["x"]))
            trace.y.append(float(row["y"]))
            trace.heading.append(float(row["heading"]))
            trace.action.append(float(row["action"]))
            trace.chosen_return.append(float(row["chosen_return"]))
            trace.traversed_class.append(int(row["traversed_class"]))
            trace.collided.append(bool(int(row["collided"])))
    return trace


def segment_color(cls, n_classes):
    """Green for smooth, red for the roughest drivable class and obstacles."""
    if cls == 0:
        return "#1a9e1a"
    if cls >= n_classes - 2:
        return "#d62020"
    return "#e0a000"
