"""Closed-loop policy batteries, return statistics, and report emission."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import stats as sps

from . import model as tm
from . import sim
from .collect import spawn_pose
from .planner import EpisodeTrace, ModelPolicy, RandomPolicy, mpc_drive, reward_map, \
    segment_color

POLICY_ORDER = ("fusion", "ground_only", "air_only", "random")
REPORT_METRICS = ("episodes", "mean_return", "std_return", "mean_steps", "collision_rate")


@dataclass
class EpisodeStats:
    ret: float
    steps: int
    collided: bool
    per_class_step_counts: np.ndarray

    @classmethod
    def from_trace(cls, trace: EpisodeTrace, n_classes: int):
        classes = np.asarray(trace.traversed_class, dtype=np.int64)
        return cls(ret=float(reward_map(classes, n_classes).sum()) if len(classes) else 0.0,
                   steps=len(classes), collided=trace.ended_in_collision,
                   per_class_step_counts=np.bincount(classes, minlength=n_classes))


def battery_seeds(seed: int, index: int):
    """Independent (spawn, policy) RNG streams for one episode of a battery."""
    ss = np.random.SeedSequence([seed, index])
    spawn, policy = ss.spawn(2)
    return np.random.default_rng(spawn), np.random.default_rng(policy)


def run_policy_battery(world: sim.WorldMap, policy, n_episodes: int, sim_cfg, camera,
                       max_steps: int, seed: int, clearance: float = 2.0,
                       spawn_classes=(0,)):
    """Run ``n_episodes`` from seeded spawn poses; returns ``(stats, traces)``."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    stats, traces = [], []
    for i in range(n_episodes):
        spawn_rng, policy_rng = battery_seeds(seed, i)
        start = spawn_pose(world, spawn_rng, clearance, spawn_classes)
        trace = mpc_drive(world, policy, sim_cfg, camera, max_steps, policy_rng, start)
        traces.append(trace)
        stats.append(EpisodeStats.from_trace(trace, world.n_classes))
    return stats, traces


def summarize(stats):
    """Population mean/std of returns, pooled terrain percentages, collision rate."""
    if not stats:
        raise ValueError("no episodes to summarize")
    rets = np.array([s.ret for s in stats])
    counts = np.sum([s.per_class_step_counts for s in stats], axis=0)
    total = counts.sum()
    pct = 100.0 * counts / total if total else np.zeros_like(counts, dtype=float)
    return {
        "episodes": len(stats),
        "mean_return": float(rets.mean()),
        "std_return": float(rets.std()),
        "mean_steps": float(np.mean([s.steps for s in stats])),
        "collision_rate": float(np.mean([s.collided for s in stats])),
        "terrain_pct": pct,
        "returns": rets,
    }


@dataclass
class ComparisonReport:
    summaries: dict                       # (policy, world) -> summary dict
    traces: dict                          # (policy, world) -> list of traces
    rank_sum: dict = field(default_factory=dict)   # world -> (statistic, p-value)
    accuracy: dict = field(default_factory=dict)   # policy -> horizon accuracy table
    n_classes: int = 4
    config_text: str = ""

    @property
    def policies(self):
        seen = []
        for p, _ in self.summaries:
            if p not in seen:
                seen.append(p)
        return seen

    @property
    def worlds(self):
        seen = []
        for _, w in self.summaries:
            if w not in seen:
                seen.append(w)
        return seen


def check_families(models: dict):
    archs = [m.arch for m in models.values()]
    for a in archs[1:]:
        if (a.n_classes, a.horizon, a.history) != (archs[0].n_classes, archs[0].horizon,
                                                   archs[0].history):
            raise ValueError("models disagree on n_classes / horizon / history")


def compare_policies(models: dict, worlds: dict, n_episodes: int, cfg, seed: int,
                     include_random=True, validation=None, max_steps=None):
    """Battery every model (and the random baseline) on every world.

    ``models`` maps policy name -> :class:`~terranav.model.TerrainModel`;
    ``worlds`` maps world name -> :class:`~terranav.sim.WorldMap`. A
    two-sided Mann-Whitney rank-sum test compares fusion with ground-only
    returns on each world when both are present.
    """
    check_families(models)
    max_steps = cfg.eval.max_steps if max_steps is None else max_steps
    policies = {}
    for name, m in models.items():
        policies[name] = ModelPolicy(m, cfg.planner, cfg.explore, cfg.sim.dt)
    if include_random:
        policies["random"] = RandomPolicy(cfg.explore, cfg.sim.dt)
    n_classes = next(iter(worlds.values())).n_classes
    summaries, traces, rank_sum = {}, {}, {}
    for wname, world in worlds.items():
        for pname, pol in policies.items():
            st, tr = run_policy_battery(world, pol, n_episodes, cfg.sim, cfg.camera, max_steps,
                                        seed, cfg.collect.spawn_clearance,
                                        (0,) if cfg.eval.spawn_smooth_only else None)
            summaries[(pname, wname)] = summarize(st)
            traces[(pname, wname)] = tr
        if "fusion" in policies and "ground_only" in policies:
            a = summaries[("fusion", wname)]["returns"]
            b = summaries[("ground_only", wname)]["returns"]
            res = sps.mannwhitneyu(a, b, alternative="two-sided")
            rank_sum[wname] = (float(res.statistic), float(res.pvalue))
    accuracy = {}
    if validation is not None:
        for name, m in models.items():
            accuracy[name] = tm.evaluate(m, validation)
    from .config import dumps
    return ComparisonReport(summaries=summaries, traces=traces, rank_sum=rank_sum,
                            accuracy=accuracy, n_classes=n_classes, config_text=dumps(cfg))


# --------------------------------------------------------------------------- #
# emission


def report_rows(report: ComparisonReport):
    """One row per (policy, world, metric); terrain shares are metrics too."""
    metrics = list(REPORT_METRICS) + [f"pct_class_{c}" for c in range(report.n_classes)]
    rows = []
    for p in report.policies:
        for w in report.worlds:
            s = report.summaries[(p, w)]
            for m in metrics:
                v = s["terrain_pct"][int(m.rsplit("_", 1)[1])] if m.startswith("pct_") else s[m]
                rows.append((p, w, m, v))
    return rows


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.6f}"


def emit_report(report: ComparisonReport, out_dir, world_maps: dict | None = None):
    """Write ``report.csv``, ``accuracy.csv``, ``rank_sum.csv``,
    ``trajectories.csv``, ``terrain_pct.svg`` and one ``trajectories_<world>.svg``
    per world map given. Returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    path = os.path.join(out_dir, "report.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "world", "metric", "value"])
        for p, wn, m, v in report_rows(report):
            w.writerow([p, wn, m, _fmt(v)])
    paths.append(path)

    path = os.path.join(out_dir, "accuracy.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "bucket", "value"])
        for p, table in report.accuracy.items():
            w.writerow([p, "short", _fmt(table["short"])])
            w.writerow([p, "long", _fmt(table["long"])])
            for i, v in enumerate(table["per_step"], 1):
                w.writerow([p, f"step_{i}", _fmt(v)])
    paths.append(path)

    path = os.path.join(out_dir, "rank_sum.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["world", "comparison", "statistic", "p_value"])
        for wn, (stat, p) in report.rank_sum.items():
            w.writerow([wn, "fusion_vs_ground_only", _fmt(stat), f"{p:.6e}"])
    paths.append(path)

    path = os.path.join(out_dir, "trajectories.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "world", "episode", "step", "x", "y", "traversed_class",
                    "collided"])
        for (p, wn), traces in report.traces.items():
            for e, t in enumerate(traces):
                w.writerow([p, wn, e, -1, f"{t.start[0]:.6f}", f"{t.start[1]:.6f}", -1, 0])
                for i in range(len(t)):
                    w.writerow([p, wn, e, t.step[i], f"{t.x[i]:.6f}", f"{t.y[i]:.6f}",
                                t.traversed_class[i], int(t.collided[i])])
    paths.append(path)

    # drawn from the CSV just written so ``report`` regenerates it byte for byte
    svg = terrain_bar_svg_from_rows(read_report_csv(paths[0]))
    path = os.path.join(out_dir, "terrain_pct.svg")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg)
    paths.append(path)

    for wn, world in (world_maps or {}).items():
        path = os.path.join(out_dir, f"trajectories_{wn}.svg")
        traces = {p: report.traces[(p, wn)] for p in report.policies if (p, wn) in report.traces}
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(trajectory_svg(world, traces))
        paths.append(path)

    path = os.path.join(out_dir, "config.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.config_text)
    paths.append(path)
    return paths


BAR_COLORS = ["#1a9e1a", "#e0a000", "#d62020", "#404040"]


def read_report_csv(path):
    """Rows ``(policy, world, metric, value)`` of a written ``report.csv``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        head = next(reader, None)
        if head != ["policy", "world", "metric", "value"]:
            raise ValueError(f"{path}: not a report CSV")
        return [(p, w, m, float(v)) for p, w, m, v in reader]


def terrain_bar_svg(report: ComparisonReport) -> str:
    return terrain_bar_svg_from_rows(report_rows(report))


def terrain_bar_svg_from_rows(rows) -> str:
    """Stacked 100% bars of traversed terrain per (policy, world)."""
    pct, keys = {}, []
    for p, w, m, v in rows:
        if m.startswith("pct_class_"):
            if (p, w) not in pct:
                keys.append((p, w))
                pct[(p, w)] = {}
            pct[(p, w)][int(m.rsplit("_", 1)[1])] = float(v)
    keys.sort(key=lambda k: (k[1], POLICY_ORDER.index(k[0]) if k[0] in POLICY_ORDER else 99,
                             k[0]))
    n_classes = max((len(v) for v in pct.values()), default=4)
    colors = BAR_COLORS if n_classes == 4 else [BAR_COLORS[i] for i in (0, 2, 3)]
    bar_w, gap, height, left, top = 40, 20, 200, 50, 20
    width = left + len(keys) * (bar_w + gap) + 20
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 90}">',
           f'<rect x="0" y="0" width="{width}" height="{height + 90}" fill="white"/>']
    for i, key in enumerate(keys):
        x = left + i * (bar_w + gap)
        y = top + height
        for c in range(n_classes):
            h = height * pct[key].get(c, 0.0) / 100.0
            y -= h
            out.append(f'<rect x="{x}" y="{y:.3f}" width="{bar_w}" height="{h:.3f}" '
                       f'fill="{colors[c % len(colors)]}"/>')
        out.append(f'<text x="{x + bar_w / 2}" y="{top + height + 14}" font-size="9" '
                   f'text-anchor="middle">{key[0]}</text>')
        out.append(f'<text x="{x + bar_w / 2}" y="{top + height + 26}" font-size="9" '
                   f'text-anchor="middle">{key[1]}</text>')
    out.append(f'<text x="5" y="{top + 5}" font-size="10">100%</text>')
    out.append(f'<text x="5" y="{top + height}" font-size="10">0%</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _hex(rgb):
    r, g, b = (int(round(255 * min(max(c, 0.0), 1.0))) for c in rgb)
    return f"#{r:02x}{g:02x}{b:02x}"


def world_svg_cells(world: sim.WorldMap, scale: float):
    """Row-wise run-length rectangles of the top-down world raster."""
    img = sim.world_raster(world)[::-1]   # row 0 = south
    rows, cols = world.shape
    out = []
    height = rows * scale
    for r in range(rows):
        c = 0
        while c < cols:
            color = _hex(img[r, c])
            e = c + 1
            while e < cols and _hex(img[r, e]) == color:
                e += 1
            y = height - (r + 1) * scale
            out.append(f'<rect x="{c * scale:.2f}" y="{y:.2f}" width="{(e - c) * scale:.2f}" '
                       f'height="{scale:.2f}" fill="{color}"/>')
            c = e
    return out


def trajectory_svg(world: sim.WorldMap, traces: dict, scale: float = 4.0,
                   max_per_policy: int = 5) -> str:
    """World raster with colored trajectory segments: green on smooth
    terrain, red on rough terrain and collisions, amber in between."""
    rows, cols = world.shape
    px = scale / world.cell_size
    width, height = cols * scale, rows * scale
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}">']
    out.extend(world_svg_cells(world, scale))
    for policy, tr_list in traces.items():
        out.append(f'<g id="{policy}">')
        for t in tr_list[:max_per_policy]:
            xs = [t.start[0]] + list(t.x)
            ys = [t.start[1]] + list(t.y)
            for i in range(len(t)):
                color = segment_color(t.traversed_class[i], world.n_classes)
                out.append(f'<line x1="{xs[i] * px:.2f}" y1="{height - ys[i] * px:.2f}" '
                           f'x2="{xs[i + 1] * px:.2f}" y2="{height - ys[i + 1] * px:.2f}" '
                           f'stroke="{color}" stroke-width="1.5"/>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def return_identity_holds(trace: EpisodeTrace, stats: EpisodeStats, n_classes: int) -> bool:
    recomputed = float(sum(n_classes - 1 - c for c in trace.traversed_class))
    return recomputed == stats.ret and stats.ret <= stats.steps * (n_classes - 1) and \
        not math.isnan(stats.ret)
