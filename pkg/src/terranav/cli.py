"""Command line pipeline: gen-world, collect, label, train, drive, eval, report.

Every subcommand writes one primary artifact plus ``<artifact>.manifest``,
a text file echoing the resolved config, the seed, and the SHA-256 of every
input and of the output. Set ``TERRANAV_THREADS`` to cap BLAS threads.

Exit codes: 0 success, 1 usage or config error, 2 missing or corrupt data.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

THREAD_ENV = "TERRANAV_THREADS"
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
MANIFEST_MAGIC = "terranav-manifest 1"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def manifest_path(path) -> str:
    return f"{path}.manifest"


def write_manifest(out, command, config, seed, inputs: dict, extra: dict | None = None):
    from .config import dumps
    from . import __version__
    lines = [MANIFEST_MAGIC, f"command = {command}", f"version = {__version__}",
             f"seed = {seed}", f"output = {os.path.basename(out)}",
             f"output_sha256 = {sha256_file(out)}"]
    for name, path in inputs.items():
        lines.append(f"input.{name} = {os.path.basename(path)}")
        lines.append(f"input.{name}.sha256 = {sha256_file(path)}")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    lines.append("")
    lines.append("# resolved config")
    text = "\n".join(lines) + "\n" + dumps(config)
    with open(manifest_path(out), "w", encoding="utf-8") as fh:
        fh.write(text)


def read_manifest(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MANIFEST_MAGIC:
        raise DataError(f"{path}: not a manifest")
    out = {}
    for line in lines[1:]:
        if line.startswith("#"):
            break
        if " = " in line:
            k, v = line.split(" = ", 1)
            out[k] = v
    return out


def check_input(path, what):
    """Existence check plus a provenance warning when the sidecar manifest's
    recorded hash no longer matches the file."""
    if not path or not os.path.isfile(path):
        raise DataError(f"missing {what}: {path}")
    side = manifest_path(path)
    if os.path.isfile(side):
        try:
            recorded = read_manifest(side).get("output_sha256")
        except (DataError, OSError, UnicodeDecodeError):
            recorded = None
        if recorded and recorded != sha256_file(path):
            print(f"warning: {path} does not match the hash in {side} (provenance break)",
                  file=sys.stderr)
    return path


# --------------------------------------------------------------------------- #
# config resolution


def resolve_config(args):
    from . import config as cfgmod
    try:
        base = cfgmod.get_profile(args.profile) if args.profile else None
        if args.config:
            if not os.path.isfile(args.config):
                raise UsageError(f"config file not found: {args.config}")
            with open(args.config, encoding="utf-8") as fh:
                cfg = cfgmod.loads(fh.read(), base)
        else:
            cfg = base or cfgmod.desk_profile()
        entries: dict = {}
        for item in args.set or []:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise UsageError(f"--set expects section.key=value, got {item!r}")
            key, value = item.split("=", 1)
            section, name = key.strip().split(".", 1)
            entries.setdefault(section, {})[name] = value
        if entries:
            cfg = cfgmod.apply_overrides(cfg, entries)
    except cfgmod.ConfigError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def _seed(args, default):
    return default if args.seed is None else args.seed


# --------------------------------------------------------------------------- #
# subcommands


def cmd_gen_world(args, cfg):
    from . import sim
    wcfg = cfg.world if args.which == "train" else cfg.test_world
    seed = _seed(args, cfg.seeds.train_world if args.which == "train" else cfg.seeds.test_world)
    try:
        world = sim.generate_world(wcfg, seed)
    except (ValueError, RuntimeError) as exc:
        raise DataError(f"world generation failed: {exc}") from None
    sim.save_world(world, args.out)
    write_manifest(args.out, "gen-world", cfg, seed, {}, {"which": args.which})


def _load_world(path):
    from . import sim
    check_input(path, "world file")
    try:
        return sim.load_world(path)
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_dataset(path):
    from . import collect
    check_input(path, "dataset")
    try:
        return collect.load_dataset(path)
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(f"{path}: {exc}") from None


def _load_checkpoint(path):
    from . import model as tm
    check_input(path, "checkpoint")
    try:
        return tm.load_checkpoint(path)
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_collect(args, cfg):
    from dataclasses import replace
    from . import collect
    world = _load_world(args.world)
    seed = _seed(args, cfg.seeds.collect)
    n = cfg.collect.episodes if args.episodes is None else args.episodes
    max_steps = cfg.collect.max_steps if args.steps is None else args.steps
    ccfg = replace(cfg.collect, max_steps=max_steps)
    records = collect.collect_corpus(world, cfg.sim, cfg.camera, cfg.imu, cfg.explore, ccfg,
                                     seed=seed, n_episodes=n)
    ds = collect.build_dataset(records, cfg.arch.history, cfg.arch.horizon,
                               cfg.collect.sample_mode, cfg.collect.sample_distance,
                               manifest={"stage": "collect", "seed": seed, "episodes": n,
                                         "world_sha256": sha256_file(args.world)})
    collect.save_dataset(ds, args.out)
    write_manifest(args.out, "collect", cfg, seed, {"world": args.world},
                   {"records": len(records), "samples": len(ds)})


def cmd_label(args, cfg):
    import numpy as np
    from . import collect, labeling
    ds = _load_dataset(args.data)
    seed = _seed(args, cfg.seeds.label)
    lc = cfg.labeling
    labeler = labeling.VibrationLabeler(
        n_classes=cfg.arch.n_classes, sample_rate=cfg.imu.rate, n_bins=lc.n_bins,
        max_freq=lc.max_freq, restarts=lc.restarts, max_iter=lc.max_iter,
        obstacle_threshold=lc.obstacle_threshold, random_state=seed)
    rec = ds.records.copy()
    try:
        rec["label"] = labeler.fit_predict(rec["vibration"], rec["min_range"])
    except ValueError as exc:
        raise DataError(f"{args.data}: labeling failed: {exc}") from None
    cm = labeler.cluster_model_
    agreement = float(np.mean(rec["label"] == rec["true_class"])) if len(rec) else float("nan")
    manifest = dict(ds.manifest)
    manifest.update({
        "stage": "label", "label_seed": seed,
        "source_sha256": sha256_file(args.data),
        "cluster.k": cm.k,
        "cluster.cluster_to_class": " ".join(str(int(c)) for c in cm.cluster_to_class),
        "cluster.mean_rms": " ".join(repr(float(v)) for v in cm.mean_rms),
        "cluster.inertia": repr(cm.inertia),
        "label_agreement": f"{agreement:.6f}",
    })
    for j, row in enumerate(cm.centroids):
        manifest[f"cluster.centroid.{j}"] = " ".join(repr(float(v)) for v in row)
    out = collect.Dataset(rec, ds.frames, ds.future, manifest)
    collect.save_dataset(out, args.out)
    write_manifest(args.out, "label", cfg, seed, {"data": args.data},
                   {"label_agreement": f"{agreement:.6f}"})


def cmd_train(args, cfg):
    from dataclasses import replace
    from . import collect, model as tm
    ds = _load_dataset(args.data)
    if len(ds) == 0 or (ds.records["label"] < 0).any():
        raise DataError(f"{args.data}: dataset is empty or unlabeled; run 'label' first")
    arch = cfg.arch if args.mode is None else replace(cfg.arch, mode=args.mode)
    arch = replace(arch, ground_shape=tuple(ds.ground_shape), aerial_shape=tuple(ds.aerial_shape),
                   history=ds.history, horizon=ds.horizon)
    tcfg = cfg.train if args.steps is None else replace(cfg.train, steps=args.steps)
    seed = _seed(args, cfg.seeds.train)
    try:
        tm.validate_arch(arch)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    train_set, val_set = collect.split_dataset(ds, cfg.collect.train_fraction, seed)
    model = tm.init_model(arch, seed)
    model, log = tm.train(model, train_set, val_set, tcfg, seed=seed)
    meta = {"mode": arch.mode, "seed": seed, "steps": tcfg.steps,
            "data_sha256": sha256_file(args.data)}
    tm.save_checkpoint(model, args.out, meta)
    extra = {"mode": arch.mode}
    for i, s in enumerate(log.steps):
        extra[f"log.{s}"] = (f"train_loss={log.train_loss[i]:.6f} val_ce={log.val_loss[i]:.6f} "
                             f"short={log.val_short[i]:.6f} long={log.val_long[i]:.6f}"
                             if log.val_loss else f"train_loss={log.train_loss[i]:.6f}")
    write_manifest(args.out, "train", replace(cfg, arch=arch, train=tcfg), seed,
                   {"data": args.data}, extra)


def cmd_drive(args, cfg):
    from . import evaluation, planner
    world = _load_world(args.world)
    model, _ = _load_checkpoint(args.checkpoint)
    seed = _seed(args, cfg.seeds.eval)
    steps = cfg.eval.max_steps if args.steps is None else args.steps
    policy = planner.ModelPolicy(model, cfg.planner, cfg.explore, cfg.sim.dt)
    _, traces = evaluation.run_policy_battery(
        world, policy, 1, cfg.sim, cfg.camera, steps, seed, cfg.collect.spawn_clearance,
        (0,) if cfg.eval.spawn_smooth_only else None)
    planner.write_trace_csv(traces[0], args.out)
    svg = os.path.splitext(args.out)[0] + ".svg"
    with open(svg, "w", encoding="utf-8") as fh:
        fh.write(evaluation.trajectory_svg(world, {model.arch.mode: traces}))
    write_manifest(args.out, "drive", cfg, seed,
                   {"world": args.world, "checkpoint": args.checkpoint},
                   {"svg": os.path.basename(svg), "svg_sha256": sha256_file(svg)})


def _parse_models(items):
    models = {}
    for item in items or []:
        if "=" not in item:
            raise UsageError(f"--model expects name=path, got {item!r}")
        name, path = item.split("=", 1)
        models[name] = path
    if not models:
        raise UsageError("eval needs at least one --model name=path")
    return models


def cmd_eval(args, cfg):
    from dataclasses import replace
    from . import collect, evaluation
    paths = _parse_models(args.model)
    models = {name: _load_checkpoint(p)[0] for name, p in paths.items()}
    worlds, world_paths = {}, {}
    for item in args.world:
        name, path = item.split("=", 1) if "=" in item else ("test", item)
        worlds[name] = _load_world(path)
        world_paths[f"world.{name}"] = path
    seed = _seed(args, cfg.seeds.eval)
    n = cfg.eval.episodes if args.episodes is None else args.episodes
    steps = cfg.eval.max_steps if args.steps is None else args.steps
    cfg = replace(cfg, eval=replace(cfg.eval, episodes=n, max_steps=steps))
    validation = None
    inputs = dict(world_paths)
    inputs.update({f"model.{k}": v for k, v in paths.items()})
    if args.data:
        ds = _load_dataset(args.data)
        _, validation = collect.split_dataset(ds, cfg.collect.train_fraction, cfg.seeds.train)
        inputs["data"] = args.data
    try:
        report = evaluation.compare_policies(models, worlds, n, cfg, seed,
                                             include_random=not args.no_random,
                                             validation=validation)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    evaluation.emit_report(report, args.out, worlds)
    primary = os.path.join(args.out, "report.csv")
    extra = {}
    for w, (stat, p) in report.rank_sum.items():
        extra[f"rank_sum.{w}"] = f"U={stat:.1f} p={p:.6e}"
    for name in sorted(os.listdir(args.out)):
        full = os.path.join(args.out, name)
        if name != "report.csv" and not name.endswith(".manifest") and os.path.isfile(full):
            extra[f"file.{name}.sha256"] = sha256_file(full)
    write_manifest(primary, "eval", cfg, seed, inputs, extra)


def cmd_report(args, cfg):
    from . import evaluation
    check_input(args.csv, "report CSV")
    try:
        rows = evaluation.read_report_csv(args.csv)
    except (ValueError, OSError) as exc:
        raise DataError(f"{args.csv}: {exc}") from None
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(evaluation.terrain_bar_svg_from_rows(rows))
    write_manifest(args.out, "report", cfg, _seed(args, 0), {"csv": args.csv})


COMMANDS = {
    "gen-world": cmd_gen_world, "collect": cmd_collect, "label": cmd_label,
    "train": cmd_train, "drive": cmd_drive, "eval": cmd_eval, "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (key = value lines, [section] headers)")
    common.add_argument("--profile", choices=["desk", "paper", "real"], default=None)
    common.add_argument("--seed", type=int, default=None, help="override the stage seed")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a single config value (repeatable)")
    common.add_argument("--out", required=True, help="output path")

    p = _Parser(prog="terranav", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-world", parents=[common], help="generate a world file")
    s.add_argument("--which", choices=["train", "test"], default="train")

    s = sub.add_parser("collect", parents=[common], help="run the exploration policy")
    s.add_argument("--world", required=True)
    s.add_argument("--episodes", type=int)
    s.add_argument("--steps", type=int, help="max steps per episode")

    s = sub.add_parser("label", parents=[common], help="cluster vibration into terrain labels")
    s.add_argument("--data", required=True)

    s = sub.add_parser("train", parents=[common], help="train a terrain network")
    s.add_argument("--data", required=True)
    s.add_argument("--mode", choices=["fusion", "ground_only", "air_only"])
    s.add_argument("--steps", type=int, help="optimizer steps")

    s = sub.add_parser("drive", parents=[common], help="one closed-loop episode to CSV + SVG")
    s.add_argument("--world", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--steps", type=int)

    s = sub.add_parser("eval", parents=[common], help="policy battery and report directory")
    s.add_argument("--world", action="append", required=True, metavar="[NAME=]PATH")
    s.add_argument("--model", action="append", metavar="NAME=PATH")
    s.add_argument("--data", help="labeled dataset for horizon accuracy on its validation split")
    s.add_argument("--episodes", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--no-random", action="store_true", help="skip the random baseline")

    s = sub.add_parser("report", parents=[common], help="redraw the terrain chart from a CSV")
    s.add_argument("--csv", required=True)
    return p


def configure_threads(environ=os.environ):
    n = environ.get(THREAD_ENV)
    if n:
        if not n.isdigit() or int(n) < 1:
            raise UsageError(f"{THREAD_ENV} must be a positive integer, got {n!r}")
        for var in _THREAD_VARS:
            environ[var] = n


def main(argv=None) -> int:
    try:
        configure_threads()
        try:
            args = build_parser().parse_args(argv)
        except SystemExit as exc:     # argparse usage errors and --help
            return exc.code if isinstance(exc.code, int) else EXIT_USAGE
        for v in ("episodes", "steps"):
            if getattr(args, v, None) is not None and getattr(args, v) < 1:
                raise UsageError(f"--{v} must be >= 1")
        cfg = resolve_config(args)
        out_dir = os.path.dirname(os.path.abspath(args.out))
        os.makedirs(out_dir, exist_ok=True)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"terranav: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"terranav: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
