"""``graspucb`` command-line harness.

Subcommands::

    gen-offline   render and label offline scenes
    pretrain      supervised offline training of the ensemble
    online        online actor-critic learning with UCB exploration
    eval          greedy evaluation of a checkpoint on fixed scenes
    ablate        sweep critic x uncertainty x K x seed and write a CSV table
    export-maps   write q_mean / v_epi / v_ale / v_all / q_ucb maps for one scene

Global flags ``--seed``, ``--out`` and ``--config`` come before the
subcommand. The config file holds ``key = value`` lines (``#`` starts a
comment) naming :class:`~graspucb.pipeline.PipelineConfig` fields plus
``uncertainty``, ``delta``, ``schedule``, ``horizon`` and ``ucb_on_std``.
Command-line flags override the file.

Exit codes:

    0  success
    1  unexpected error
    2  usage error (bad flags, bad config keys, mismatched checkpoint)
    3  missing input (dataset or checkpoint not found)
    4  output directory not writable
    5  the run itself failed (diverged, learner crashed)

While a command writes into ``--out`` a ``.partial`` marker sits in that
directory; it is removed only on success.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as E
from . import pipeline as P
from . import sim
from .actor import Schedule, UcbConfig, UncertaintyKind, ucb_map
from .maps import export_observation, export_prediction_maps

log = logging.getLogger("graspucb")

EXIT_OK, EXIT_UNEXPECTED, EXIT_USAGE, EXIT_MISSING, EXIT_UNWRITABLE, EXIT_RUN = 0, 1, 2, 3, 4, 5
DATASET_FORMAT = "graspucb-offline v1"
SAMPLE_CHANNELS = ("height", "normal_x", "normal_y", "normal_z", "intensity", "target_q", "alpha", "beta", "valid")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# helpers


def int_range(text: str) -> tuple[int, int]:
    """``"5..10"`` -> (5, 10); a single number means a fixed count."""
    lo, sep, hi = text.partition("..")
    try:
        out = (int(lo), int(hi if sep else lo))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or LO..HI, got {text!r}") from None
    if out[0] < 0 or out[0] > out[1]:
        raise argparse.ArgumentTypeError(f"bad range {text!r}")
    return out


def int_list(text: str) -> list[int]:
    """Comma-separated integers and ``LO..HI`` ranges."""
    out = []
    for part in filter(None, text.split(",")):
        lo, hi = int_range(part)
        out.extend(range(lo, hi + 1))
    return out


def str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def read_config_file(path: str | Path) -> dict[str, str]:
    try:
        return P.read_manifest(path)
    except FileNotFoundError:
        raise CliError(f"config file not found: {path}", EXIT_MISSING) from None


def base_config(args) -> P.PipelineConfig:
    cfg = P.PipelineConfig()
    if args.config:
        try:
            cfg = P.config_from_mapping(read_config_file(args.config), cfg)
        except (KeyError, ValueError) as exc:
            raise CliError(f"bad config file: {exc}", EXIT_USAGE) from None
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def prepare_out(path: str | Path) -> Path:
    """Create ``path``, prove it is writable and drop a ``.partial`` marker."""
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / ".partial").write_text("incomplete\n")
    except OSError as exc:
        raise CliError(f"cannot write to {out}: {exc}", EXIT_UNWRITABLE) from None
    return out


def finish_out(out: Path) -> None:
    (out / ".partial").unlink(missing_ok=True)


def load_checkpoint(path: str | Path) -> tuple[list[P.MemberParams], dict[str, str]]:
    try:
        return P.load_ensemble(path)
    except FileNotFoundError as exc:
        raise CliError(str(exc), EXIT_MISSING) from None


def config_for_checkpoint(cfg: P.PipelineConfig, manifest: dict[str, str], args) -> P.PipelineConfig:
    """The checkpoint fixes the critic family and head count; flags may only agree."""
    critic, heads = manifest.get("critic", cfg.critic), int(manifest.get("heads", cfg.heads))
    if getattr(args, "critic", None) and args.critic != critic:
        raise CliError(f"--critic {args.critic} but the checkpoint holds a {critic} critic", EXIT_USAGE)
    if critic == "qr" and getattr(args, "heads", None) and args.heads != heads:
        raise CliError(f"--heads {args.heads} but the checkpoint has {heads} quantile heads", EXIT_USAGE)
    return replace(cfg, critic=critic, heads=heads, kappa=float(manifest.get("kappa", cfg.kappa)),
                   patch=int(manifest.get("patch", cfg.patch)))


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --------------------------------------------------------------------------
# offline dataset files


def sample_array(sample: P.OfflineSample) -> np.ndarray:
    obs = sample.observation
    return np.dstack([obs.height, obs.normals, obs.intensity, sample.target_q, sample.target_action,
                      sample.valid_mask.astype(float)])


def sample_from_array(arr: np.ndarray, scene_seed: int) -> P.OfflineSample:
    if arr.ndim != 3 or arr.shape[2] != len(SAMPLE_CHANNELS):
        raise ValueError(f"sample array has shape {arr.shape}")
    obs = sim.Observation(arr[..., 0].copy(), arr[..., 1:4].copy(), arr[..., 4].copy())
    return P.OfflineSample(obs, arr[..., 5].copy(), arr[..., 6:8].copy(), arr[..., 8] > 0.5, scene_seed)


def write_dataset(out: Path, seed: int, n_scenes: int, objects: tuple[int, int], difficulty: str,
                  config: sim.SimConfig) -> list[str]:
    """One ``.npy`` per sample (channels in :data:`SAMPLE_CHANNELS` order) plus its scene file and a manifest."""
    lines = [f"format = {DATASET_FORMAT}", f"seed = {seed}", f"scenes = {n_scenes}",
             f"objects = {objects[0]}..{objects[1]}", f"difficulty = {difficulty}",
             f"channels = {','.join(SAMPLE_CHANNELS)}"]
    for i in range(n_scenes):
        s = P.derive_seed(seed, "offline-scene", i)
        scene = P.offline_scene(s, objects, difficulty, config)
        obs = sim.render(scene, config)
        q, a, valid = P.offline_labels(obs, scene.bin_mask, config.window)
        name = f"sample_{i:05d}"
        np.save(out / f"{name}.npy", sample_array(P.OfflineSample(obs, q, a, valid, s)))
        sim.save_scene(scene, out / f"{name}.scene.txt")
        lines.append(f"sample {name}.npy {sha256(out / f'{name}.npy')} {s}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return lines


def read_dataset(directory: str | Path) -> list[P.OfflineSample]:
    directory = Path(directory)
    manifest = directory / "manifest.txt"
    if not manifest.exists():
        raise CliError(f"no offline dataset at {directory}", EXIT_MISSING)
    samples = []
    for line in manifest.read_text().splitlines():
        if not line.startswith("sample "):
            continue
        _, name, digest, seed = line.split()
        path = directory / name
        if not path.exists():
            raise CliError(f"dataset file missing: {path}", EXIT_MISSING)
        if sha256(path) != digest:
            raise CliError(f"checksum mismatch for {path}", EXIT_USAGE)
        samples.append(sample_from_array(np.load(path), int(seed)))
    return samples


# --------------------------------------------------------------------------
# commands


def cmd_gen_offline(args) -> int:
    cfg = base_config(args)
    out = prepare_out(args.out)
    lines = write_dataset(out, cfg.seed, args.scenes, args.objects, args.difficulty, cfg.sim)
    finish_out(out)
    print(f"wrote {len(lines) - 6} samples to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = base_config(args)
    if args.critic:
        cfg = replace(cfg, critic=args.critic)
    if args.heads:
        cfg = replace(cfg, heads=args.heads)
    if args.data:
        dataset = read_dataset(args.data)
    else:
        dataset = P.build_offline_dataset(cfg.seed, args.scenes, config=cfg.sim)
    if not dataset:
        raise CliError("offline dataset is empty", EXIT_USAGE)
    out = prepare_out(args.out)
    try:
        members = P.pretrain(dataset, P.init_members(cfg), args.steps, cfg.batch, cfg.lr, cfg.make_critic(),
                             cfg.seed, cfg.patch)
    except FloatingPointError as exc:
        raise CliError(str(exc), EXIT_RUN) from None
    P.save_ensemble(members, out / "checkpoint", cfg, 0)
    (out / "config.toml").write_text(P.config_to_text(cfg))
    finish_out(out)
    print(f"pretrained {len(members)} members for {args.steps} steps -> {out / 'checkpoint'}")
    return EXIT_OK


def cmd_online(args) -> int:
    cfg = base_config(args)
    members, manifest = load_checkpoint(args.init)
    cfg = config_for_checkpoint(cfg, manifest, args)
    ucb = cfg.ucb
    if args.uncertainty:
        ucb = replace(ucb, uncertainty_kind=UncertaintyKind.parse(args.uncertainty))
    if args.schedule:
        ucb = replace(ucb, schedule=Schedule.parse(args.schedule))
    if args.delta is not None:
        ucb = replace(ucb, delta=args.delta)
    if args.steps is not None:
        cfg = replace(cfg, online_steps=args.steps)
    cfg = replace(cfg, ucb=replace(ucb, horizon=cfg.online_steps))
    out = prepare_out(args.out)
    runner = P.run_sync if args.sync else P.run_async
    result = runner(cfg, members, out)
    if result.failure:
        raise CliError(f"online run failed: {result.failure}", EXIT_RUN)
    P.save_ensemble(result.members, out / "final", cfg, result.update_steps)
    finish_out(out)
    print(f"{result.grasps} grasps, {result.update_steps} update steps "
          f"(ratio {result.ratio:.2f}), {len(result.checkpoints)} checkpoints -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = base_config(args)
    members, manifest = load_checkpoint(args.checkpoint)
    cfg = config_for_checkpoint(cfg, manifest, args)
    seeds = args.eval_seeds or E.eval_seeds(cfg.seed, args.extra)
    out = prepare_out(args.out)
    metrics = P.evaluate(members, cfg.make_critic(), cfg, seeds, args.objects, int(manifest.get("step", 0)))
    payload = metrics.to_dict() | {"eval_seeds": list(seeds), "checkpoint": str(args.checkpoint)}
    (out / "metrics.json").write_text(json.dumps(payload, indent=1) + "\n")
    finish_out(out)
    print(f"clearing {metrics.clearing_rate:.3f}  grasp success {metrics.grasp_success_rate:.3f}  "
          f"over {len(seeds)} scenes")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = base_config(args)
    if args.online_steps is not None:
        cfg = replace(cfg, online_steps=args.online_steps)
    grid = E.AblationGrid(tuple(args.seeds), tuple(args.critics), tuple(args.uncertainties), tuple(args.heads))
    for name in grid.uncertainties:
        E.exploration(name)  # fail fast on typos
    out = prepare_out(args.out)
    cells = E.run_ablation(grid, cfg, out, args.extra, args.offline_steps, args.offline_scenes, sync=not args.use_async)
    rows = E.table_rows(cells)
    E.write_table(rows, out / "ablation.csv")
    finish_out(out)
    failed = sum(c.error is not None for c in cells)
    print(f"{len(cells)} cells ({failed} failed) -> {out / 'ablation.csv'}")
    return EXIT_OK


def cmd_export_maps(args) -> int:
    cfg = base_config(args)
    members, manifest = load_checkpoint(args.checkpoint)
    cfg = config_for_checkpoint(cfg, manifest, args)
    out = prepare_out(args.out)
    scene = P.make_scene(args.scene_seed, args.objects, "mixed", cfg.sim)
    obs = sim.render(scene, cfg.sim)
    pred = P.predict_ensemble(members, cfg.make_critic(), obs, cfg.patch)
    ucb = UcbConfig(args.delta, UncertaintyKind.parse(args.uncertainty))
    export_prediction_maps(pred.stats, ucb_map(pred.q_mean, pred.stats, ucb, 0), out)
    export_observation(obs, out / "observation")
    sim.save_scene(scene, out / "scene.txt")
    finish_out(out)
    print(f"maps for scene {args.scene_seed} -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graspucb", description=__doc__.split("\n")[0])
    parser.add_argument("--seed", type=int, default=None, help="run seed (default: config file or 0)")
    parser.add_argument("--out", default="runs/out", help="output directory")
    parser.add_argument("--config", default=None, help="key = value config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-offline", help="render and label offline scenes")
    p.add_argument("--scenes", type=int, default=E.OFFLINE_SCENES)
    p.add_argument("--objects", type=int_range, default=(5, 10), help="objects per scene, e.g. 5..10")
    p.add_argument("--difficulty", choices=["easy", "mixed", "hard"], default="easy")
    p.set_defaults(func=cmd_gen_offline)

    p = sub.add_parser("pretrain", help="offline supervised training")
    p.add_argument("--data", default=None, help="dataset directory from gen-offline (default: generate in memory)")
    p.add_argument("--scenes", type=int, default=E.OFFLINE_SCENES, help="scenes to generate when --data is absent")
    p.add_argument("--steps", type=int, default=E.OFFLINE_STEPS)
    p.add_argument("--critic", choices=["mv", "qr"], default=None)
    p.add_argument("--heads", type=int, default=None, help="quantile heads for --critic qr")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("online", help="online learning from a pretrained checkpoint")
    p.add_argument("--init", required=True, help="checkpoint directory to start from")
    p.add_argument("--sync", action="store_true", help="deterministic single-threaded schedule")
    p.add_argument("--critic", choices=["mv", "qr"], default=None, help="must match the checkpoint")
    p.add_argument("--heads", type=int, default=None, help="must match the checkpoint")
    p.add_argument("--uncertainty", choices=["none", "ale", "epi", "all", "aleatoric", "epistemic", "total"])
    p.add_argument("--schedule", choices=["fixed", "cosine", "cosine_adaptive"])
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--steps", type=int, default=None, help="online training steps (default 3000)")
    p.set_defaults(func=cmd_online)

    p = sub.add_parser("eval", help="greedy evaluation on fixed scenes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--eval-seeds", type=int_list, default=None, help="scene seeds, e.g. 1001,1002 or 1..5")
    p.add_argument("--extra", type=int, default=0, help="extra scenes beyond the two fixed ones")
    p.add_argument("--objects", type=int, default=17)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="benchmark sweep to a CSV table")
    p.add_argument("--seeds", type=int_list, default=list(range(1, 11)))
    p.add_argument("--critics", type=str_list, default=["mv", "qr"])
    p.add_argument("--uncertainties", type=str_list, default=list(E.EXPLORATION))
    p.add_argument("--heads", type=int_list, default=[10, 20, 100])
    p.add_argument("--offline-steps", type=int, default=E.OFFLINE_STEPS)
    p.add_argument("--offline-scenes", type=int, default=E.OFFLINE_SCENES)
    p.add_argument("--online-steps", type=int, default=None)
    p.add_argument("--extra", type=int, default=4, help="extra evaluation scenes per seed")
    p.add_argument("--async", dest="use_async", action="store_true", help="threaded runs instead of --sync")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-maps", help="prediction and uncertainty maps for one scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene-seed", type=int, default=E.DEFAULT_EVAL_SEEDS[0])
    p.add_argument("--objects", type=int, default=17)
    p.add_argument("--uncertainty", default="epi")
    p.add_argument("--delta", type=float, default=1.0)
    p.set_defaults(func=cmd_export_maps)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"graspucb: error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"graspucb: unexpected error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
