"""Experiment drivers shared by the CLI and the acceptance suite.

The benchmark pretrains one ensemble per (seed, critic family), then runs
each online configuration from that same starting point and evaluates every
result on the same fixed scenes. Pretrained ensembles are cached on disk so
sweeps over exploration settings do not repeat offline training.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import pipeline as P
from . import sim
from .actor import Schedule, UcbConfig, UncertaintyKind
from .critic_mv import MvCritic
from .net import extract_patches

log = logging.getLogger(__name__)

DEFAULT_EVAL_SEEDS = (1001, 1002)
OFFLINE_STEPS = 4000
OFFLINE_SCENES = 300

EXPLORATION = {
    "none": UcbConfig(0.0, UncertaintyKind.NONE),
    "ale": UcbConfig(1.0, UncertaintyKind.ALEATORIC),
    "epi": UcbConfig(1.0, UncertaintyKind.EPISTEMIC),
    "all": UcbConfig(1.0, UncertaintyKind.TOTAL),
    "epi-adaptive": UcbConfig(1.0, UncertaintyKind.EPISTEMIC, Schedule.COSINE_ADAPTIVE),
}


def exploration(name: str, horizon: int = 3000) -> UcbConfig:
    try:
        ucb = EXPLORATION[name]
    except KeyError:
        raise KeyError(f"unknown exploration setting {name!r}; choose from {sorted(EXPLORATION)}") from None
    return replace(ucb, horizon=horizon)


def eval_seeds(seed: int, extra: int = 0) -> list[int]:
    """The fixed evaluation scenes plus ``extra`` more derived from the run seed."""
    return list(DEFAULT_EVAL_SEEDS) + [P.derive_seed(seed, "eval-scene", i) for i in range(extra)]


def pretrained_ensemble(cfg: P.PipelineConfig, cache: str | Path | None = None, steps: int = OFFLINE_STEPS,
                        scenes: int = OFFLINE_SCENES) -> list[P.MemberParams]:
    """Offline-trained members for ``cfg``, loaded from ``cache`` when present."""
    key = f"seed{cfg.seed}_{cfg.critic}{cfg.heads if cfg.critic == 'qr' else ''}_n{cfg.n_members}_s{steps}_d{scenes}"
    path = Path(cache) / key if cache else None
    if path is not None and (path / "manifest.txt").exists():
        return P.load_ensemble(path)[0]
    dataset = P.build_offline_dataset(cfg.seed, scenes, config=cfg.sim)
    members = P.pretrain(dataset, P.init_members(cfg), steps, cfg.batch, cfg.lr, cfg.make_critic(), cfg.seed,
                         cfg.patch)
    if path is not None:
        P.save_ensemble(members, path, cfg)
    return members


@dataclass
class BenchmarkCell:
    name: str
    seed: int
    critic: str
    heads: int
    uncertainty: str
    final: P.RunMetrics | None = None
    checkpoints: dict[int, P.RunMetrics] = field(default_factory=dict)
    run: P.RunResult | None = None
    error: str | None = None
    seconds: float = 0.0


def run_cell(cfg: P.PipelineConfig, members: Sequence[P.MemberParams], name: str, seeds: Sequence[int],
             sync: bool = True, checkpoint_evals: bool = False, out_dir: str | Path | None = None,
             n_objects: int = 17) -> BenchmarkCell:
    """One online run from ``members`` followed by greedy evaluation."""
    cell = BenchmarkCell(name, cfg.seed, cfg.critic, cfg.heads, name)
    start = time.perf_counter()
    try:
        runner = P.run_sync if sync else P.run_async
        cell.run = runner(cfg, members, out_dir)
        if cell.run.failure:
            raise RuntimeError(cell.run.failure)
        critic = cfg.make_critic()
        cell.final = P.evaluate(cell.run.members, critic, cfg, seeds, n_objects, cell.run.update_steps)
        if checkpoint_evals:
            for step, ms in sorted(cell.run.checkpoints.items()):
                cell.checkpoints[step] = (cell.final if step == cell.run.update_steps
                                          else P.evaluate(ms, critic, cfg, seeds, n_objects, step))
    except Exception as exc:  # noqa: BLE001 - a failed cell is recorded, the sweep goes on
        log.exception("cell %s seed %d failed", name, cfg.seed)
        cell.error = f"{type(exc).__name__}: {exc}"
    cell.seconds = time.perf_counter() - start
    return cell


# --------------------------------------------------------------------------
# ablation table


TABLE_FIELDS = ["row", "critic", "heads", "uncertainty", "seed", "n", "grasp_success_mean", "grasp_success_std",
                "clearing_mean", "clearing_std", "status"]


def table_rows(cells: Iterable[BenchmarkCell]) -> list[dict]:
    """Per-seed rows followed by one aggregate (mean, population std) row per configuration."""
    cells = list(cells)
    rows, groups = [], {}
    for c in cells:
        ok = c.final is not None and c.error is None
        rows.append({
            "row": "seed", "critic": c.critic, "heads": c.heads if c.critic == "qr" else "", "uncertainty": c.uncertainty,
            "seed": c.seed, "n": 1,
            "grasp_success_mean": c.final.grasp_success_rate if ok else "", "grasp_success_std": 0.0 if ok else "",
            "clearing_mean": c.final.clearing_rate if ok else "", "clearing_std": 0.0 if ok else "",
            "status": "ok" if ok else f"failed: {c.error}",
        })
        groups.setdefault((c.critic, rows[-1]["heads"], c.uncertainty), []).append(c)
    for (critic, heads, unc), members in groups.items():
        good = [c.final for c in members if c.final is not None and c.error is None]
        success = np.array([m.grasp_success_rate for m in good])
        clearing = np.array([m.clearing_rate for m in good])
        rows.append({
            "row": "aggregate", "critic": critic, "heads": heads, "uncertainty": unc, "seed": "", "n": len(good),
            "grasp_success_mean": float(success.mean()) if len(good) else "",
            "grasp_success_std": float(success.std()) if len(good) else "",
            "clearing_mean": float(clearing.mean()) if len(good) else "",
            "clearing_std": float(clearing.std()) if len(good) else "",
            "status": "ok" if len(good) == len(members) else f"{len(members) - len(good)} failed",
        })
    return rows


def write_table(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TABLE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)


def read_table(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@dataclass(frozen=True)
class AblationGrid:
    seeds: tuple[int, ...] = tuple(range(1, 11))
    critics: tuple[str, ...] = ("mv", "qr")
    uncertainties: tuple[str, ...] = ("none", "ale", "epi", "all", "epi-adaptive")
    heads: tuple[int, ...] = (10, 20, 100)

    def configs(self) -> list[tuple[str, int, str]]:
        """(critic, heads, uncertainty) triples; the K sweep only applies to QR."""
        out = []
        for critic in self.critics:
            for k in (self.heads if critic == "qr" else (0,)):
                for unc in self.uncertainties:
                    out.append((critic, k, unc))
        return out


def run_ablation(grid: AblationGrid, base: P.PipelineConfig, out_dir: str | Path, eval_extra: int = 0,
                 offline_steps: int = OFFLINE_STEPS, offline_scenes: int = OFFLINE_SCENES,
                 sync: bool = True) -> list[BenchmarkCell]:
    out_dir = Path(out_dir)
    cache = out_dir / "pretrained"
    cells = []
    for seed in grid.seeds:
        for critic, k, unc in grid.configs():
            cfg = replace(base, seed=seed, critic=critic, heads=k or base.heads,
                          ucb=exploration(unc, base.online_steps))
            try:
                members = pretrained_ensemble(cfg, cache, offline_steps, offline_scenes)
            except Exception as exc:  # noqa: BLE001
                cells.append(BenchmarkCell(unc, seed, critic, cfg.heads, unc, error=f"pretrain: {exc}"))
                continue
            cell = run_cell(cfg, members, unc, eval_seeds(seed, eval_extra), sync=sync)
            log.info("%s K=%s %s seed %d: %s (%.0fs)", critic, cfg.heads, unc, seed,
                     cell.final.clearing_rate if cell.final else cell.error, cell.seconds)
            cells.append(cell)
            write_table(table_rows(cells), out_dir / "ablation.csv")
    return cells


# --------------------------------------------------------------------------
# uncertainty evolution (epistemic shrinks with data, aleatoric does not)


@dataclass
class UncertaintySnapshot:
    samples: int
    v_epi_deterministic: float
    v_ale_noisy: float
    v_epi_noisy: float
    q_deterministic: float
    q_noisy: float


def evolution_scene(seed: int = 0) -> tuple[sim.Scene, list[tuple[int, int]], list[tuple[int, int]]]:
    """A bin with a certain box (p = 1), a coin-flip box (p = 0.5) and empty floor (p = 0).

    Returns the scene, the deterministic-outcome pixels (box A top and floor)
    and the injected-noise pixels (box B top). Flat opaque tops grasped
    straight down have flatness and alignment exactly 1, so p equals the
    object's base graspability.
    """
    # different heights so the two tops are distinguishable from their patches alone
    certain = sim.ObjectSpec(0, sim.Shape.BOX, (20.0, 20.0, 0.0), (12.0, 12.0, 5.0), sim.Material.OPAQUE, 1.0)
    coin = sim.ObjectSpec(1, sim.Shape.BOX, (44.0, 44.0, 0.0), (12.0, 12.0, 2.0), sim.Material.OPAQUE, 0.5)
    scene = sim.Scene((64, 64), (certain, coin), seed)
    tops_a = [(r, c) for r in range(18, 23) for c in range(18, 23)]
    floor = [(r, c) for r in range(50, 55) for c in range(8, 13)]
    tops_b = [(r, c) for r in range(42, 47) for c in range(42, 47)]
    return scene, tops_a + floor, tops_b


def uncertainty_evolution(cfg: P.PipelineConfig, checkpoints: Sequence[int] = (50, 2000),
                          record_every: int | None = None) -> list[UncertaintySnapshot]:
    """Grow a replay buffer one grasp at a time and track the MV ensemble's uncertainty.

    Grasps are drawn uniformly from the designated pixels of
    :func:`evolution_scene` with a straight-down action, each outcome from a
    fresh Bernoulli counter; after every grasp the learners take
    ``updates_per_grasp`` round-robin updates exactly as in the online loop.
    Members start from independent initialisations.
    """
    if cfg.critic != "mv":
        raise ValueError("the aleatoric head needs the mean-variance critic")
    scene, deterministic, noisy = evolution_scene(cfg.seed)
    obs = sim.render(scene, cfg.sim)
    patches = extract_patches(obs, cfg.patch)
    width = obs.shape[1]
    pixels = deterministic + noisy
    critic = MvCritic()
    states = [P.MemberState.fresh(j, m) for j, m in enumerate(P.init_members(cfg))]
    replay = P.ReplayBuffer(cfg.replay_capacity)
    pick = P.stream(cfg.seed, "evolution-pick")
    marks = set(checkpoints)
    if record_every:
        marks |= set(range(record_every, max(checkpoints) + 1, record_every))
    out = []
    steps = 0
    zero = np.zeros(obs.shape + (2,))
    det_idx = tuple(np.array(deterministic).T)
    noisy_idx = tuple(np.array(noisy).T)
    for n in range(1, max(checkpoints) + 1):
        r, c = pixels[int(pick.integers(len(pixels)))]
        outcome, _ = sim.execute_grasp(scene, sim.GraspAction(r, c), n, cfg.sim)
        replay.append(P.Transition(obs, (r, c), (0.0, 0.0), outcome.reward, steps, 0, patches[r * width + c]))
        for _ in range(cfg.updates_per_grasp):
            j = steps % len(states)
            states[j] = P.learner_update(states[j], replay, critic, cfg, P.stream(cfg.seed, "learner", j, states[j].steps))
            steps += 1
        if n in marks:
            maps = [critic.member_maps(s.params.critic, patches, zero) for s in states]
            st = critic.ensemble_stats(maps)
            out.append(UncertaintySnapshot(n, float(st.v_epi[det_idx].mean()), float(st.v_ale[noisy_idx].mean()),
                                           float(st.v_epi[noisy_idx].mean()), float(st.q_mean[det_idx].mean()),
                                           float(st.q_mean[noisy_idx].mean())))
    return out


# --------------------------------------------------------------------------
# summaries


def mean_clearing(cells: Iterable[BenchmarkCell]) -> float:
    vals = [c.final.clearing_rate for c in cells if c.final is not None]
    return float(np.mean(vals)) if vals else math.nan


# --------------------------------------------------------------------------
# distributional convergence on a single noisy input


@dataclass
class ConvergenceResult:
    steps: int
    quantiles: np.ndarray | None  # (K,) for the quantile critic
    taus: np.ndarray | None
    q: float
    variance: float


def bernoulli_convergence(critic, p: float = 0.7, steps: int = 10_000, seed: int = 0, batch: int = 12,
                          lr: float = 1e-4, patch: int = 5, hidden: tuple[int, ...] = (64, 64)) -> ConvergenceResult:
    """Train one critic on a fixed input whose reward is Bernoulli(``p``).

    For the quantile critic ``variance`` is the spread of the learned curve;
    for the mean-variance critic it is the predicted aleatoric variance.
    """
    from .critic_mv import mv_heads
    from .net import AdamState, adam_step, forward, init_params

    rng = P.stream(seed, "bernoulli")
    width = patch * patch * 5 + 2
    params = init_params(seed, (width, *hidden, critic.head_count))
    opt = AdamState.zeros(params)
    x = np.repeat(rng.normal(size=(1, width)), batch, axis=0)
    for _ in range(steps):
        y = (rng.random(batch) < p).astype(np.float64)
        g = critic.loss_and_grad(params, x, y)
        params, opt = adam_step(params, g, lr, opt)
    raw = forward(params, x[:1])
    if critic.kind == "qr":
        from .critic_mv import sigmoid

        z = sigmoid(raw[0])
        return ConvergenceResult(steps, z, critic.taus, float(z.mean()), float(z.var()))
    q, log_var = mv_heads(raw)
    return ConvergenceResult(steps, None, None, float(q[0]), float(np.exp(log_var[0])))
