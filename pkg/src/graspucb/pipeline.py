"""Offline pretraining and the online actor/learner loop.

Online learning alternates between one acting loop, which renders the bin,
scores every pixel with the ensemble and executes a grasp, and N learner
workers, which update their own ensemble member on transitions drawn from a
shared replay buffer. A pacing controller holds the ratio at six
ensemble-wide update steps per collected grasp; learners publish to a
parameter buffer every ten of their own steps, and the acting loop reads the
newest snapshot before each grasp.

``run_sync`` executes the same schedule single-threaded (one grasp, then six
updates) and is bit-reproducible per seed. ``run_async`` uses threads.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import sim
from .actor import (ACTOR_HEADS, DEFAULT_ENTROPY_COEFF, GREEDY, ActionMaps, UcbConfig, actor_gradient,
                    actor_heads, actor_predict, actor_regression_gradient, delta_schedule, ensemble_action_mean,
                    select_pixel, ucb_map)
from .critic_mv import MvCritic, critic_input
from .critic_qr import DEFAULT_KAPPA, QrCritic
from .net import (CHANNELS, DEFAULT_HIDDEN, DEFAULT_PATCH, AdamState, MlpParams, adam_step, extract_patches,
                  forward, init_params, load_params, save_params)
from .rng import derive_seed, stream

log = logging.getLogger(__name__)

FLOOR_THRESHOLD = 0.5  # eps_h, cells
LABEL_COEFF = 20.0  # c_q


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    n_members: int = 3
    critic: str = "mv"
    heads: int = 20
    kappa: float = DEFAULT_KAPPA
    patch: int = DEFAULT_PATCH
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    lr: float = 1e-4
    batch: int = 12
    entropy_coeff: float = DEFAULT_ENTROPY_COEFF
    actor_anchor: float = 1.0
    updates_per_grasp: int = 6
    publish_every: int = 10
    replay_capacity: int = 5000
    online_steps: int = 3000
    checkpoint_every: int = 500
    max_attempts: int = 25
    online_objects: tuple[int, int] = (10, 17)
    online_difficulty: str = "mixed"
    no_repeat: int = 3
    ucb: UcbConfig = field(default_factory=UcbConfig)
    sim: sim.SimConfig = sim.DEFAULT_CONFIG

    @property
    def feature_width(self) -> int:
        return self.patch * self.patch * CHANNELS

    def make_critic(self):
        if self.critic == "mv":
            return MvCritic()
        if self.critic == "qr":
            return QrCritic(self.heads, self.kappa)
        raise ValueError(f"unknown critic kind {self.critic!r}")

    @property
    def grasp_budget(self) -> int:
        return math.ceil(self.online_steps / self.updates_per_grasp)


# --------------------------------------------------------------------------
# ensemble members


@dataclass(frozen=True, eq=False)
class MemberParams:
    actor: MlpParams
    critic: MlpParams

    def checksum(self) -> str:
        return self.actor.checksum() + self.critic.checksum()


@dataclass(frozen=True, eq=False)
class MemberState:
    """One learner's private state: parameters, optimiser moments, step count."""

    index: int
    params: MemberParams
    actor_opt: AdamState
    critic_opt: AdamState
    steps: int = 0
    prior: MlpParams | None = None  # actor at the start of online learning

    @classmethod
    def fresh(cls, index: int, params: MemberParams) -> "MemberState":
        return cls(index, params, AdamState.zeros(params.actor), AdamState.zeros(params.critic), 0, params.actor)

    def advance(self, params: MemberParams, actor_opt: AdamState, critic_opt: AdamState) -> "MemberState":
        return replace(self, params=params, actor_opt=actor_opt, critic_opt=critic_opt, steps=self.steps + 1)


def init_members(cfg: PipelineConfig) -> list[MemberParams]:
    """Member j (1-based) is initialised from seed ``cfg.seed + j``."""
    critic = cfg.make_critic()
    actor_sizes = (cfg.feature_width, *cfg.hidden, ACTOR_HEADS)
    critic_sizes = (cfg.feature_width + 2, *cfg.hidden, critic.head_count)
    return [
        MemberParams(init_params(cfg.seed + j, actor_sizes), init_params(cfg.seed + j, critic_sizes))
        for j in range(1, cfg.n_members + 1)
    ]


# --------------------------------------------------------------------------
# offline dataset


@dataclass(frozen=True, eq=False)
class OfflineSample:
    observation: sim.Observation
    target_q: np.ndarray  # (H, W)
    target_action: np.ndarray  # (H, W, 2)
    valid_mask: np.ndarray  # (H, W) bool
    scene_seed: int = 0


def offline_labels(obs: sim.Observation, bin_mask: np.ndarray, window: int = 2,
                   floor_threshold: float = FLOOR_THRESHOLD, label_coeff: float = LABEL_COEFF):
    """Approximate ground truth from the observation alone.

    Object pixels are found by background subtraction (height above the floor
    threshold). Their reward label is ``1 / (1 + c_q * s)`` with ``s`` the
    windowed standard deviation of observed normals, and their action label
    points the approach axis along the negative normal.
    """
    valid = bin_mask & (obs.height > floor_threshold)
    s = sim.windowed_normal_std(obs.normals, window)
    target_q = np.where(valid, 1.0 / (1.0 + label_coeff * s), 0.0)
    target_action = np.where(valid[..., None], sim.normal_to_tilt(obs.normals), 0.0)
    return target_q, target_action, valid


def offline_scene(seed: int, objects_per_scene: tuple[int, int] = (5, 10), difficulty: str = "easy",
                  config: sim.SimConfig = sim.DEFAULT_CONFIG) -> sim.Scene:
    lo, hi = objects_per_scene
    n = int(stream(seed, "offline-count").integers(lo, hi + 1))
    return make_scene(seed, n, difficulty, config)


def build_offline_dataset(seed: int | Sequence[int], n_scenes: int, objects_per_scene: tuple[int, int] = (5, 10),
                          difficulty: str = "easy", config: sim.SimConfig = sim.DEFAULT_CONFIG) -> list[OfflineSample]:
    """Render ``n_scenes`` random scenes and label them.

    ``seed`` is either a base seed (scene seeds are derived from it) or an
    explicit sequence of scene seeds. The default object set is the easy one:
    the online bins contain objects the offline data never showed.
    """
    if isinstance(seed, (int, np.integer)):
        seeds = [derive_seed(int(seed), "offline-scene", i) for i in range(n_scenes)]
    else:
        seeds = list(seed)[:n_scenes]
        if len(seeds) < n_scenes:
            raise ValueError("not enough scene seeds")
    out = []
    for s in seeds:
        scene = offline_scene(s, objects_per_scene, difficulty, config)
        obs = sim.render(scene, config)
        target_q, target_action, valid = offline_labels(obs, scene.bin_mask, config.window)
        out.append(OfflineSample(obs, target_q, target_action, valid, s))
    return out


def rotate_patch(patch: np.ndarray, k: int, size: int) -> np.ndarray:
    """Rotate a flattened patch by ``k`` quarter turns (as ``np.rot90``), rotating normals with it."""
    p = np.rot90(patch.reshape(size, size, CHANNELS), k, axes=(0, 1)).copy()
    for _ in range(k % 4):
        nx = p[..., 1].copy()
        p[..., 1] = p[..., 2]
        p[..., 2] = -nx
    return p.reshape(-1)


class _PatchSource:
    """Edge-padded channel stacks so batches can be cut without re-padding."""

    def __init__(self, samples: Sequence[OfflineSample], size: int):
        r = size // 2
        self.size = size
        self.padded = [np.pad(s.observation.channels(), ((r, r), (r, r), (0, 0)), mode="edge") for s in samples]
        self.valid = [np.flatnonzero(s.valid_mask) for s in samples]
        self.masks = [np.flatnonzero(sim._bin_mask(s.valid_mask.shape, 2)) for s in samples]
        self.width = samples[0].valid_mask.shape[1]

    def patch(self, i: int, row: int, col: int) -> np.ndarray:
        return self.padded[i][row : row + self.size, col : col + self.size].reshape(-1)


def pretrain(dataset: Sequence[OfflineSample], members: Sequence[MemberParams], steps: int,
             batch: int = 12, lr: float = 1e-4, critic=None, seed: int = 0, patch: int = DEFAULT_PATCH,
             valid_fraction: float = 0.75) -> list[MemberParams]:
    """Supervised offline training of every member on the approximate labels.

    Each step member j draws ``batch`` (sample, pixel) pairs from its own
    stream, mostly on object pixels and otherwise anywhere in the bin (label
    0), applies a random quarter-turn rotation, and takes one Adam step for
    the critic (its own loss on the reward label at the labelled action) and
    one for the actor (squared error of the mean action).

    Raises:
        FloatingPointError: if a loss or gradient stops being finite.
    """
    if not dataset:
        raise ValueError("empty dataset")
    critic = critic or MvCritic()
    source = _PatchSource(dataset, patch)
    out = []
    for j, member in enumerate(members):
        state = MemberState.fresh(j, member)
        for step in range(steps):
            rng = stream(seed, "pretrain", j, step)
            idx = rng.integers(len(dataset), size=batch)
            on_object = rng.random(batch) < valid_fraction
            rots = rng.integers(4, size=batch)
            picks = rng.random(batch)
            xs = np.empty((batch, source.size * source.size * CHANNELS))
            q_t = np.empty(batch)
            a_t = np.empty((batch, 2))
            for b in range(batch):
                i = idx[b]
                pool = source.valid[i] if on_object[b] and len(source.valid[i]) else source.masks[i]
                flat = pool[int(picks[b] * len(pool))]
                row, col = divmod(int(flat), source.width)
                xs[b] = rotate_patch(source.patch(i, row, col), int(rots[b]), patch)
                q_t[b] = dataset[i].target_q[row, col]
                centre = xs[b].reshape(patch, patch, CHANNELS)[patch // 2, patch // 2, 1:4]
                a_t[b] = sim.normal_to_tilt(centre) if dataset[i].valid_mask[row, col] else 0.0
            state = _supervised_step(state, critic, xs, q_t, a_t, lr)
        out.append(state.params)
    return out


def _supervised_step(state: MemberState, critic, xs, q_t, a_t, lr) -> MemberState:
    cg = critic.loss_and_grad(state.params.critic, critic_input(xs, a_t), q_t)
    ag = actor_regression_gradient(state.params.actor, xs, a_t)
    if not (math.isfinite(cg.loss) and math.isfinite(ag.loss)):
        raise FloatingPointError(f"diverged at member {state.index} step {state.steps}: "
                                 f"critic loss {cg.loss}, actor loss {ag.loss}")
    critic_p, critic_opt = adam_step(state.params.critic, cg, lr, state.critic_opt)
    actor_p, actor_opt = adam_step(state.params.actor, ag, lr, state.actor_opt)
    return state.advance(MemberParams(actor_p, critic_p), actor_opt, critic_opt)


# --------------------------------------------------------------------------
# buffers


@dataclass(frozen=True, eq=False)
class Transition:
    observation: sim.Observation
    pixel: tuple[int, int]
    action: tuple[float, float]
    reward: int
    step_index: int
    scene_id: int
    patch: np.ndarray  # features at ``pixel``; derived from ``observation``


class ReplayBuffer:
    """Bounded store shared by one producer and many sampling consumers.

    Sampling does not consume items, so the buffer behaves as a FIFO window:
    once ``capacity`` is reached the oldest transition is overwritten.
    """

    def __init__(self, capacity: int = 5000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0
        self.appended = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._items)

    def append(self, t: Transition) -> None:
        with self._lock:
            if len(self._items) < self.capacity:
                self._items.append(t)
            else:
                self._items[self._next] = t
            self._next = (self._next + 1) % self.capacity
            self.appended += 1

    def sample(self, rng: np.random.Generator, batch: int) -> list[Transition]:
        with self._lock:
            n = len(self._items)
            if n == 0:
                return []
            return [self._items[i] for i in rng.integers(n, size=batch)]

    def snapshot(self) -> list[Transition]:
        with self._lock:
            return list(self._items)


@dataclass(frozen=True, eq=False)
class EnsembleSnapshot:
    members: tuple[MemberParams, ...]
    member_steps: tuple[int, ...]
    version: int
    checksum: str

    def verify(self) -> None:
        if _snapshot_checksum(self.members, self.member_steps) != self.checksum:
            raise RuntimeError("parameter snapshot is inconsistent")


def _snapshot_checksum(members, steps) -> str:
    return "|".join(m.checksum() for m in members) + "|" + ",".join(map(str, steps))


class ParameterBuffer:
    """Newest parameters of every member, swapped in atomically.

    Each publish replaces one member and builds a new immutable snapshot
    under the lock; readers get whole snapshots and never see a mix.
    """

    def __init__(self, members: Sequence[MemberParams], member_steps: Sequence[int] | None = None):
        steps = tuple(member_steps or [0] * len(members))
        self._lock = threading.Lock()
        self._snap = EnsembleSnapshot(tuple(members), steps, 0, _snapshot_checksum(members, steps))

    def publish(self, index: int, params: MemberParams, member_step: int) -> int:
        with self._lock:
            members = list(self._snap.members)
            steps = list(self._snap.member_steps)
            members[index] = params
            steps[index] = member_step
            self._snap = EnsembleSnapshot(tuple(members), tuple(steps), self._snap.version + 1,
                                          _snapshot_checksum(members, steps))
            return self._snap.version

    def read(self) -> EnsembleSnapshot:
        with self._lock:
            snap = self._snap
        snap.verify()
        return snap

    @property
    def version(self) -> int:
        return self._snap.version


# --------------------------------------------------------------------------
# acting


@dataclass(frozen=True, eq=False)
class EnsemblePrediction:
    actions: list[ActionMaps]
    action_mean: np.ndarray
    member_maps: list
    stats: object

    @property
    def q_mean(self) -> np.ndarray:
        return self.stats.q_mean


def predict_ensemble(members: Sequence[MemberParams], critic, obs: sim.Observation,
                     patch: int = DEFAULT_PATCH, patches: np.ndarray | None = None) -> EnsemblePrediction:
    """Actors first, then every critic scores the ensemble-mean action map."""
    if patches is None:
        patches = extract_patches(obs, patch)
    actions = [actor_predict(m.actor, patches, obs.shape) for m in members]
    action_mean = ensemble_action_mean(actions)
    maps = [critic.member_maps(m.critic, patches, action_mean) for m in members]
    return EnsemblePrediction(actions, action_mean, maps, critic.ensemble_stats(maps))


def online_step(scene: sim.Scene, members: Sequence[MemberParams], ucb: UcbConfig, t: int, attempt_index: int,
                critic, cfg: PipelineConfig, scene_id: int = 0, exclude=()) -> tuple[Transition, sim.Scene, dict]:
    """Render, predict, score with UCB, grasp at the argmax, and package the transition."""
    if len(scene) == 0:
        raise ValueError("scene is empty")
    obs = sim.render(scene, cfg.sim)
    patches = extract_patches(obs, cfg.patch)
    pred = predict_ensemble(members, critic, obs, cfg.patch, patches)
    scores = ucb_map(pred.q_mean, pred.stats, ucb, t)
    choice = select_pixel(scores, scene.bin_mask, pred.action_mean, obs, exclude)
    outcome, new_scene = sim.execute_grasp(scene, choice.action, attempt_index, cfg.sim)
    h, w = obs.shape
    transition = Transition(
        obs, (choice.row, choice.col), (choice.action.alpha, choice.action.beta), outcome.reward, t, scene_id,
        patches[choice.row * w + choice.col].copy(),
    )
    info = {"delta": delta_schedule(ucb, t), "ucb": choice.ucb_value, "p_true": outcome.true_success_prob,
            "removed": outcome.removed_object_id, "prediction": pred, "scores": scores}
    return transition, new_scene, info


def learner_update(state: MemberState, replay: ReplayBuffer, critic, cfg: PipelineConfig,
                   rng: np.random.Generator) -> MemberState:
    """One Adam step for the critic and one for the actor, at the stored pixels only."""
    batch = replay.sample(rng, cfg.batch)
    if not batch:
        log.warning("learner %d: replay buffer empty, skipping update", state.index)
        return state
    xs = np.stack([t.patch for t in batch])
    acts = np.array([t.action for t in batch])
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    eps = rng.standard_normal((len(batch), 2))
    params = state.params
    cg = critic.loss_and_grad(params.critic, critic_input(xs, acts), rewards)
    anchor = None
    if cfg.actor_anchor > 0 and state.prior is not None:
        anchor = actor_heads(forward(state.prior, xs))[0]
    ag = actor_gradient(params.actor, critic, params.critic, xs, eps, cfg.entropy_coeff, anchor, cfg.actor_anchor)
    critic_p, critic_opt = adam_step(params.critic, cg, cfg.lr, state.critic_opt)
    actor_p, actor_opt = adam_step(params.actor, ag, cfg.lr, state.actor_opt)
    return state.advance(MemberParams(actor_p, critic_p), actor_opt, critic_opt)


# --------------------------------------------------------------------------
# evaluation


def make_scene(seed: int, n_objects: int, difficulty: str = "mixed", config: sim.SimConfig = sim.DEFAULT_CONFIG,
               retries: int = 20) -> sim.Scene:
    """``generate_scene`` that re-derives the seed when the objects do not fit."""
    current = seed
    for k in range(retries + 1):
        try:
            return sim.generate_scene(current, n_objects, difficulty, config)
        except sim.SceneOverflowError:
            current = derive_seed(seed, "overflow-retry", k)
    raise sim.SceneOverflowError(f"scene overflow: {n_objects} objects do not fit after {retries} reseeds")


@dataclass
class EpisodeTrace:
    scene_seed: int
    initial_objects: int
    rewards: list[int] = field(default_factory=list)
    pixels: list[tuple[int, int]] = field(default_factory=list)

    @property
    def remaining(self) -> int:
        return self.initial_objects - sum(self.rewards)

    @property
    def clearing_rate(self) -> float:
        return sim.clearing_rate(self.initial_objects, self.remaining)

    @property
    def success_rate(self) -> float:
        return sum(self.rewards) / len(self.rewards) if self.rewards else 0.0


@dataclass
class RunMetrics:
    grasp_success_rate: float
    clearing_rate: float
    episodes: list[EpisodeTrace]
    checkpoint_step: int = 0

    @classmethod
    def from_episodes(cls, episodes: list[EpisodeTrace], step: int = 0) -> "RunMetrics":
        attempts = sum(len(e.rewards) for e in episodes)
        successes = sum(sum(e.rewards) for e in episodes)
        clearing = float(np.mean([e.clearing_rate for e in episodes])) if episodes else 0.0
        return cls(successes / attempts if attempts else 0.0, clearing, episodes, step)

    def to_dict(self) -> dict:
        return {
            "checkpoint_step": self.checkpoint_step,
            "grasp_success_rate": self.grasp_success_rate,
            "clearing_rate": self.clearing_rate,
            "episodes": [asdict(e) for e in self.episodes],
        }


def run_episode(scene: sim.Scene, members: Sequence[MemberParams], critic, cfg: PipelineConfig,
                ucb: UcbConfig = GREEDY, max_attempts: int | None = None) -> EpisodeTrace:
    """Grasp until the bin is empty or the attempt budget is used up."""
    max_attempts = cfg.max_attempts if max_attempts is None else max_attempts
    trace = EpisodeTrace(scene.rng_seed, len(scene))
    failed: list[tuple[int, int]] = []
    for attempt in range(max_attempts):
        if len(scene) == 0:
            break
        exclude = failed[-cfg.no_repeat:] if cfg.no_repeat else ()
        tr, scene, _ = online_step(scene, members, ucb, 0, attempt, critic, cfg, exclude=exclude)
        trace.rewards.append(tr.reward)
        trace.pixels.append(tr.pixel)
        failed = [] if tr.reward else failed + [tr.pixel]
    return trace


def evaluate(members: Sequence[MemberParams], critic, cfg: PipelineConfig, eval_seeds: Sequence[int],
             n_objects: int = 17, step: int = 0) -> RunMetrics:
    """Greedy (delta = 0) episodes on fixed mixed scenes."""
    episodes = []
    for seed in eval_seeds:
        scene = make_scene(seed, n_objects, "mixed", cfg.sim)
        episodes.append(run_episode(scene, members, critic, cfg))
    return RunMetrics.from_episodes(episodes, step)


# --------------------------------------------------------------------------
# checkpoints and run artifacts


def save_ensemble(members: Sequence[MemberParams], directory: str | Path, cfg: PipelineConfig, step: int = 0) -> Path:
    """Directory with ``member_<j>_{actor,critic}.bin`` plus a key=value ``manifest.txt``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for j, m in enumerate(members):
        save_params(m.actor, directory / f"member_{j}_actor.bin")
        save_params(m.critic, directory / f"member_{j}_critic.bin")
    lines = ["format=graspucb-ensemble", "version=1", f"members={len(members)}", f"critic={cfg.critic}",
             f"heads={cfg.heads}", f"kappa={cfg.kappa!r}", f"patch={cfg.patch}", f"step={step}"]
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")
    return directory


def read_manifest(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def load_ensemble(directory: str | Path) -> tuple[list[MemberParams], dict[str, str]]:
    directory = Path(directory)
    manifest_path = directory / "manifest.txt"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no ensemble checkpoint at {directory}")
    manifest = read_manifest(manifest_path)
    members = [
        MemberParams(load_params(directory / f"member_{j}_actor.bin"), load_params(directory / f"member_{j}_critic.bin"))
        for j in range(int(manifest["members"]))
    ]
    return members, manifest


# --------------------------------------------------------------------------
# online runs


@dataclass
class GraspRecord:
    grasp: int
    step: int
    scene_id: int
    attempt: int
    pixel: tuple[int, int]
    action: tuple[float, float]
    reward: int
    delta: float
    ratio: float
    version: int
    staleness: int
    p_true: float


@dataclass
class RunResult:
    members: list[MemberParams]
    records: list[GraspRecord]
    checkpoints: dict[int, list[MemberParams]]
    update_steps: int
    failure: str | None = None

    @property
    def grasps(self) -> int:
        return len(self.records)

    @property
    def ratio(self) -> float:
        return self.update_steps / self.grasps if self.grasps else 0.0

    def window_ratios(self, window: int = 50, skip: int = 0) -> list[float]:
        """Update steps per grasp over consecutive windows of ``window`` grasps."""
        out = []
        recs = self.records[skip:]
        for start in range(0, len(recs) - window + 1, window):
            a, b = recs[start], recs[start + window - 1]
            prev = self.records[skip + start - 1].step if skip + start > 0 else 0
            out.append((b.step - prev) / window)
        return out


class _SceneCycler:
    """Fresh seeded bins whenever the current one is cleared or exhausts its attempts."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.scene_id = -1
        self._next()

    def _next(self):
        self.scene_id += 1
        seed = derive_seed(self.cfg.seed, "online-scene", self.scene_id)
        lo, hi = self.cfg.online_objects
        n = int(stream(seed, "online-count").integers(lo, hi + 1))
        self.scene = make_scene(seed, n, self.cfg.online_difficulty, self.cfg.sim)
        self.attempt = 0
        self.failed: list[tuple[int, int]] = []

    def exclude(self):
        return self.failed[-self.cfg.no_repeat:] if self.cfg.no_repeat else ()

    def advance(self, transition: Transition, new_scene: sim.Scene):
        self.attempt += 1
        self.failed = [] if transition.reward else self.failed + [transition.pixel]
        self.scene = new_scene
        if len(new_scene) == 0 or self.attempt >= self.cfg.max_attempts:
            self._next()


class _RunWriter:
    def __init__(self, out_dir: str | Path | None, cfg: PipelineConfig):
        self.out = Path(out_dir) if out_dir else None
        self.cfg = cfg
        if self.out:
            self.out.mkdir(parents=True, exist_ok=True)
            (self.out / "config.toml").write_text(config_to_text(cfg))
            self._metrics = open(self.out / "metrics.jsonl", "w")

    def record(self, rec: GraspRecord):
        if self.out:
            self._metrics.write(json.dumps(asdict(rec)) + "\n")
            self._metrics.flush()

    def checkpoint(self, members, step, scene=None, critic=None):
        if not self.out:
            return
        save_ensemble(members, self.out / "checkpoints" / f"step_{step:06d}", self.cfg, step)
        if scene is not None and len(scene):
            from .maps import export_prediction_maps

            obs = sim.render(scene, self.cfg.sim)
            pred = predict_ensemble(members, critic, obs, self.cfg.patch)
            scores = ucb_map(pred.q_mean, pred.stats, self.cfg.ucb, step)
            export_prediction_maps(pred.stats, scores, self.out / "maps" / f"step_{step:06d}")

    def close(self, result: RunResult):
        if self.out:
            self._metrics.close()
            summary = {"grasps": result.grasps, "update_steps": result.update_steps, "ratio": result.ratio,
                       "checkpoints": sorted(result.checkpoints), "failure": result.failure}
            (self.out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
            if result.failure:
                (self.out / "failure.json").write_text(json.dumps({"error": result.failure}) + "\n")
                (self.out / ".partial").write_text("run ended early\n")


def _learner_rng(cfg: PipelineConfig, member: int, step: int) -> np.random.Generator:
    return stream(cfg.seed, "learner", member, step)


def run_sync(cfg: PipelineConfig, members: Sequence[MemberParams], out_dir: str | Path | None = None,
             grasp_budget: int | None = None) -> RunResult:
    """Single-threaded reference schedule: one grasp, then ``updates_per_grasp`` updates round-robin."""
    critic = cfg.make_critic()
    budget = cfg.grasp_budget if grasp_budget is None else grasp_budget
    total_steps = min(cfg.online_steps, budget * cfg.updates_per_grasp)
    states = [MemberState.fresh(j, m) for j, m in enumerate(members)]
    params_buf = ParameterBuffer(members)
    replay = ReplayBuffer(cfg.replay_capacity)
    cycler = _SceneCycler(cfg)
    writer = _RunWriter(out_dir, cfg)
    records: list[GraspRecord] = []
    checkpoints: dict[int, list[MemberParams]] = {}
    steps = 0
    n = len(states)
    for g in range(budget):
        snap = params_buf.read()
        staleness = max(s.steps - k for s, k in zip(states, snap.member_steps))
        tr, new_scene, info = online_step(cycler.scene, snap.members, cfg.ucb, steps, cycler.attempt, critic, cfg,
                                          cycler.scene_id, cycler.exclude())
        replay.append(tr)
        rec = GraspRecord(g, steps, cycler.scene_id, cycler.attempt, tr.pixel, tr.action, tr.reward, info["delta"],
                          0.0, snap.version, staleness, info["p_true"])
        cycler.advance(tr, new_scene)
        for _ in range(cfg.updates_per_grasp):
            if steps >= total_steps:
                break
            j = steps % n
            states[j] = learner_update(states[j], replay, critic, cfg, _learner_rng(cfg, j, states[j].steps))
            steps += 1
            if states[j].steps % cfg.publish_every == 0:
                params_buf.publish(j, states[j].params, states[j].steps)
            if steps % cfg.checkpoint_every == 0:
                checkpoints[steps] = [s.params for s in states]
                writer.checkpoint(checkpoints[steps], steps, cycler.scene, critic)
        rec.ratio = steps / (g + 1)
        records.append(rec)
        writer.record(rec)
    result = RunResult([s.params for s in states], records, checkpoints, steps)
    writer.close(result)
    return result


class _Pacer:
    """Token bucket tying learner updates to collected grasps.

    Member j may start its k-th update only once ``k < (updates_per_grasp / N) * grasps``;
    the acting loop may start grasp g only once ``updates >= ratio * (g - slack)``.
    """

    def __init__(self, cfg: PipelineConfig, n_members: int, total_steps: int, budget: int):
        self.cond = threading.Condition()
        self.per_member = cfg.updates_per_grasp / n_members
        self.ratio = cfg.updates_per_grasp
        self.total = total_steps
        self.budget = budget
        self.grasps = 0
        self.issued = 0
        self.done = 0
        self.member_issued = [0] * n_members
        self.stop = False
        self.slack = 1

    def acquire_update(self, j: int) -> int | None:
        """Block until member j may update; return the global step index or None when finished."""
        with self.cond:
            while True:
                if self.stop or self.issued >= self.total:
                    return None
                if self.member_issued[j] < self.per_member * self.grasps:
                    k = self.issued
                    self.issued += 1
                    self.member_issued[j] += 1
                    return k
                self.cond.wait(0.5)

    def finish_update(self):
        with self.cond:
            self.done += 1
            self.cond.notify_all()

    def acquire_grasp(self) -> int | None:
        with self.cond:
            while True:
                if self.stop or self.grasps >= self.budget:
                    return None
                if self.done >= min(self.total, self.ratio * (self.grasps - self.slack)):
                    return self.done
                self.cond.wait(0.5)

    def finish_grasp(self):
        with self.cond:
            self.grasps += 1
            self.cond.notify_all()

    def abort(self):
        with self.cond:
            self.stop = True
            self.cond.notify_all()


def run_async(cfg: PipelineConfig, members: Sequence[MemberParams], out_dir: str | Path | None = None,
              grasp_budget: int | None = None, fault: Callable[[int, int], None] | None = None) -> RunResult:
    """Threaded run: one acting loop plus one learner thread per member.

    ``fault(member, step)`` is a test hook called before each update; if it
    raises, the run shuts down cleanly and reports the failure.
    """
    critic = cfg.make_critic()
    budget = cfg.grasp_budget if grasp_budget is None else grasp_budget
    total_steps = min(cfg.online_steps, budget * cfg.updates_per_grasp)
    n = len(members)
    states = [MemberState.fresh(j, m) for j, m in enumerate(members)]
    state_lock = threading.Lock()
    params_buf = ParameterBuffer(members)
    replay = ReplayBuffer(cfg.replay_capacity)
    pacer = _Pacer(cfg, n, total_steps, budget)
    writer = _RunWriter(out_dir, cfg)
    records: list[GraspRecord] = []
    checkpoints: dict[int, list[MemberParams]] = {}
    errors: list[str] = []

    def learner(j: int):
        try:
            while True:
                k = pacer.acquire_update(j)
                if k is None:
                    return
                if fault is not None:
                    fault(j, states[j].steps)
                new = learner_update(states[j], replay, critic, cfg, _learner_rng(cfg, j, states[j].steps))
                with state_lock:
                    states[j] = new
                    if new.steps % cfg.publish_every == 0:
                        params_buf.publish(j, new.params, new.steps)
                pacer.finish_update()
                done = pacer.done
                if done % cfg.checkpoint_every == 0:
                    with state_lock:
                        checkpoints.setdefault(done, [s.params for s in states])
        except BaseException as exc:  # noqa: BLE001 - every worker failure must stop the run
            errors.append(f"learner {j}: {type(exc).__name__}: {exc}")
            pacer.abort()

    def acting():
        cycler = _SceneCycler(cfg)
        try:
            g = 0
            while True:
                step = pacer.acquire_grasp()
                if step is None:
                    return
                with state_lock:
                    snap = params_buf.read()
                    current = [s.steps for s in states]
                staleness = max(c - k for c, k in zip(current, snap.member_steps))
                tr, new_scene, info = online_step(cycler.scene, snap.members, cfg.ucb, step, cycler.attempt,
                                                  critic, cfg, cycler.scene_id, cycler.exclude())
                replay.append(tr)
                rec = GraspRecord(g, step, cycler.scene_id, cycler.attempt, tr.pixel, tr.action, tr.reward,
                                  info["delta"], step / max(g, 1), snap.version, staleness, info["p_true"])
                cycler.advance(tr, new_scene)
                records.append(rec)
                writer.record(rec)
                g += 1
                pacer.finish_grasp()
        except BaseException as exc:  # noqa: BLE001
            errors.append(f"acting: {type(exc).__name__}: {exc}")
            pacer.abort()

    threads = [threading.Thread(target=learner, args=(j,), name=f"learner-{j}", daemon=True) for j in range(n)]
    threads.append(threading.Thread(target=acting, name="acting", daemon=True))
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    result = RunResult([s.params for s in states], records, checkpoints, pacer.done,
                       "; ".join(errors) if errors else None)
    for step, ms in sorted(checkpoints.items()):
        writer.checkpoint(ms, step)
    writer.close(result)
    return result


# --------------------------------------------------------------------------
# config text


def config_to_text(cfg: PipelineConfig) -> str:
    """Flat ``key = value`` lines (TOML-compatible scalars)."""
    u = cfg.ucb
    lines = [
        f"seed = {cfg.seed}", f"n_members = {cfg.n_members}", f'critic = "{cfg.critic}"', f"heads = {cfg.heads}",
        f"kappa = {cfg.kappa!r}", f"patch = {cfg.patch}", f"lr = {cfg.lr!r}", f"batch = {cfg.batch}",
        f"entropy_coeff = {cfg.entropy_coeff!r}", f"actor_anchor = {cfg.actor_anchor!r}", f"updates_per_grasp = {cfg.updates_per_grasp}",
        f"publish_every = {cfg.publish_every}", f"replay_capacity = {cfg.replay_capacity}",
        f"online_steps = {cfg.online_steps}", f"checkpoint_every = {cfg.checkpoint_every}",
        f"max_attempts = {cfg.max_attempts}", f'uncertainty = "{u.uncertainty_kind.value}"',
        f"delta = {u.delta!r}", f'schedule = "{u.schedule.value}"', f"horizon = {u.horizon}",
        f"ucb_on_std = {str(u.ucb_on_std).lower()}",
    ]
    return "\n".join(lines) + "\n"


def config_from_mapping(values: dict[str, str], base: PipelineConfig | None = None) -> PipelineConfig:
    """Apply ``key = value`` overrides (strings, as read from a config file) to a config."""
    from .actor import Schedule, UncertaintyKind

    cfg = base or PipelineConfig()
    ucb = cfg.ucb
    plain = {}
    for key, raw in values.items():
        value = raw.strip().strip('"').strip("'")
        if key in ("uncertainty", "uncertainty_kind"):
            ucb = replace(ucb, uncertainty_kind=UncertaintyKind.parse(value))
        elif key == "delta":
            ucb = replace(ucb, delta=float(value))
        elif key == "schedule":
            ucb = replace(ucb, schedule=Schedule.parse(value))
        elif key == "horizon":
            ucb = replace(ucb, horizon=int(value))
        elif key == "ucb_on_std":
            ucb = replace(ucb, ucb_on_std=value.lower() in ("1", "true", "yes"))
        elif key in ("critic", "online_difficulty"):
            plain[key] = value
        elif key in ("kappa", "lr", "entropy_coeff", "actor_anchor"):
            plain[key] = float(value)
        elif key in PipelineConfig.__dataclass_fields__ and key not in ("ucb", "sim", "hidden", "online_objects"):
            plain[key] = int(value)
        else:
            raise KeyError(f"unknown config key {key!r}")
    return replace(cfg, ucb=ucb, **plain)
