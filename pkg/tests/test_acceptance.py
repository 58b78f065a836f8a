"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Criteria 5 to 8 share one benchmark: per seed, one pretrained ensemble per
critic family, online runs from that start, greedy evaluation on identical
scenes. Set ``GRASPUCB_ACCEPTANCE_CACHE`` to a directory to keep pretrained
ensembles between sessions; otherwise a temporary directory is used.
"""

import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from graspucb import experiments as E
from graspucb import net
from graspucb import pipeline as P
from graspucb.actor import (Schedule, UcbConfig, UncertaintyKind, actor_gradient, delta_schedule, select_pixel,
                            ucb_map)
from graspucb.critic_mv import MvCritic, MvPrediction, mv_ensemble_stats, mv_nll_loss
from graspucb.critic_qr import QrCritic, QuantileTensor, qr_ensemble_stats, quantile_huber_loss, quantile_levels
from graspucb.sim import Observation

from .gradcheck import H, max_rel_error, numeric_grad, numeric_param_grads
from .test_critics import naive_mv_stats, naive_qr_stats

pytestmark = pytest.mark.acceptance

SEEDS = tuple(range(1, 11))
EVAL_EXTRA = 4  # two fixed scenes plus four per-seed scenes
BENCH_UNCERTAINTIES = ("none", "ale", "epi", "epi-adaptive")


# --------------------------------------------------------------------------
# shared benchmark


class Benchmark:
    def __init__(self, cache):
        self.cache = cache
        self.cells = {}
        self.offline = {}

    def config(self, seed, critic="mv", heads=20, unc="epi-adaptive"):
        base = P.PipelineConfig(seed=seed, critic=critic, heads=heads)
        return replace(base, ucb=E.exploration(unc, base.online_steps))

    def members(self, cfg):
        return E.pretrained_ensemble(cfg, self.cache)

    def offline_metrics(self, seed, critic="mv", heads=20):
        key = (seed, critic, heads)
        if key not in self.offline:
            cfg = self.config(seed, critic, heads)
            self.offline[key] = P.evaluate(self.members(cfg), cfg.make_critic(), cfg, E.eval_seeds(seed, EVAL_EXTRA))
        return self.offline[key]

    def cell(self, seed, unc, critic="mv", heads=20, sync=True):
        key = (seed, unc, critic, heads, sync)
        if key not in self.cells:
            cfg = self.config(seed, critic, heads, unc)
            checkpoints = sync and critic == "mv" and unc == "epi-adaptive"
            self.cells[key] = E.run_cell(cfg, self.members(cfg), unc, E.eval_seeds(seed, EVAL_EXTRA), sync=sync,
                                         checkpoint_evals=checkpoints)
        return self.cells[key]


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    cache = os.environ.get("GRASPUCB_ACCEPTANCE_CACHE") or tmp_path_factory.mktemp("pretrained")
    return Benchmark(cache)


def clearing(cells):
    return np.array([c.final.clearing_rate for c in cells])


def fmt(values):
    return f"{np.mean(values):.3f}+-{np.std(values):.3f}"


# --------------------------------------------------------------------------
# 1. gradients


def test_c1_gradient_correctness(report):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {}

    errs = []
    for _ in range(100):
        q, s, y = rng.uniform(0.01, 0.99), rng.uniform(-6, 3), rng.integers(2)
        _, dq, ds = mv_nll_loss(q, s, y)
        n = numeric_grad(lambda v: float(mv_nll_loss(v[0], v[1], y)[0]), np.array([q, s]))
        errs.append(max_rel_error([dq, ds], [n[0], n[1]]))
    worst["mv_nll"] = max(errs)

    errs = []
    while len(errs) < 100:
        pred, y, tau, kappa = rng.uniform(), rng.integers(2), rng.uniform(0.01, 0.99), rng.uniform(0.02, 1.0)
        if abs(abs(y - pred) - kappa) < 10 * H:  # the Huber kink is not differentiable
            continue
        _, g = quantile_huber_loss(pred, y, tau, kappa)
        n = numeric_grad(lambda v: float(quantile_huber_loss(v[0], y, tau, kappa)[0]), np.array([pred]))
        errs.append(max_rel_error([g], [n[0]]))
    worst["quantile_huber"] = max(errs)

    errs = []
    critic = MvCritic()
    for draw in range(100):
        actor = net.init_params(draw, (4, 3, 4))
        cparams = net.init_params(draw + 1000, (6, 4, 2))
        x, eps = rng.normal(size=(2, 4)), rng.normal(size=(2, 2))
        anchor = rng.uniform(-0.3, 0.3, size=(2, 2))

        def loss(p):
            return actor_gradient(p, critic, cparams, x, eps, 0.01, anchor, 1.0).loss

        g = actor_gradient(actor, critic, cparams, x, eps, 0.01, anchor, 1.0)
        errs.append(max_rel_error(g.arrays(), numeric_param_grads(loss, actor)))
    worst["actor"] = max(errs)

    errs = []
    for draw in range(100):
        sizes = tuple(int(v) for v in rng.integers(2, 6, size=rng.integers(2, 5)))
        p = net.init_params(draw, sizes)
        x, up = rng.normal(size=(3, sizes[0])), rng.normal(size=(3, sizes[-1]))
        g = net.backward(p, x, up)
        errs.append(max_rel_error(g.arrays(), numeric_param_grads(lambda q: float(np.sum(net.forward(q, x) * up)), p)))
    worst["net_backward"] = max(errs)

    seconds = time.perf_counter() - start
    ok = all(v < 1e-5 for v in worst.values()) and seconds < 10
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {seconds:.1f}s"
    report.record(1, "gradient correctness (rel err < 1e-5, < 10 s)", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 2. decomposition oracles


def test_c2_decomposition_oracles(report):
    rng = np.random.default_rng(202)
    mv_err = qr_err = 0.0
    exact = True
    for _ in range(1000):
        n, h, w = (int(v) for v in rng.integers(1, 5, size=3))
        q, lv = rng.uniform(size=(n, h, w)), rng.uniform(-10, 4, size=(n, h, w))
        st = mv_ensemble_stats([MvPrediction(q[j], lv[j]) for j in range(n)])
        ref = naive_mv_stats(q, lv)
        mv_err = max(mv_err, *(float(np.abs(a - b).max()) for a, b in zip((st.q_mean, st.v_ale, st.v_epi), ref)))
        exact &= bool(np.all(st.v_all == st.v_ale + st.v_epi))

        k = int(rng.integers(1, 7))
        z = rng.uniform(size=(n, h, w, k))
        qs = qr_ensemble_stats([QuantileTensor(z[j], quantile_levels(k)) for j in range(n)])
        ref = naive_qr_stats(z)
        qr_err = max(qr_err, *(float(np.abs(a - b).max()) for a, b in zip((qs.q_mean, qs.v_epi, qs.v_ale), ref)))
    ok = mv_err <= 1e-12 and qr_err <= 1e-12 and exact
    detail = f"mv max err {mv_err:.1e}, qr max err {qr_err:.1e}, v_all exact {exact}"
    report.record(2, "ensemble decomposition matches naive loops (1e-12)", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 3. distributional convergence


def test_c3_distributional_convergence(report):
    start = time.perf_counter()
    p = 0.7
    qr = E.bernoulli_convergence(QrCritic(20), p, steps=10_000, seed=3)
    mv = E.bernoulli_convergence(MvCritic(), p, steps=10_000, seed=3)
    seconds = time.perf_counter() - start
    low = qr.quantiles[qr.taus < 1 - p]
    high = qr.quantiles[qr.taus > 1 - p]
    checks = {
        "qr low heads < 0.2": bool(np.all(low < 0.2)),
        "qr high heads > 0.8": bool(np.all(high > 0.8)),
        "qr mean": abs(qr.q - p) <= 0.05,
        "mv mean": abs(mv.q - p) <= 0.05,
        "mv variance": abs(mv.variance - p * (1 - p)) <= 0.3 * p * (1 - p),
        "runtime": seconds < 120,
    }
    ok = all(checks.values())
    detail = (f"qr low max {low.max():.3f}, high min {high.min():.3f}, mean {qr.q:.3f}; "
              f"mv mean {mv.q:.3f}, var {mv.variance:.3f} (target {p * (1 - p):.3f}); {seconds:.0f}s")
    report.record(3, "quantile curve and MV heads recover Bernoulli(0.7)", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 4. epistemic shrinks, aleatoric stays


def test_c4_uncertainty_evolution(report):
    snaps = {s.samples: s for s in E.uncertainty_evolution(P.PipelineConfig(seed=4), checkpoints=(50, 2000))}
    early, late = snaps[50], snaps[2000]
    ratio = late.v_epi_deterministic / early.v_epi_deterministic
    ok = ratio < 0.1 and 0.125 <= late.v_ale_noisy <= 0.5
    detail = (f"v_epi(det) {early.v_epi_deterministic:.2e} -> {late.v_epi_deterministic:.2e} (ratio {ratio:.1e}); "
              f"v_ale(noisy) at 2000 = {late.v_ale_noisy:.3f}")
    report.record(4, "epistemic uncertainty shrinks, aleatoric does not", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 5. exploration ordering


def test_c5_exploration_ordering(report, bench):
    cells = {u: [bench.cell(s, u) for s in SEEDS] for u in BENCH_UNCERTAINTIES}
    failed = [f"{c.name}/{c.seed}: {c.error}" for cs in cells.values() for c in cs if c.error]
    assert not failed, failed
    m = {u: float(clearing(cs).mean()) for u, cs in cells.items()}
    minutes = {u: sum(c.seconds for c in cs) / 60 for u, cs in cells.items()}
    checks = {
        "adaptive >= epi": m["epi-adaptive"] >= m["epi"],
        "epi >= none": m["epi"] >= m["none"],
        "adaptive - none >= 5pt": m["epi-adaptive"] - m["none"] >= 0.05,
        "epi >= ale": m["epi"] >= m["ale"],
        "runtime": max(minutes.values()) < 30,
    }
    ok = all(checks.values())
    detail = ", ".join(f"{u} {fmt(clearing(cs))}" for u, cs in cells.items())
    detail += f"; failed checks: {[k for k, v in checks.items() if not v]}; max {max(minutes.values()):.1f} min/config"
    report.record(5, "exploration ordering (epi-adaptive >= epi >= none, +5pt, epi >= ale)", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 6. online improvement over checkpoints


def test_c6_online_improvement(report, bench):
    cells = [bench.cell(s, "epi-adaptive") for s in SEEDS]
    assert all(c.error is None for c in cells)
    offline = np.array([bench.offline_metrics(s).clearing_rate for s in SEEDS])
    steps = sorted(cells[0].checkpoints)
    curve = np.array([[c.checkpoints[k].clearing_rate for k in steps] for c in cells])  # (seeds, checkpoints)
    means = np.concatenate([[offline.mean()], curve.mean(axis=0)])
    sem = np.concatenate([[offline.std()], curve.std(axis=0)]) / math.sqrt(len(SEEDS))
    # monotone up to noise: no checkpoint falls below an earlier one by more than two standard errors
    drops = [means[:i].max() - means[i] - 2 * max(sem[i], sem[:i][np.argmax(means[:i])]) for i in range(1, len(means))]
    gain = float(curve[:, -1].mean() - offline.mean())
    ok = gain >= 0.10 and max(drops) <= 0
    detail = (f"offline {offline.mean():.3f} -> " + " ".join(f"{k}:{v:.3f}" for k, v in zip(steps, means[1:]))
              + f"; gain {100 * gain:+.1f}pt; worst excess drop {max(drops):+.3f}")
    report.record(6, "online checkpoints improve (final >= offline + 10pt)", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 7. quantile-head ablation


def test_c7_quantile_heads(report, bench):
    cells = {k: [bench.cell(s, "epi-adaptive", "qr", k) for s in SEEDS] for k in (10, 20, 100)}
    rows = E.table_rows([c for cs in cells.values() for c in cs])
    complete = all(c.error is None for cs in cells.values() for c in cs)
    m = {k: float(clearing(cs).mean()) for k, cs in cells.items()} if complete else {}
    ok = complete and m[10] >= max(m.values()) - 0.05
    detail = (", ".join(f"K={k} {fmt(clearing(cs))}" for k, cs in cells.items()) if complete
              else "incomplete cells") + f"; {len(rows)} table rows"
    report.record(7, "QR head ablation complete, K=10 within 5pt of best", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 8. pipeline contracts


def test_c8_pipeline_contracts(report, bench):
    async_cells = [bench.cell(s, "epi-adaptive", sync=False) for s in SEEDS]
    sync_cells = [bench.cell(s, "epi-adaptive") for s in SEEDS]
    assert all(c.error is None for c in async_cells + sync_cells)
    ratios = [r for c in async_cells for r in c.run.window_ratios(50, skip=50)]
    staleness = max(r.staleness for c in async_cells for r in c.run.records)

    cfg = replace(bench.config(1), online_steps=300, checkpoint_every=100)
    members = bench.members(bench.config(1))
    a, b = P.run_sync(cfg, members), P.run_sync(cfg, members)
    deterministic = ([m.checksum() for m in a.members] == [m.checksum() for m in b.members]
                     and [(r.pixel, r.action, r.reward) for r in a.records]
                     == [(r.pixel, r.action, r.reward) for r in b.records])

    gap = float(clearing(async_cells).mean() - clearing(sync_cells).mean())
    checks = {
        "ratio in [5, 7]": 5 <= min(ratios) and max(ratios) <= 7,
        "staleness <= 10": staleness <= 10,
        "sync deterministic": deterministic,
        "async ~ sync": abs(gap) <= 0.05,
    }
    ok = all(checks.values())
    detail = (f"window ratios {min(ratios):.2f}..{max(ratios):.2f}, max staleness {staleness}, "
              f"sync deterministic {deterministic}, async {fmt(clearing(async_cells))} vs sync "
              f"{fmt(clearing(sync_cells))} (gap {100 * gap:+.1f}pt)")
    report.record(8, "pipeline contracts (ratio, staleness, determinism, async ~ sync)", ok, detail)
    assert ok, detail


# --------------------------------------------------------------------------
# 9. UCB equation and schedule


def test_c9_ucb_and_schedule(report):
    rng = np.random.default_rng(909)
    q = rng.uniform(size=(8, 8))
    preds = [MvPrediction(rng.uniform(size=(8, 8)), rng.uniform(-5, 0, size=(8, 8))) for _ in range(3)]
    st = mv_ensemble_stats(preds)
    checks = {}
    checks["delta 0 identity"] = all(
        np.array_equal(ucb_map(q, st, UcbConfig(0.0, kind)), q) for kind in UncertaintyKind)
    cos = UcbConfig(1.0, UncertaintyKind.EPISTEMIC, Schedule.COSINE_ADAPTIVE, horizon=3000)
    checks["cosine endpoints"] = delta_schedule(cos, 0) == 1.0 and delta_schedule(cos, 3000) == 0.0 \
        and delta_schedule(cos, 5000) == 0.0 and delta_schedule(cos, 1500) == pytest.approx(0.5, abs=1e-15)

    obs = Observation(np.zeros((8, 8)), np.dstack([np.zeros((8, 8, 2)), np.ones((8, 8))]), np.zeros((8, 8)))
    mask = np.ones((8, 8), dtype=bool)
    actions = np.zeros((8, 8, 2))
    tied = np.zeros((8, 8))
    tied[[2, 5, 5], [6, 1, 7]] = 1.0
    picks = {(s.row, s.col) for s in (select_pixel(tied, mask, actions, obs) for _ in range(5))}
    checks["tie-break"] = picks == {(2, 6)}

    invariant = True
    for _ in range(200):
        scores = np.round(rng.uniform(size=(8, 8)), 2)  # coarse values force ties
        m = rng.random((8, 8)) < 0.8
        m[0, 0] = True
        base = select_pixel(scores, m, actions, obs)
        shift = float(rng.choice([-3.0, -0.5, 0.25, 2.0, 64.0]))
        moved = select_pixel(scores + shift, m, actions, obs)
        invariant &= (base.row, base.col) == (moved.row, moved.col)
    checks["shift invariance"] = invariant
    ok = all(checks.values())
    report.record(9, "UCB equation and delta schedule unit suite", ok,
                  ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok
