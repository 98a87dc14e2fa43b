"""Acceptance criteria 1-9.

Each criterion is computed by a ``criterion_N`` function that returns
``(passed, detail, outputs)``; ``outputs`` holds the numbers that the
determinism criterion compares across repeated runs. Run directly with
``python tests/test_acceptance.py`` for a plain pass/fail listing.
"""
import sys
import time
import warnings

import numpy as np
import pytest

from lineest.diagnostics import error_reduction, rcond_sweep, rho_sweep, sample_count_study
from lineest.estimators import EstimationProblem, SolverConfig, estimate
from lineest.errors import LineEstError
from lineest.grid_model import LineParams
from lineest.power_flow import Injection, synthesize_snapshots, two_instance_schedule
from lineest.scenario import load_scenario
from lineest.sensitivity import Regime, fd_check

try:
    from tests.helpers import random_radial, random_snapshots, random_thetas
except ImportError:  # run as a script from inside tests/
    from helpers import random_radial, random_snapshots, random_thetas

RESULTS = {}


def _record(n, passed, detail):
    line = f"ACCEPTANCE {n}: {'PASS' if passed else 'FAIL'} - {detail}"
    RESULTS[n] = line
    print(line)
    return line


def _rel(a, b):
    return np.abs(np.asarray(a) / np.asarray(b) - 1.0)


# -- criteria ----------------------------------------------------------------

def criterion_1():
    """Two-snapshot RMS-only recovery on the bundled district."""
    sc = load_scenario("district")
    truth = sc.truth()
    snaps = sc.snapshots()
    true_theta = [s.theta for s in synthesize_snapshots(sc.topology, truth, sc.schedule(), pmu=True)]
    t0 = time.perf_counter()
    rep = estimate(EstimationProblem(sc.topology, snaps, sc.datasheet(), config=SolverConfig(alpha=1.0, tol=1e-6)),
                   "nr-rms")
    wall = time.perf_counter() - t0
    r_err = float(np.max(_rel(rep.params.r, truth.r))) * 100
    x_err = float(np.max(_rel(rep.params.x, truth.x))) * 100
    th_err = float(max(np.max(np.abs(a - b)) for a, b in zip(rep.thetas, true_theta)))
    ok = rep.converged and rep.iterations <= 10 and r_err <= 0.2 and x_err <= 0.2 and th_err <= 1e-5 and wall < 1.0
    detail = (f"{rep.iterations} iterations, max R err {r_err:.2e}%, max X err {x_err:.2e}%, "
              f"max angle err {th_err:.2e} rad, {wall:.3f} s")
    return ok, detail, {"params": rep.params.as_vector(), "thetas": np.concatenate(rep.thetas),
                        "iterations": rep.iterations}


def criterion_2(cases=40):
    """Square PMU system recovers truth from a perturbed guess, on the district and random grids."""
    rng = np.random.default_rng(2)
    worst, worst_it, fails, outs = 0.0, 0, [], []
    sc = load_scenario("district")
    for c in range(cases):
        if c % 2 == 0:
            topo, guess = sc.topology, sc.datasheet()
        else:
            topo, guess = random_radial(rng, int(rng.integers(2, 8)))
            guess = guess.scaled(0.05)
        truth = LineParams(guess.r * (1 + rng.uniform(-0.25, 0.25, guess.n_lines)),
                           guess.x * (1 + rng.uniform(-0.25, 0.25, guess.n_lines)))
        p = np.zeros(topo.n_nodes)
        q = np.zeros(topo.n_nodes)
        p[topo.non_slack] = rng.uniform(-0.4, 0.4, topo.non_slack.size)
        q[topo.non_slack] = rng.uniform(-0.4, 0.4, topo.non_slack.size)
        snaps = synthesize_snapshots(topo, truth, [Injection("t1", p, q)], pmu=True)
        try:
            rep = estimate(EstimationProblem(topo, snaps, guess, config=SolverConfig(regime="pmu")), "nr-square")
        except (LineEstError, ValueError) as exc:
            fails.append(f"case {c}: {type(exc).__name__}")
            continue
        err = float(max(np.max(_rel(rep.params.r, truth.r)), np.max(_rel(rep.params.x, truth.x))))
        worst = max(worst, err)
        worst_it = max(worst_it, rep.iterations)
        outs.append(rep.params.as_vector())
    ok = not fails and worst < 1e-6 and worst_it <= 10
    detail = f"{cases} cases, worst rel err {worst:.2e}, max iterations {worst_it}" + (f", failures {fails}" if fails else "")
    return ok, detail, {"params": np.concatenate(outs) if outs else np.array([])}


def criterion_3(grids=50):
    """Analytical Jacobian vs finite differences on random radial grids, both regimes."""
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst = 0.0
    errs = []
    for _ in range(grids):
        topo, params = random_radial(rng, int(rng.integers(2, 9)))
        t = int(rng.integers(1, 4))
        snaps = random_snapshots(rng, topo, t)
        pmu = fd_check(topo, params, snaps, Regime.PMU, step=1e-7)
        rms_snaps = [s.without_angles() for s in random_snapshots(rng, topo, max(t, 2))]
        rms = fd_check(topo, params, rms_snaps, Regime.RMS, random_thetas(rng, topo, len(rms_snaps)), step=1e-7)
        errs += [pmu.max_rel_error, rms.max_rel_error]
        worst = max(worst, pmu.max_rel_error, rms.max_rel_error)
    wall = time.perf_counter() - t0
    ok = worst < 1e-6 and wall < 10.0
    return ok, f"{grids} grids x 2 regimes, worst rel err {worst:.2e}, {wall:.2f} s", {"errors": np.array(errs)}


def criterion_4():
    """RCOND collapse at r = 0 and r = 1, recovery at |r - 1| = 0.01."""
    sc = load_scenario("district")
    sched = two_instance_schedule(sc.topology, [1, 2, 3], 0.3, 0.3)
    rep = rcond_sweep(sc.topology, sc.truth(), sc.datasheet(), sched[0].p, sched[0].q)
    r = rep.column("r")
    rc = rep.column("rcond")
    plateau = float(np.median(rc[(np.abs(r) > 0.05) & (np.abs(r - 1) > 0.05)]))

    def at(v):
        return float(rc[np.argmin(np.abs(r - v))])
    collapse = max(at(0.0), at(1.0))
    recovered = min(at(0.99), at(1.01))
    ok = (collapse <= plateau * 1e-6 and recovered >= plateau * 1e-2 and r.min() == -0.1 and r.max() == 1.1
          and all(rec["status"] in ("ok", "singular") for rec in rep.records))
    detail = (f"plateau median {plateau:.2e}, RCOND(0) {at(0.0):.2e}, RCOND(1) {at(1.0):.2e}, "
              f"RCOND(0.99) {at(0.99):.2e}, RCOND(1.01) {at(1.01):.2e}")
    return ok, detail, {"rcond": rc}


def criterion_5():
    """nr-ls and bounded-ls agree on the 81-sample noisy campaign."""
    sc = load_scenario("district-campaign")
    snaps = sc.snapshots()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = estimate(EstimationProblem(sc.topology, snaps, sc.datasheet(), config=SolverConfig(max_iter=200)), "nr-ls")
        b = estimate(EstimationProblem(sc.topology, snaps, sc.datasheet(), config=SolverConfig(max_iter=200)),
                     "bounded-ls")
    diff = float(np.max(_rel(a.params.as_vector(), b.params.as_vector()))) * 100
    ok = len(snaps) == 81 and a.converged and b.converged and diff < 0.5
    return ok, f"{len(snaps)} samples, max per-parameter disagreement {diff:.2e}%", {
        "nr_ls": a.params.as_vector(), "bounded_ls": b.params.as_vector()}


def criterion_6():
    """Recovery from rho * truth for rho in {0.01, 0.1, 1, 5}; rho = 100 reported either way."""
    sc = load_scenario("district-campaign")
    snaps = sc.snapshots(noiseless=True)
    rep = rho_sweep(sc.topology, sc.truth(), snaps, [0.01, 0.1, 1.0, 5.0, 100.0])
    must = [r for r in rep.records if r["rho"] <= 5]
    far = [r for r in rep.records if r["rho"] == 100]
    # rho = 100 may fail, but the outcome must be stated explicitly per method
    ok = all(r["recovered"] for r in must) and len(far) == 2 and all(isinstance(r["recovered"], bool) for r in far)
    worst = max(max(r["max_r_error_pct"], r["max_x_error_pct"]) for r in must)
    far_txt = ", ".join(f"{r['method']} {'recovered' if r['recovered'] else 'NOT recovered'} ({r['status']})"
                        for r in far)
    return ok, f"worst error for rho<=5: {worst:.2e}%; rho=100: {far_txt}", {
        "errors": np.array([[r["max_r_error_pct"], r["max_x_error_pct"]] for r in rep.records])}


def criterion_7(seeds=6):
    """Error-reduction metric: exact endpoints and a rising-then-flat curve over sample counts."""
    sc = load_scenario("district-campaign")
    clean = sc.snapshots(noiseless=True)
    ds, truth = sc.datasheet(), sc.truth()
    full = error_reduction(sc.topology, ds, truth, clean)
    none = error_reduction(sc.topology, ds, ds, clean)
    ns = sc.topology.non_slack
    exact = bool(np.allclose(full.percent[ns], 100.0, atol=1e-6) and np.allclose(none.percent[ns], 0.0, atol=1e-12)
                 and np.isnan(full.percent[sc.topology.slack]))

    noisy = sc.snapshots()
    counts = [2, 3, 5, 8, 12, 20, 32, 50, 81]
    cfg = {"nr-ls": SolverConfig(max_iter=200), "bounded-ls": SolverConfig(max_iter=200)}
    curves = {m: [] for m in cfg}
    for seed in range(seeds):
        rep = sample_count_study(sc.topology, ds, noisy, counts, seed=seed, configs=cfg)
        for m in cfg:
            curves[m].append([r.get("mean_reduction_pct", np.nan) for r in rep.records if r["method"] == m])
    shape_ok = True
    parts = []
    med = {}
    for m, rows in curves.items():
        c = np.nanmedian(np.array(rows), axis=0)
        med[m] = c
        rising = bool(np.all(np.diff(c) >= -0.25))
        tail = c[np.array(counts) >= 20]
        flat = bool(np.ptp(tail) < 1.0)
        shape_ok &= rising and flat and c[-1] > c[0]
        parts.append(f"{m} median {c[0]:.1f}% -> {c[-1]:.1f}% (tail spread {np.ptp(tail):.2f} pp)")
    ok = exact and shape_ok
    detail = (f"truth/noiseless {np.nanmin(full.percent):.6f}%, datasheet {np.nanmax(np.abs(none.percent)):.1e}%; "
              + "; ".join(parts))
    return ok, detail, {m: v for m, v in med.items()}


def criterion_8():
    """nr-rms converges to the same parameters for alpha in {0.1, 0.5, 1}."""
    sc = load_scenario("district")
    snaps = sc.snapshots()
    out = {}
    its = {}
    for a in (0.1, 0.5, 1.0):
        rep = estimate(EstimationProblem(sc.topology, snaps, sc.datasheet(),
                                         config=SolverConfig(alpha=a, max_iter=1000)), "nr-rms")
        out[a] = rep.params.as_vector()
        its[a] = rep.iterations
    spread = float(max(np.max(_rel(out[a], out[1.0])) for a in out))
    ok = spread < 1e-6
    return ok, f"max relative spread {spread:.2e}, iterations {its}", {str(a): v for a, v in out.items()}


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6,
            7: criterion_7, 8: criterion_8}
_FIRST = {}


def _run(n):
    ok, detail, outputs = CRITERIA[n]()
    _FIRST.setdefault(n, outputs)
    return ok, detail, outputs


def criterion_9():
    """Repeated runs with fixed seeds reproduce every numerical output exactly."""
    diffs = []
    for n, fn in CRITERIA.items():
        first = _FIRST[n] if n in _FIRST else fn()[2]
        second = fn()[2]
        for key in first:
            if not np.array_equal(np.asarray(first[key]), np.asarray(second[key]), equal_nan=True):
                diffs.append(f"{n}:{key}")
    return not diffs, ("criteria 1-8 reproduced bit for bit" if not diffs else f"differences in {diffs}"), {}


# -- pytest entry points --------------------------------------------------------

@pytest.mark.parametrize("n", sorted(CRITERIA))
def test_criterion(n):
    ok, detail, _ = _run(n)
    _record(n, ok, detail)
    assert ok, detail


def test_criterion_9_determinism():
    ok, detail, _ = criterion_9()
    _record(9, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    results = [_run(n)[:2] for n in sorted(CRITERIA)]
    for n, (ok, detail) in zip(sorted(CRITERIA), results):
        _record(n, ok, detail)
    results.append(criterion_9()[:2])
    _record(9, *results[-1])
    sys.exit(0 if all(ok for ok, _ in results) else 1)
