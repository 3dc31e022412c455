"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed again in the terminal summary)
and then asserts, so a failing criterion also fails the test run.
"""

import math
import time

import numpy as np
import pytest

from hjblearn import dataset as ds
from hjblearn import rlh, slh
from hjblearn.cli import main
from hjblearn.nn import Mlp
from hjblearn.ode import IntegrationGrid, integrate_rk4
from hjblearn.oracle import cycloid_initial_costate, solve_cycloid_bc
from hjblearn.problems import BoundaryConditionSet, get_problem, hamiltonian
from hjblearn.shooting import CostateGuess, boundary_residual, refine_newton, rollout

BC_BRACH = BoundaryConditionSet([0.0], [1.0], 1.0)
BC_HYPER = BoundaryConditionSet([1.0], [1.5], 25.0)


def test_c01_integrator_order(criterion):
    t0 = time.perf_counter()

    def err(n):
        out = integrate_rk4(lambda t, y: y, [1.0], IntegrationGrid(0.0, 1.0, step_count=n))
        return abs(out.final_state[0] - math.e)

    ratio = err(100) / err(200)
    elapsed = time.perf_counter() - t0
    ok = 14.0 <= ratio <= 18.0 and elapsed < 1.0
    assert criterion(1, ok, f"RK4 error ratio {ratio:.3f} (want [14, 18]), {elapsed:.3f}s")


def test_c02_gradient_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    acts = ["sigmoid", "tanh", "tansig", "linear"]
    worst = 0.0
    n_arch = 25
    for _ in range(n_arch):
        depth = int(rng.integers(1, 4))
        sizes = [int(s) for s in rng.integers(1, 7, depth + 1)]
        net = Mlp.create(sizes, [acts[int(i)] for i in rng.integers(0, 4, depth)], rng)
        for layer in net.layers:
            layer.bias = rng.normal(size=layer.bias.shape)
        x = rng.normal(size=(3, sizes[0]))
        up = rng.normal(size=(3, sizes[-1]))
        g = net.flat_gradient(x, up)
        p0 = net.get_params()
        h = 1e-6
        fd = np.empty_like(p0)
        for i in range(p0.size):
            p = p0.copy(); p[i] += h; net.set_params(p)
            fp = np.sum(up * net.forward(x))
            p[i] -= 2 * h; net.set_params(p)
            fd[i] = (fp - np.sum(up * net.forward(x))) / (2 * h)
        net.set_params(p0)
        worst = max(worst, float(np.max(np.abs(g - fd)) / max(1.0, np.max(np.abs(fd)))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-5 and elapsed < 10.0
    assert criterion(2, ok, f"{n_arch} architectures, worst relative error {worst:.2e}, "
                            f"{elapsed:.2f}s")


def test_c03_costate_consistency(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst_rate, worst_stat = 0.0, 0.0
    h = 1e-6
    for name in ("brachistochrone", "hypersensitive"):
        p = get_problem(name)
        for _ in range(100):
            if name == "brachistochrone":
                y = rng.uniform(0.05, 2.0)
                x = np.array([y])
                lam = np.array([-rng.uniform(0.05, 0.95) / math.sqrt(2 * 9.81 * y)])
            else:
                x = rng.uniform(-2, 2, 1)
                lam = rng.uniform(-3, 3, 1)
            u = p.optimal_control(x, lam)
            ref = -(hamiltonian(p, x + h, lam, u) - hamiltonian(p, x - h, lam, u)) / (2 * h)
            got = p.costate_rate(x, lam)[0]
            worst_rate = max(worst_rate, abs(got - ref) / max(1.0, abs(ref)))
            dh = (hamiltonian(p, x, lam, u + h) - hamiltonian(p, x, lam, u - h)) / (2 * h)
            worst_stat = max(worst_stat, abs(float(dh)))
    elapsed = time.perf_counter() - t0
    ok = worst_rate <= 1e-5 and worst_stat <= 1e-6 and elapsed < 5.0
    assert criterion(3, ok, f"200 points, costate rel err {worst_rate:.1e}, "
                            f"|dH/du| {worst_stat:.1e}, {elapsed:.2f}s")


def test_c04_brachistochrone_oracle(criterion):
    t0 = time.perf_counter()
    problem = get_problem("brachistochrone")
    sol = solve_cycloid_bc(BC_BRACH)
    guess = cycloid_initial_costate(sol, BC_BRACH, problem)
    traj = rollout(problem, BC_BRACH, guess)
    res = boundary_residual(traj, BC_BRACH)
    rel = abs(traj.objective - sol.transit_time) / sol.transit_time
    elapsed = time.perf_counter() - t0
    ok = res < 1e-3 and rel < 0.01 and elapsed < 10.0
    assert criterion(4, ok, f"lambda0 {guess.lambda0[0]:.8f}, residual {res:.1e}, "
                            f"J {traj.objective:.6f} vs transit {sol.transit_time:.6f} "
                            f"({100 * rel:.3f}%), {elapsed:.1f}s")


def test_c05_slh_brachistochrone(criterion):
    t0 = time.perf_counter()
    problem = get_problem("brachistochrone")
    gen = ds.generate(ds.DatasetManifest.default("brachistochrone", 2100, seed=5))
    train, test = ds.split(gen.records, (2000 / 2100, 100 / 2100), seed=0)
    model, log = slh.train_slh(problem, train, test)
    residuals = np.array([slh.solve(model, problem, r.bc(1)).residual for r in test])
    solved = int(np.sum(residuals < 1e-3))
    elapsed = time.perf_counter() - t0
    ok = (len(train) == 2000 and log.best_test_mse <= 1e-8 and solved >= 95
          and elapsed < 300.0)
    assert criterion(5, ok, f"train {len(train)}, test MSE {log.best_test_mse:.2e}, "
                            f"{solved}/{len(test)} held-out residual < 1e-3, {elapsed:.0f}s")


@pytest.fixture(scope="module")
def hyper_model():
    t0 = time.perf_counter()
    problem = get_problem("hypersensitive")
    manifest = ds.DatasetManifest.default("hypersensitive", 300, seed=5, n_per_phase=6)
    gen = ds.generate(manifest)
    train, test = ds.split(gen.records, (0.8, 0.2), seed=0)
    model, logs = slh.train_slh_segmented(problem, train, test, manifest)
    return problem, model, logs, test, time.perf_counter() - t0


def test_c06_slh_hypersensitive(criterion, hyper_model):
    problem, model, logs, test, build = hyper_model
    t0 = time.perf_counter()
    res = slh.solve(model, problem, BC_HYPER)
    test_res = np.array([slh.solve(model, problem, r.bc(1)).residual for r in test])
    frac = float(np.mean(test_res < 1e-2))
    elapsed = build + time.perf_counter() - t0
    ok = (len(model.nets) == 13 and res.residual < 1e-2 and logs[0].best_test_mse <= 1e-6
          and elapsed < 600.0)
    assert criterion(6, ok, f"13 segments, residual {res.residual:.1e} at x0=1 xf=1.5 tf=25, "
                            f"first-net test MSE {logs[0].best_test_mse:.1e}, "
                            f"test-set success {100 * frac:.0f}%, solve {res.wall_time:.3f}s, "
                            f"{elapsed:.0f}s")


def test_c07_sensitivity(criterion, hyper_model):
    problem, model, _, _, _ = hyper_model
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    low, high = problem.action_box
    starts = rng.uniform(low[0], high[0], 20)
    failures = 0
    for lam in starts:
        out = refine_newton(problem, BC_HYPER, CostateGuess([lam]), max_iters=20, tol=1e-2)
        failures += int(not out.residual < 1e-2)
    seg = slh.solve(model, problem, BC_HYPER)
    elapsed = time.perf_counter() - t0
    ok = failures >= 15 and seg.residual < 1e-2 and elapsed < 300.0
    assert criterion(7, ok, f"single-segment Newton failed {failures}/20 starts, "
                            f"segmented residual {seg.residual:.1e}, {elapsed:.0f}s")


def _rlh_run(seed, profile):
    problem = get_problem("brachistochrone")
    cfg = rlh.RlhConfig.profile(profile, seed=seed)
    t0 = time.perf_counter()
    out = rlh.train_rlh(problem, rlh.BcSampler.fixed(BC_BRACH), cfg)
    elapsed = time.perf_counter() - t0
    res = boundary_residual(rollout(problem, BC_BRACH, out.best_action), BC_BRACH)
    first, last = rlh.learning_signal(out.rewards)
    return res, first, last, elapsed


def test_c08_rlh_brachistochrone(criterion):
    runs = [_rlh_run(seed, "paper") for seed in range(3)]
    hits = sum(r[0] < 2e-2 for r in runs)
    learned = all(r[2] < r[1] for r in runs)
    smoke = _rlh_run(0, "smoke")
    smoke_ok = smoke[2] < smoke[1] and smoke[3] < 120.0
    ok = hits >= 2 and learned and smoke_ok
    detail = "; ".join(f"seed {i}: best residual {r[0]:.1e}, reward {r[1]:.1f}->{r[2]:.1f}, "
                       f"{r[3]:.0f}s" for i, r in enumerate(runs))
    assert criterion(8, ok, f"{hits}/3 seeds < 2e-2 ({detail}); smoke reward "
                            f"{smoke[1]:.1f}->{smoke[2]:.1f} in {smoke[3]:.0f}s")


def test_c09_reward_cases(criterion):
    t0 = time.perf_counter()
    cfg = rlh.RewardConfig()
    eps = 1e-9
    probes = [(cfg.l1 - eps, rlh.CASE_NEAR), (cfg.l1, rlh.CASE_NEAR), (cfg.l1 + eps, rlh.CASE_FAR),
              (cfg.l2 - eps, rlh.CASE_REACHED), (cfg.l2, rlh.CASE_REACHED),
              (cfg.l2 + eps, rlh.CASE_NEAR)]
    cases_ok = all(rlh.reward_case(r, 0.6, cfg)[1] == want for r, want in probes)
    mem = rlh.ReplayMemory(10, 10, 3, 1, r_l=5.0)
    at = mem.remember(rlh.Transition(np.zeros(3), [0.0], 5.0))
    below = mem.remember(rlh.Transition(np.zeros(3), [0.0], 5.0 - 1e-12))
    elapsed = time.perf_counter() - t0
    ok = cases_ok and not at and below and elapsed < 1.0
    assert criterion(9, ok, f"six boundary probes {'match' if cases_ok else 'MISMATCH'}, "
                            f"D_g strict (r = R_l rejected: {not at}, r < R_l kept: {below}), "
                            f"{elapsed:.3f}s")


def test_c10_reproducibility(criterion, tmp_path):
    data = tmp_path / "data"
    assert main(["gen-data", "--problem", "brachistochrone", "--n", "80", "--seed", "4",
                 "--out", str(data)]) == 0
    runs = []
    for k in range(2):
        slh_dir, rlh_dir = tmp_path / f"slh{k}", tmp_path / f"rlh{k}"
        assert main(["train-slh", "--data", str(data), "--seed", "9", "--profile", "smoke",
                     "--out", str(slh_dir)]) == 0
        assert main(["train-rlh", "--problem", "brachistochrone", "--episodes", "100",
                     "--seed", "9", "--profile", "smoke", "--out", str(rlh_dir)]) == 0
        runs.append((slh_dir, rlh_dir))
    mismatched = []
    compared = 0
    for a, b in zip(runs[0], runs[1]):
        for f in sorted(p.name for p in a.iterdir()):
            compared += 1
            if (a / f).read_bytes() != (b / f).read_bytes():
                mismatched.append(f)
    ok = not mismatched
    assert criterion(10, ok, f"{compared} log/checkpoint files compared across re-runs, "
                             f"{len(mismatched)} differ {mismatched if mismatched else ''}")
