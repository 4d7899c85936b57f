"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest
from scipy.special import logsumexp

from gls.imaging import Image, grid_instance, poisson_blend, read_netpbm, write_netpbm
from gls.instance import (Group, Instance, obj, parse_instance, quad_min, random_instance,
                          serialize_instance)
from gls.ipm import BarrierPoint, IpmConfig, barrier_grad, hessian_solve, solve_ipm
from gls.linalg import assemble_laplacian
from gls.modeling import (l1_expand, l22_fidelity_solve, mincut_encoding,
                          shortest_path_instance)
from gls.mw import MwConfig, solve_mw
from corpus import graph_case
from oracles import (central_diff_grad, dense_barrier, dense_groups, dense_newton_matrix,
                     dense_poisson, dijkstra, max_flow, subgradient_oracle)


@pytest.fixture
def report(capsys):
    def _report(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:2d}] {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, detail
    return _report


def _ipm_exact(inst):
    return solve_ipm(inst, IpmConfig(eps=1e-6))


# --- 1 ----------------------------------------------------------------------

def test_criterion_01_normal_equations(report):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        inst = random_instance(int(rng.integers(2, 51)), int(rng.integers(1, 9)), rng)
        w = rng.uniform(0.1, 10.0, size=inst.k)
        x, _ = quad_min(inst, w)
        mats, ss = dense_groups(inst)
        A = sum(M / wi for M, wi in zip(mats, w))
        b = sum(M @ s / wi for M, s, wi in zip(mats, ss, w))
        worst = max(worst, np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300))
    elapsed = time.perf_counter() - start
    report(1, "normal equations", worst <= 1e-8 and elapsed <= 30,
           f"max relative residual {worst:.2e} over 200 instances in {elapsed:.1f}s")


# --- 2, 3, 7 share the strict-mode runs ------------------------------------

@pytest.fixture(scope="module")
def strict_runs():
    start = time.perf_counter()
    runs = []
    for seed in range(20):
        rng = np.random.default_rng(5000 + seed)
        # k = 1 instances have OPT = 0, which makes a relative bound vacuous
        inst = random_instance(10, 2 + seed % 2, rng)
        opt = solve_ipm(inst, IpmConfig(eps=1e-9)).objective
        oracle, _ = subgradient_oracle(inst)
        mw = solve_mw(inst, MwConfig(eps=0.2, strict_mode=True, record_weights=True))
        runs.append((inst, opt, oracle, mw))
    return runs, time.perf_counter() - start


def test_criterion_02_strict_mw_bound(report, strict_runs):
    runs, elapsed = strict_runs
    agree = max(abs(oracle - opt) / opt for _, opt, oracle, _ in runs)
    ratio = max(mw.objective / opt for _, opt, _, mw in runs)
    iters = sorted({mw.iterations for *_, mw in runs})
    ok = agree <= 1e-3 and ratio <= 1 + 10 * 0.2 and elapsed <= 120
    report(2, "strict MW bound", ok,
           f"max obj/OPT {ratio:.4f} (bound 3.0), oracle agreement {agree:.1e}, "
           f"iterations {iters}, {elapsed:.1f}s")


def test_criterion_03_mw_invariants(report, strict_runs):
    runs, _ = strict_runs
    slack = 1e-7
    failures = []
    checked = 0
    for idx, (inst, _, _, mw) in enumerate(runs):
        eps, rho, k = mw.info["eps"], mw.info["rho"], inst.k
        logs = mw.info["log_weights"]
        prev_log_opt2 = math.inf
        log_scale = 0.0  # of the weights entering the current step
        for t, row in enumerate(mw.trace):
            checked += 1
            if row["obj"] > row["lambda"] * (1 + slack):
                failures.append((idx, t, "lambda >= obj"))
            if row["mu"] > (1 + eps * (1 + 2 * eps) / rho) * row["mu_prev"] * (1 + slack):
                failures.append((idx, t, "mu growth"))
            if row["min_weight_share"] < eps / k * (1 - slack):
                failures.append((idx, t, "weight floor"))
            log_opt2 = math.log(row["opt2"]) - log_scale
            if log_opt2 > prev_log_opt2 + slack:
                failures.append((idx, t, "opt2 monotone"))
            prev_log_opt2 = log_opt2
            if t + 1 < len(mw.trace):
                log_scale = float(logsumexp(logs[t])) - math.log(mw.trace[t + 1]["mu_prev"])
    report(3, "MW invariants", not failures,
           f"{checked} iterations checked, {len(failures)} violations {failures[:3]}")


# --- 4 ----------------------------------------------------------------------

def test_criterion_04_shortest_path(report):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        g, s, t = graph_case(seed, 20)
        inst, decode = shortest_path_instance(g, s, t)
        worst = max(worst, abs(decode(_ipm_exact(inst).x) - dijkstra(g.n, g.edges, s, t)))
    elapsed = time.perf_counter() - start
    report(4, "shortest path within 1", worst <= 1 and elapsed <= 60,
           f"max |decode - dijkstra| {worst:.2e} over 100 graphs in {elapsed:.1f}s")


# --- 5 ----------------------------------------------------------------------

def test_criterion_05_mincut(report):
    start = time.perf_counter()
    worst = 0.0
    mismatched = 0
    for seed in range(100):
        g, s, t = graph_case(1000 + seed, 15)
        enc = mincut_encoding(g, s, t)
        x = _ipm_exact(enc.instance).x if enc.instance is not None else np.zeros(0)
        value, side = enc.decode(x)
        worst = max(worst, abs(value - max_flow(g.n, g.edges, s, t)))
        mismatched += enc.cut_value(set(side)) != value
    elapsed = time.perf_counter() - start
    report(5, "min cut within 1", worst <= 1 and not mismatched and elapsed <= 60,
           f"max |decode - maxflow| {worst:.2e}, {mismatched} partition mismatches, "
           f"{elapsed:.1f}s")


# --- 6 ----------------------------------------------------------------------

def test_criterion_06_hessian_and_gradient(report):
    rng = np.random.default_rng(6)
    worst_solve = 0.0
    worst_grad = 0.0
    for _ in range(100):
        inst = random_instance(int(rng.integers(2, 31)), int(rng.integers(1, 6)), rng)
        x = rng.normal(size=inst.n)
        y = inst.group_norms(x) + rng.uniform(0.2, 2.0, size=inst.k)
        p = BarrierPoint(x, y, float(rng.uniform(0.5, 20.0)))
        rhs = rng.normal(size=inst.n + inst.k)
        dx, dy = hessian_solve(inst, p, rhs[:inst.n], rhs[inst.n:])
        ref = np.linalg.solve(dense_newton_matrix(inst, x, y), rhs)
        got = np.concatenate([dx, dy])
        worst_solve = max(worst_solve, np.linalg.norm(got - ref) / np.linalg.norm(ref))

        gx, gy = barrier_grad(inst, p)
        z = np.concatenate([x, y])
        fd = central_diff_grad(lambda v: dense_barrier(inst, v[:inst.n], v[inst.n:], p.t), z)
        g = np.concatenate([gx, gy])
        worst_grad = max(worst_grad, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1.0))
    report(6, "Newton system and gradient", worst_solve <= 1e-6 and worst_grad <= 1e-4,
           f"hessian_solve rel err {worst_solve:.1e}, gradient rel err {worst_grad:.1e}")


# --- 7 ----------------------------------------------------------------------

def test_criterion_07_ipm_certificate(report, strict_runs):
    runs, _ = strict_runs
    worst = -math.inf
    for inst, _, oracle, _ in runs:
        sol = solve_ipm(inst, IpmConfig(eps=1e-4))
        worst = max(worst, sol.info["sum_y"] - oracle)
    report(7, "IPM certificate", worst <= 1e-4 + 1e-6,
           f"max sum(y) - OPT_oracle {worst:.2e} (limit 1.01e-4)")


# --- 8 ----------------------------------------------------------------------

def test_criterion_08_denoise_convergence(report):
    rng = np.random.default_rng(1)
    clean = np.zeros((64, 64))
    clean[16:48, 16:48] = 1.0
    clean[8:24, 40:60] = 0.5
    noisy = np.clip(clean + rng.normal(scale=0.25, size=clean.shape), 0.0, 1.0)
    inst = grid_instance(Image(noisy), "aniso", 0.03, sqrt_fidelity=True)
    ref = solve_ipm(inst, IpmConfig(eps=1e-4)).objective
    mw = solve_mw(inst, MwConfig(eps=0.01, max_iters_override=30))
    gap = (mw.objective - ref) / ref
    out_err = float(((np.clip(mw.x, 0, 1).reshape(64, 64) - clean) ** 2).sum())
    in_err = float(((noisy - clean) ** 2).sum())
    ok = gap <= 0.01 and mw.iterations <= 30 and out_err < in_err
    report(8, "MW denoise convergence", ok,
           f"{mw.iterations} iterations, gap to IPM {100 * gap:.2f}%, "
           f"error {out_err:.1f} vs noisy {in_err:.1f}")


# --- 9 ----------------------------------------------------------------------

def test_criterion_09_poisson_blend(report):
    mask = np.zeros((8, 8), dtype=bool)
    mask[2:6, 2:6] = True
    flat = poisson_blend(Image(np.zeros((8, 8))), Image(np.full((8, 8), 0.25)), mask)
    dev = float(np.abs(flat.data - 0.25).max())
    rng = np.random.default_rng(9)
    src, dst = rng.random((8, 8)), rng.random((8, 8))
    out = poisson_blend(Image(src), Image(dst), mask).data[:, :, 0]
    ref = dense_poisson(src, dst, mask, (0, 0))
    rel = float(np.linalg.norm(out - ref) / np.linalg.norm(ref))
    report(9, "Poisson blend", dev <= 1e-7 and rel <= 1e-6,
           f"constant-case deviation {dev:.1e}, dense-oracle rel err {rel:.1e}")


# --- 10 ---------------------------------------------------------------------

def test_criterion_10_fidelity_variants(report):
    one = Instance(1, [Group(assemble_laplacian(1, (), [(0, 1.0)]), [0.0])])
    x = l22_fidelity_solve(one, [4.0], method="nested").x[0]
    rng = np.random.default_rng(10)
    exact = 0
    worst = 0.0
    for _ in range(100):
        base = random_instance(int(rng.integers(2, 15)), int(rng.integers(1, 5)), rng)
        s = rng.normal(size=base.n)
        z = rng.normal(size=base.n)
        ex = l1_expand(base, s)
        norms = ex.group_norms(z)
        exact += (np.array_equal(norms[:base.k], base.group_norms(z))
                  and np.array_equal(norms[base.k:], np.abs(z - s)))
        direct = obj(base, z) + float(np.abs(z - s).sum())
        worst = max(worst, abs(obj(ex, z) - direct) / direct)
    ok = abs(x - 3.5) <= 1e-3 and exact == 100 and worst <= 1e-13
    report(10, "fidelity variants", ok,
           f"nested search x={x:.6f}, {exact}/100 groupwise-exact expansions, "
           f"total rel diff {worst:.1e} (summation order)")


# --- 11 ---------------------------------------------------------------------

def test_criterion_11_round_trips(report):
    rng = np.random.default_rng(11)
    inst_ok = img_ok = 0
    worst_q = 0.0
    formats = [("P2", 1), ("P5", 1), ("P3", 3), ("P6", 3)]
    for case in range(100):
        inst = random_instance(int(rng.integers(1, 20)), int(rng.integers(1, 6)), rng)
        text = serialize_instance(inst)
        back = parse_instance(text)
        z = rng.normal(size=inst.n)
        inst_ok += serialize_instance(back) == text and obj(back, z) == obj(inst, z)

        fmt, ch = formats[case % 4]
        maxval = (255, 65535, 1000, 7)[(case // 4) % 4]
        img = Image(rng.random((int(rng.integers(1, 17)), int(rng.integers(1, 17)), ch)))
        got = read_netpbm(write_netpbm(img, fmt, maxval)).data
        err = float(np.abs(got - img.data).max()) * 2 * maxval
        worst_q = max(worst_q, err)
        img_ok += err <= 1 + 1e-9
    report(11, "format round trips", inst_ok == 100 and img_ok == 100,
           f"{inst_ok}/100 instance files, {img_ok}/100 images "
           f"(worst error {worst_q:.3f} half-steps)")
