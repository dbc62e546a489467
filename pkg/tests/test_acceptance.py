"""Acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (shown even when output is captured).
Run alone with: pytest tests/test_acceptance.py -v
"""

import dataclasses
import json
import math
import time

import numpy as np
import pytest

from hetshadow.chart import (CENTER, SADDLE, ChartState, block_diagonal_check, classify_pair, geometry,
                             quad_params, reduced_field, transition_map)
from hetshadow.enclosure import (POTENTIALLY_SUITABLE, SADDLE_VARS, UNSUITABLE, VERY_SUITABLE, WTubeParams,
                                 all_resonant_cubics, build_synthetic_nf_system, enumerate_and_classify,
                                 estimate_K, verify_center_modulus, verify_tube_enclosure)
from hetshadow.hset import ENTRY, EXIT, INTERIOR, OUTSIDE, HSet, block, check_covering, contract
from hetshadow.integrate import integrate_model
from hetshadow.model import (check_hypotheses, ck_model, nonhamiltonian_example, odd_coupling, with_extra)
from hetshadow.shadow import ChainConfig, find_chain, shoot_shadowing_orbit, write_report


@pytest.fixture
def verdict(capsys):
    def say(num, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {num}] {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return say


def test_criterion_1_hypotheses(verdict):
    t0 = time.time()
    worst, drift = 0.0, 0.0
    ok = True
    for model in (ck_model(4), nonhamiltonian_example(4)):
        rep = check_hypotheses(model, sample_count=100, tol=1e-10)
        ok &= rep.passed
        worst = max(worst, max(rep.violations.values()))
        b0 = np.array([math.sqrt(1 - 3e-4), 0.01, 0.01j, 0.01])
        traj = integrate_model(model, b0, (0, 100), rtol=1e-10, bound=None)
        drift = max(drift, traj.stats["max_mass_drift"])
    dt = time.time() - t0
    ok = ok and worst < 1e-10 and drift < 1e-8 and dt < 10
    verdict(1, ok, f"max violation {worst:.1e}, mass drift {drift:.1e}, {dt:.1f} s")


def test_criterion_2_spectral_witness(verdict):
    m = ck_model(5)
    errs = []
    ok = True
    for j in range(1, 6):
        for k in range(1, 6):
            if j == k:
                continue
            q = classify_pair(*quad_params(m, j, k))
            if abs(j - k) == 1:
                ok &= q.kind == SADDLE
                errs.append(abs(q.lambda_or_nu - math.sqrt(3)))
            else:
                ok &= q.kind == CENTER
                errs.append(abs(q.lambda_or_nu - 1.0))
    ok = ok and max(errs) <= 1e-12
    verdict(2, ok, f"adjacent saddles / far centres, max rate error {max(errs):.1e}")


def test_criterion_3_heteroclinic_geometry(verdict):
    m = ck_model(3)
    t = np.linspace(-0.98, 0.98, 50)
    tang = 0.0
    for slope in (math.sqrt(3), -math.sqrt(3)):
        d = complex(1, slope) / 2
        f = reduced_field(m, 1, 2, t * d)
        tang = max(tang, float(np.max(np.abs(f.real * d.imag - f.imag * d.real))))
    m4 = ck_model(4)
    err = 0.0
    for sigma in (0.01, 0.05, 0.1):
        s = ChartState(2, np.zeros(2), np.array([sigma, 0.0]), np.zeros(1, dtype=complex))
        out = transition_map(m4, 2, s)
        target = np.array([0.0, math.sqrt(1 - sigma ** 2)])
        rest = max(np.max(np.abs(out.z_plus)), np.max(np.abs(out.c_star)))
        err = max(err, float(np.max(np.abs(out.z_minus - target))), float(rest))
    verdict(3, tang < 1e-10 and err < 1e-10, f"tangency residual {tang:.1e}, transition error {err:.1e}")


def test_criterion_4_block_diagonal(verdict):
    t0 = time.time()
    worst = 0.0
    for model in (ck_model(4), nonhamiltonian_example(4)):
        for j in range(1, 5):
            worst = max(worst, block_diagonal_check(model, j).max_violation)
    broken = with_extra(ck_model(4), odd_coupling(1.0))
    control = max(block_diagonal_check(broken, j).max_violation for j in range(1, 5))
    dt = time.time() - t0
    ok = worst < 1e-6 and control > 1e-3 and dt < 5
    verdict(4, ok, f"worst forbidden block {worst:.1e}, broken control {control:.1e}, {dt:.2f} s")


def test_criterion_5_classification(verdict):
    t0 = time.time()
    table = enumerate_and_classify(9)
    dt = time.time() - t0
    unsuitable = sum(table.count(UNSUITABLE, v) for v in SADDLE_VARS)
    ps = table.potentially_suitable("M1")
    m2 = [r for r in table.rows if r[3] == "M2"]
    ok = (unsuitable == 0 and ps == [("x-", "y-*x+^2"), ("y+", "y-^2*x+")]
          and table.count(POTENTIALLY_SUITABLE) == 2
          and all(r[4] == VERY_SUITABLE for r in m2) and dt < 1)
    verdict(5, ok, f"unsuitable {unsuitable}, {POTENTIALLY_SUITABLE} {ps}, {len(m2)} M2 rows, {dt:.3f} s")


def test_criterion_6_enclosure(verdict):
    t0 = time.time()
    system = build_synthetic_nf_system(all_resonant_cubics(seed=0), nu=(1.0, 1.5), rho=1.0)
    params = WTubeParams(T=12.0, sigma=0.01, A=3.0)
    params = dataclasses.replace(params, K=estimate_K(system, params))
    tubes = verify_tube_enclosure(system, params, count=20, rho_grid=(0.0, 0.5, 1.0))
    center = verify_center_modulus(system, params, count=20, rho_grid=(0.0, 0.5, 1.0))
    dt = time.time() - t0
    ok = tubes.passed and center.passed and tubes.count == 60 and dt < 60
    verdict(6, ok, f"{tubes.count} trajectories, min slack {min(tubes.relative.values()):.3f}, "
                   f"centre drift {center.worst_log_drift:.3f} < {center.band:.3f}, {dt:.1f} s")


def test_criterion_7_covering_primitives(verdict):
    N = HSet([0.0, 0.0], [block("u", 0, 1.0, EXIT), block("s", 1, 1.0, ENTRY)])
    got = []
    for M in ([[3, 0], [0, 1 / 3]], [[0.5, 0], [0, 1 / 3]], [[-3, 0], [0, 1 / 3]]):
        A = np.array(M, dtype=float)
        v = check_covering(lambda P, A=A: P @ A.T, N, N)
        got.append((v.passed, v.w if v.passed else None))
    maps_ok = got == [(True, 1), (False, None), (True, -1)]

    rng = np.random.default_rng(1)
    N3 = HSet([0.5, -0.2, 0.0], [block("a", 0, 0.3, EXIT), block("b", 1, 0.1, EXIT), block("s", 2, 2.0, ENTRY)])
    R = contract(N3, "b", 0.4)
    q = rng.uniform(-1.2, 1.2, (1000, 2))
    slice_ok = all((R.membership(p) == INTERIOR) == (np.max(np.abs(qq)) < 1 - 1e-9)
                   for p, qq in zip(R.point(q), q))
    off = N3.point(rng.uniform(-0.9, 0.9, (1000, 3)))
    keep = np.abs(N3.internal(off)[:, 1] - 0.4) > 1e-6
    slice_ok &= all(R.membership(p) == OUTSIDE for p in off[keep])
    verdict(7, maps_ok and slice_ok, f"linear verdicts {got}, slice membership on 1000 points ok={slice_ok}")


def test_criterion_8_chain(verdict, tmp_path):
    t0 = time.time()
    rep = find_chain(ck_model(3), ChainConfig(3, 0.05))
    dt = time.time() - t0
    path = tmp_path / "chain_report.json"
    write_report(path, rep)
    data = json.loads(path.read_text())
    margins = [min(v["entry_margin"], v["exit_margin"]) for v in rep.links]
    ok = (rep.passed and rep.T <= 18 and len(rep.links) == 2 * 3 - 1 and min(margins) > 0
          and data["passed"] and dt < 600)
    verdict(8, ok, f"T={rep.T:g}, {len(rep.links)} links, min margin {min(margins):.2e}, {dt:.1f} s")


def test_criterion_9_shadowing(verdict):
    t0 = time.time()
    model = ck_model(4)
    # four modes need the wider section sigma = 0.1
    rep = find_chain(model, ChainConfig(4, 0.1))
    res = shoot_shadowing_orbit(model, ChainConfig(4, 0.1, rep.T), rep)
    dt = time.time() - t0
    d = res.diagnostics
    order = list(d["membership"])
    ok = (rep.passed and d["dominance_order"] == [1, 2, 3, 4] and d["peak_last_mode"] >= 0.8
          and d["entered_all"] and order[0].startswith("N_in~^1") and order[-1].endswith("^4") and dt < 900)
    verdict(9, ok, f"T={rep.T:g}, dominance {d['dominance_order']}, max |b4|^2 {d['peak_last_mode']:.4f}, "
                   f"entered all {d['entered_all']}, {dt:.0f} s")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
