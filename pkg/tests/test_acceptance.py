"""Acceptance suite: one test per criterion, each printing a pass/fail line."""
import os
import time

import numpy as np
import pytest
from conftest import record
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from test_stiffness import affine_start, fd_in_E, neo_hookean_A_oracle, rel

import fe2net.stiffness as stiffness_mod
from fe2net.batch import (NeoHookean, NetworkMaterial, RveLibrary, SubstituteMaterial,
                          batch_response, init_batch, substitute_pk2)
from fe2net.cli import bench_table, main
from fe2net.macrofem import (DirichletBc, NewtonConfig, affine_dirichlet, box_mesh,
                             convergence_order, newton_solve)
from fe2net.network import (FiberLaw, FiberNetwork, NetworkSpec, fiber_sum_stress,
                            generate_network, homogenized_stress, orientation_P2,
                            p2_of_directions)
from fe2net.relax import (ROUNDOFF_FLOOR, OracleInapplicableError, RelaxConfig, RelaxJob,
                          free_residual, implicit_solve, relax_many, relax_solve)
from fe2net.report import read_table
from fe2net.stiffness import constitutive_response, second_pk_stress
from fe2net.tensors import polar_decompose, random_rotation

EXP = FiberLaw("exponential", 5.0)


def uniaxial_bcs(stretch):
    return [DirichletBc("xmin", {0: 0.0}), DirichletBc("ymin", {1: 0.0}),
            DirichletBc("zmin", {2: 0.0}), DirichletBc("xmax", {0: stretch - 1.0})]


def spread(a):
    """Largest element-wise deviation from the first element, relative."""
    a = np.asarray(a)
    return np.abs(a - a[0]).max() / np.abs(a[0]).max()


# --- 1: dynamic relaxation vs the implicit oracle ---------------------------

def test_criterion_1_relaxation_matches_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    eps = 1e-6
    worst_u, worst_r, n = 0.0, 0.0, 0
    seed = 0
    while n < 10:
        net = generate_network(NetworkSpec(n_nodes=20, n_fibers=60), seed)
        seed += 1
        assert net.layout.n_free <= 60
        law = FiberLaw() if n % 2 else EXP
        F = np.eye(3) + 0.03 * rng.normal(size=(3, 3))
        try:
            ref = implicit_solve(net, law, F)
        except OracleInapplicableError:
            continue
        state, rep = relax_solve(net, law, F)
        assert rep.converged
        react = np.linalg.norm(state.f_int[state.n_free:])
        eps_eff = max(eps * max(react, 1e-12 * net.EA.max()), ROUNDOFF_FLOOR * net.EA.max())
        worst_u = max(worst_u, np.abs(state.u - ref.u).max())
        worst_r = max(worst_r, free_residual(net, law, state) / eps_eff)
        n += 1
    wall = time.perf_counter() - t0
    ok = worst_u <= 1e-6 and worst_r <= 1.0 and wall < 30
    record(1, ok, f"max |u - u_oracle| {worst_u:.1e}, max residual/eps_eff {worst_r:.1e}, "
                  f"{n} networks, {wall:.1f} s")
    assert ok


# --- 2: tangent stiffness ----------------------------------------------------

def test_criterion_2_tangent_stiffness(small_net, monkeypatch):
    t0 = time.perf_counter()
    assert small_net.n_nodes == 20
    calls = []
    real = stiffness_mod.relax_many

    def counting(jobs, *a, **k):
        calls.append(len(jobs))
        return real(jobs, *a, **k)

    monkeypatch.setattr(stiffness_mod, "relax_many", counting)
    law = FiberLaw("exponential", 3.0)
    F = np.eye(3) + np.array([[0.04, 0.02, 0], [0.01, -0.02, 0.015], [0, -0.01, 0.02]])
    _, U = polar_decompose(F)
    res = constitutive_response(small_net, law, U)
    solves = sum(calls)
    monkeypatch.undo()
    E = 0.5 * (U @ U - np.eye(3))
    err_net = rel(res.A, fd_in_E(lambda G: second_pk_stress(small_net, law, G), E, 1e-4))

    rng = np.random.default_rng(7)
    p = NeoHookean(0.8, 1.3)
    err_sub = 0.0
    for _ in range(5):
        _, Us = polar_decompose(np.eye(3) + 0.2 * rng.normal(size=(3, 3)))
        A = stiffness_mod.tangent_by_probing(lambda G: substitute_pk2(G, p), Us, h=1e-7)
        err_sub = max(err_sub, rel(A, neo_hookean_A_oracle(Us, p)))
    wall = time.perf_counter() - t0
    ok = err_net <= 1e-3 and err_sub <= 1e-6 and solves == 7 == res.n_solves and wall < 120
    record(2, ok, f"network {err_net:.1e}, substitute {err_sub:.1e}, {solves} solves, "
                  f"{wall:.1f} s")
    assert ok


# --- 3: rotation invariance --------------------------------------------------

def test_criterion_3_rotation_invariance(medium_net):
    t0 = time.perf_counter()
    rng = np.random.default_rng(33)
    F = np.eye(3) + 0.08 * rng.normal(size=(3, 3))
    ref = second_pk_stress(medium_net, EXP, F, drop_rotation=False,
                           warm=affine_start(medium_net, F))
    worst = 0.0
    for _ in range(10):
        G = random_rotation(rng) @ F
        S = second_pk_stress(medium_net, EXP, G, drop_rotation=False,
                             warm=affine_start(medium_net, G))
        worst = max(worst, rel(S, ref))
    wall = time.perf_counter() - t0
    ok = worst <= 1e-8 and wall < 60
    record(3, ok, f"max relative change {worst:.1e} over 10 rotations, {wall:.1f} s")
    assert ok


# --- 4: two forms of the homogenized stress ------------------------------------

def test_criterion_4_stress_forms_agree():
    rng = np.random.default_rng(4)
    laws = (FiberLaw(), EXP, FiberLaw(buckling=True), FiberLaw("exponential", 2.0, True))
    worst, n = 0.0, 0
    for seed in range(6):
        net = generate_network(NetworkSpec(n_nodes=30, n_fibers=90), seed)
        for law in laws:
            F = np.eye(3) + 0.05 * rng.normal(size=(3, 3))
            state, rep = relax_solve(net, law, F)
            if not rep.converged:
                continue
            a = homogenized_stress(net, state)
            b = fiber_sum_stress(net, law, state)
            worst = max(worst, rel(a, b))
            n += 1
    ok = worst <= 1e-8 and n >= 20
    record(4, ok, f"max relative difference {worst:.1e} over {n} converged states")
    assert ok


# --- 5: macroscale patch test ----------------------------------------------------

def test_criterion_5_patch_test():
    t0 = time.perf_counter()
    mesh = box_mesh()
    assert mesh.n_elements == 6
    sub = newton_solve(mesh, uniaxial_bcs(1.2), SubstituteMaterial()).increments[-1]
    err_sub = max(spread(sub.F), spread(sub.sigma))

    # affine data on the whole boundary; an anisotropic RVE under rollers
    # would legitimately shear. The 2x2x2 cube has a free centre node.
    net = generate_network(NetworkSpec(n_nodes=30, n_fibers=90), 2)
    Fa = np.array([[1.1, 0.02, 0.0], [0.0, 0.97, 0.01], [0.0, 0.0, 1.0]])
    err_net = 0.0
    for div in (1, 2):
        mesh = box_mesh((1, 1, 1), (div,) * 3)
        mat = NetworkMaterial(init_batch(mesh, RveLibrary([net]), seed=0), EXP)
        inc = newton_solve(mesh, [affine_dirichlet(mesh, Fa, "boundary")], mat,
                           NewtonConfig(n_steps=2)).increments[-1]
        err_net = max(err_net, spread(inc.F), spread(inc.sigma), rel(inc.F[0], Fa))
    wall = time.perf_counter() - t0
    ok = err_sub <= 1e-8 and err_net <= 1e-5 and wall < 300
    record(5, ok, f"substitute {err_sub:.1e}, network {err_net:.1e}, {wall:.1f} s")
    assert ok


# --- 6: Newton convergence order -------------------------------------------------

def test_criterion_6_newton_order():
    orders = []
    for mesh, stretch in ((box_mesh(), 1.2), (box_mesh((1, 1, 1), (2, 2, 2)), 1.3)):
        sol = newton_solve(mesh, uniaxial_bcs(stretch), SubstituteMaterial(NeoHookean(1.0, 2.0)))
        orders.append(convergence_order(sol.increments[-1].residuals))
    ok = min(orders) >= 1.7
    record(6, ok, "terminal orders " + ", ".join(f"{q:.2f}" for q in orders))
    assert ok


# --- 7: batch equivalence ----------------------------------------------------------

def test_criterion_7_batch_bitwise():
    nets = [generate_network(NetworkSpec(n_nodes=20, n_fibers=60), s) for s in range(4)]
    lib = RveLibrary(nets)
    rng = np.random.default_rng(77)
    batch = init_batch(np.zeros(64, dtype=int), lib, seed=3)
    Fs = [np.eye(3) + 0.03 * rng.normal(size=(3, 3)) for _ in range(64)]
    seq = [constitutive_response(batch.network(k), EXP, F) for k, F in enumerate(Fs)]
    bad = []
    for size in (1, 8, 64):
        for workers in (1, 4, 8):
            sub = init_batch(np.zeros(size, dtype=int), lib, seed=3)
            res = batch_response(sub, Fs[:size], EXP, workers=workers, update=False)
            for k in range(size):
                same = (res.sigma[k].tobytes() == seq[k].sigma.tobytes()
                        and res.C[k].tobytes() == seq[k].C.tobytes())
                if not same:
                    bad.append((size, workers, k))
    record(7, not bad, f"{len(bad)} mismatching points over sizes 1, 8, 64 and workers 1, 4, 8")
    assert not bad


# --- 8: concurrency scaling ------------------------------------------------------------

def test_criterion_8_scaling_shape():
    cores = os.cpu_count() or 1
    net = generate_network(NetworkSpec(n_nodes=200, n_fibers=600), 0)
    F = np.diag([1.05, 1.0, 1.0])
    cfg = RelaxConfig()
    relax_many([RelaxJob(net, F)], EXP, cfg)
    sizes = [1, 2, 4, 8, 16]
    workers = [1, 8] if cores >= 8 else [1]
    rows = bench_table(net, EXP, cfg, F, sizes, workers, repeats=3)
    self_sp = [r[5] for r in rows if r[1] == 1]
    # monotone within noise, then flat
    shape_ok = all(b >= 0.9 * a for a, b in zip(self_sp, self_sp[1:]))
    shape_ok &= abs(self_sp[-1] - self_sp[-2]) <= 0.1 * self_sp[-2]
    detail = "self-speedup " + ", ".join(f"{s:.2f}" for s in self_sp)
    if cores < 8:
        record(8, "PASS" if shape_ok else "FAIL",
               f"{detail}; >=4x on 8 workers NOT MEASURED: only {cores} core(s)")
        assert shape_ok
        pytest.skip(f"speedup part needs at least 8 cores, found {cores}")
    t1 = [r[3] for r in rows if r[1] == 1 and r[0] == 16][0]
    t8 = [r[3] for r in rows if r[1] == 8 and r[0] == 16][0]
    rows64 = bench_table(net, EXP, cfg, F, [64], [1, 8], repeats=1)
    speedup = rows64[0][3] / rows64[1][3]
    ok = shape_ok and speedup >= 4.0
    record(8, ok, f"{detail}; 64 RVEs on 8 workers {speedup:.1f}x (16 RVEs {t1 / t8:.1f}x)")
    assert ok


# --- 9 and 10: orientation and the end-to-end pull ----------------------------------------

@given(arrays(float, (12, 3), elements=st.floats(-1, 1)),
       arrays(float, 12, elements=st.floats(0.01, 5)))
def test_p2_always_in_range(n, w):
    norms = np.linalg.norm(n, axis=1)
    if norms.min() < 1e-3:
        return
    p2 = p2_of_directions(n / norms[:, None], w)
    assert -0.5 <= p2 <= 1.0


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """Default desk pull run through the command line."""
    out = tmp_path_factory.mktemp("e2e")
    cfg = out / "pull.ini"
    cfg.write_text("[law]\nkind = exponential\nnonlinearity = 5\n[run]\nfigures = yes\n")
    t0 = time.perf_counter()
    code = main(["multiscale", "--config", str(cfg), "--out", str(out / "run")])
    return code, out / "run", time.perf_counter() - t0


def test_criterion_9_orientation(e2e):
    X = np.array([[-0.5, 0, 0], [0.5, 0, 0], [0, -0.5, 0], [0, 0.5, 0]])
    aligned = FiberNetwork(X[:2], [[0, 1]], 1, 1)
    perp = FiberNetwork(X[2:], [[0, 1]], 1, 1)
    fixtures = orientation_P2(aligned) == 1.0 and orientation_P2(perp) == -0.5
    code, run, _ = e2e
    _, _, data = read_table(run / "p2_distribution.csv", "p2_distribution")
    v0, v1 = data[:, 1].var(), data[:, 2].var()
    in_range = bool(np.all((data[:, 1:] >= -0.5) & (data[:, 1:] <= 1.0)))
    ok = fixtures and in_range and code == 0 and v1 > v0
    record(9, ok, f"fixtures 1 and -1/2 exact: {fixtures}; P2 variance {v0:.3e} -> {v1:.3e}")
    assert ok


def test_criterion_10_end_to_end(e2e):
    code, run, wall = e2e
    _, cols, h = read_table(run / "stress_strain.csv", "stress_strain")
    strain, stress = h[:, 2], h[:, 4]
    _, _, tan = read_table(run / "tangent_stiffness.csv", "tangent_stiffness")
    n_el = len(read_table(run / "p2_distribution.csv")[2])
    monotone = bool(np.all(np.diff(stress) > 0))
    stiffening = bool(np.all(np.diff(tan[:, 1]) > 0))
    complete = code == 0 and h[-1, 1] == pytest.approx(1.0) and strain[-1] == pytest.approx(0.25)
    # informative: log-log slope of tangent against stress over the last decade
    s, k = tan[:, 0], tan[:, 1]
    last = s >= s[-1] / 10
    slope = np.polyfit(np.log(s[last]), np.log(k[last]), 1)[0] if last.sum() >= 2 else np.nan
    ok = complete and monotone and stiffening and 150 <= n_el <= 250 and wall < 1800
    record(10, ok, f"{n_el} tets, {len(h) - 1} increments to strain {strain[-1]:.3f}, "
                   f"monotone {monotone}, stiffening {stiffening}, {wall:.0f} s; "
                   f"informative log-log slope {slope:.2f} (target 0.5 +- 0.15)")
    assert (run / "stress_strain.png").exists() and (run / "p2_distribution.png").exists()
    assert ok
