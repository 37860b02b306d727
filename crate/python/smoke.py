#!/usr/bin/env python3
"""Builds the otto_py extension, imports it, and exercises the bindings."""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
TAU = 2.0 * math.pi


def load_module():
    subprocess.run(
        ["cargo", "build", "-p", "otto-py", "--quiet"], cwd=ROOT, check=True
    )
    lib = ROOT / "target" / "debug" / "libotto_py.so"
    stage = Path(tempfile.mkdtemp(prefix="otto_py_"))
    shutil.copy(lib, stage / "otto_py.so")
    sys.path.insert(0, str(stage))
    import otto_py

    return otto_py


def check_geometry(otto_py):
    sphere = otto_py.Manifold("sphere2")
    assert sphere.ambient_dim() == 3
    x = sphere.closest_point([0.3, 0.4, 1.2])
    assert abs(sphere.constraint_violation(x)) < 1e-12
    north, south = [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]
    assert abs(sphere.distance(north, south) - math.pi) < 1e-12
    v = sphere.tangent_project(north, [0.5, 0.0, 2.0])
    assert abs(v[2]) < 1e-15
    print("ok geometry")


def check_driver(otto_py):
    driver = otto_py.BrownianDriver(1, 1.0, 0.01, 42)
    assert driver.steps() == 100
    coarse = driver.increments(0)
    fine = driver.refine().increments(0)
    worst = max(
        abs(coarse[k] - fine[2 * k] - fine[2 * k + 1]) for k in range(len(coarse))
    )
    assert worst < 1e-12, worst
    replay = otto_py.BrownianDriver(1, 1.0, 0.01, 42).increments(0)
    assert replay == coarse
    print("ok driver")


def check_integrate(otto_py):
    sphere = otto_py.Manifold("sphere2")
    driver = otto_py.BrownianDriver(1, 0.5, 0.001, 9)
    sample = otto_py.integrate_sde(
        sphere,
        [0.0, 0.0, 1.0],
        lambda t, x: [-0.5 * x[1], 0.5 * x[0], 0.0],
        [lambda x: [0.0, -0.3 * x[2], 0.3 * x[1]]],
        driver,
    )
    assert len(sample["points"]) == driver.steps() + 1
    worst = max(
        abs(sphere.constraint_violation(p)) for p in sample["points"]
    )
    assert worst < 1e-12, worst

    try:
        otto_py.integrate_sde(
            sphere,
            [0.0, 0.0, 1.0],
            lambda t, x: 1 / 0,
            [],
            otto_py.BrownianDriver(0, 0.01, 0.001, 1),
        )
    except ZeroDivisionError:
        pass
    else:
        raise AssertionError("drift exception was swallowed")
    print("ok integrate_sde")


def check_measures(otto_py):
    uniform = otto_py.GridDensity.uniform(256)
    bump = otto_py.GridDensity.cosine_mode(256, 0.5, 1)
    w2 = otto_py.w2_circle(uniform, bump, 4096)
    assert abs(w2 - 1.0 / (2.0 * math.sqrt(2.0))) < 1e-5, w2

    vm = otto_py.GridDensity.von_mises(256, 0.0, 4.0)
    shifted = vm.pushforward_1d([x + 0.3 for x in vm.nodes()])
    w2 = otto_py.w2_circle(vm, shifted, 2048)
    assert 0.2 < w2 <= 0.301, w2

    cloud = otto_py.ParticleCloud.uniform_weights(
        [TAU * k / 500.0 for k in range(500)]
    )
    grid = cloud.to_grid(64)
    assert abs(grid.integrate([1.0] * 64) - 1.0) < 1e-9
    c1, s1 = cloud.trig_moment(1)
    assert abs(c1) < 1e-2 and abs(s1) < 1e-2
    print("ok measures")


def check_hodge(otto_py):
    rho = otto_py.GridDensity.cosine_mode(128, 0.35, 1)
    xs = rho.nodes()
    field = [math.sin(x) + 0.4 * math.cos(2 * x) + 0.2 for x in xs]
    split = otto_py.HodgeSolver(rho).split([field])
    assert split["residual"] < 1e-9, split["residual"]
    assert abs(sum(split["psi"]) / len(split["psi"])) < 1e-12
    print("ok hodge")


def check_mkv(otto_py):
    fields = [
        otto_py.MKVField.interaction("sin", 0.5),
        otto_py.MKVField.gradient_potential("sin", 0.3),
    ]
    problem = otto_py.MKVProblem(
        fields, otto_py.GridDensity.cosine_mode(64, 0.3, 1), 64, 1e-3, 0.02, 7
    )
    sol = otto_py.picard_solve(problem)
    assert sol.steps() == 20
    assert len(sol.states(20)) == 64
    diag = sol.diagnostics()
    gaps = diag["windows"][0]["gaps"]
    assert gaps[-1] < 1e-8, gaps
    report = otto_py.sde_residuals(problem, sol)
    assert report["sup"] < 0.05, report["sup"]
    assert {f["name"] for f in report["per_function"]} == {"cos", "sin", "cos2x"}
    print("ok mckean-vlasov")


def check_hopf(otto_py):
    hopf = otto_py.HopfFibration()
    q = [1.0, 0.0, 0.0, 0.0]
    b = hopf.project(q)
    assert abs(math.hypot(*b) - 0.5) < 1e-12
    assert abs(hopf.fiber_phase(q, q)) < 1e-15
    vt = [-b[2], 0.0, b[0]]  # tangent to the base sphere at b
    lift = hopf.horizontal_lift_vector(q, vt)
    v = hopf.vertical_generator(q)
    assert abs(sum(a * c for a, c in zip(lift, v))) < 1e-12
    assert abs(sum(a * c for a, c in zip(lift, q))) < 1e-12
    roundtrip = hopf.differential(q, lift)
    assert max(abs(x - y) for x, y in zip(roundtrip, vt)) < 1e-12
    print("ok hopf")


def check_transport(otto_py):
    mu0 = otto_py.GridDensity.cosine_mode(64, 0.3, 1)

    def scaled_gradient(a, f):
        return otto_py.MeasureField.gradient(
            lambda xs, rho: [a * f(x) for x in xs]
        )

    fields = [
        scaled_gradient(0.5, math.cos),  # drift potential 0.5 sin
        scaled_gradient(-0.3, math.sin),  # noise potential 0.3 cos
    ]
    driver = otto_py.BrownianDriver(1, 0.02, 1e-3, 3)
    v0 = [0.7 * math.sin(x) for x in mu0.nodes()]
    states = otto_py.parallel_transport(fields, mu0, v0, driver)
    assert len(states) == driver.steps() + 1
    norms = [s["norm"] for s in states]
    drift = max(abs(n - norms[0]) for n in norms)
    assert drift < 1e-3, drift

    phi0 = otto_py.DiscreteDiffeo.from_quantile(mu0)
    path = otto_py.horizontal_lift(fields, phi0, driver)
    assert len(path) == driver.steps() + 1
    rho_end = path[-1].rho()
    assert abs(rho_end.integrate([1.0] * rho_end.n()) - 1.0) < 1e-9

    bad = [otto_py.MeasureField.gradient(lambda xs, rho: 1 / 0)]
    try:
        otto_py.parallel_transport(bad, mu0, v0, driver)
    except ZeroDivisionError:
        pass
    else:
        raise AssertionError("field exception was swallowed")
    print("ok transport")


def main():
    otto_py = load_module()
    print(f"otto_py {otto_py.version()}")
    check_geometry(otto_py)
    check_driver(otto_py)
    check_integrate(otto_py)
    check_measures(otto_py)
    check_hodge(otto_py)
    check_mkv(otto_py)
    check_hopf(otto_py)
    check_transport(otto_py)
    print("smoke: all checks passed")


if __name__ == "__main__":
    main()
