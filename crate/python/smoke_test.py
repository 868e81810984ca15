"""Smoke test for the hypoheat_py extension.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/hypoheat_py-*.whl
"""

import math
import sys

import hypoheat_py as hh


def close(a, b, tol):
    return abs(a - b) <= tol


def main():
    failures = []

    def check(name, ok, detail=""):
        print(f"{'ok  ' if ok else 'FAIL'} {name} {detail}")
        if not ok:
            failures.append(name)

    s = 1.0
    q = hh.kernel_eval(s, 1.0, (0.0, 0.0), (0.0, 0.0))
    check("kernel diagonal", close(q, math.sqrt(12) / (2 * math.pi), 1e-14), f"{q!r}")

    op = hh.LQOperator.kolmogorov(2.0)
    g = op.g(1.0)
    check("gramian", close(g[1][1], 4.0 / 3.0, 1e-14) and close(g[0][1], 1.0, 1e-14), repr(g))
    t = 0.3
    lhs = op.kernel(t, (0.2, -0.1), (0.1, 0.05))
    eps = math.sqrt(t)
    rhs = op.kernel(1.0, (0.2 / eps, -0.1 / eps**3), (0.1 / eps, 0.05 / eps**3)) / eps**4
    check("homogeneity", close(lhs, rhs, 1e-12 * rhs), f"{lhs:.6e} {rhs:.6e}")

    d1, quad = (1.0, 0, 0, 1), (1.0, 2, 0, 2)
    table = [
        (hh.conv1(s, (1.0, 1, 0, 1))["normalized"], -0.5),
        (hh.conv1(s, (1.0, 0, 1, 2))["normalized"], -0.5),
        (hh.conv1(s, (1.0, 3, 0, 2))["normalized"], -3 / 14),
        (hh.conv2(s, d1, d1)["normalized"], -0.5),
        (hh.conv2(s, quad, d1)["normalized"], 3 / 14),
        (hh.conv2(s, d1, quad)["normalized"], -3 / 14),
        (hh.conv2(s, quad, quad)["normalized"], 9 / 70),
    ]
    worst = max(abs(a - b) for a, b in table)
    check("convolutions", worst < 1e-8, f"max err {worst:.2e}")

    pair = hh.VectorFieldPair(("0", "x1 + 0.5*x1^2"), ("1", "0"))
    h = pair.check_hypotheses((0.0, 0.0))
    check("hypotheses", h["parallel"] and h["hormander"], repr(h))
    inv = pair.invariants((0.0, 0.0))
    check("invariants", inv["K1"] == -4.0 and inv["K2"] == 2.0, repr(inv))
    c = pair.coefficient_geometric((0.0, 0.0))
    c2 = pair.coefficient_coordinate((0.0, 0.0))
    check("coefficient", close(c, -12 / 35, 1e-12) and close(c2, c, 1e-12), f"{c!r} {c2!r}")

    flat = hh.VectorFieldPair.kolmogorov(1.0)
    times = [0.1, 0.2, 0.3]
    ends = hh.simulate(flat, (0.0, 0.0), times, 20000, dt=2e-3, seed=5)
    again = hh.simulate(flat, (0.0, 0.0), times, 20000, dt=2e-3, seed=5)
    check("simulate reproducible", ends == again)
    est = [hh.estimate_density(flat, pts, (0.0, 0.0)) for pts in ends]
    for tk, (v, se) in zip(times, est):
        exact = hh.kernel_eval(1.0, tk, (0.0, 0.0), (0.0, 0.0))
        check(f"density t={tk}", abs(v - exact) < 4 * se, f"{v:.4f} vs {exact:.4f} (se {se:.4f})")
    c, se = hh.fit_coefficient(times, [v for v, _ in est], [se for _, se in est])
    check("flat fit", abs(c) < 4 * se, f"c={c:.4f} se={se:.4f}")

    try:
        hh.VectorFieldPair(("0", "x1 +* 1"), ("1", "0"))
        check("parse error raised", False)
    except ValueError as e:
        check("parse error raised", True, str(e))

    if failures:
        print(f"{len(failures)} failure(s)")
        return 1
    print("all smoke checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
