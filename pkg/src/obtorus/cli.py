"""Command line entry point: ``obtorus <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .experiments import (
    epsilon_sweep,
    load_config,
    run_to_directory,
    self_convergence,
    stability_pair,
)


def _floats(text: str):
    try:
        return [float(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma separated list of numbers, got {text!r}") from None


def identity_checks(n: int, seed: int, count: int = 20):
    """Yield (name, worst relative error, tolerance) for the operator identity suite."""
    from .mollifier import build_mollifier
    from .spectral import Field, Grid, constant, divergence, gradient, l2_norm, partial, random_divfree, random_field
    from .vorticity import advect, curl, omega_nonlinear, velocity_from_vorticity

    g = Grid(n, n, n)
    J = build_mollifier(0.125, g)
    kmax = max(1, n // 8)
    worst = {}

    def note(name, err, ref):
        rel = err / max(ref, 1e-300)
        worst[name] = max(worst.get(name, 0.0), rel)

    for i in range(count):
        s = seed + 10 * i
        f = random_field(g, s, kmax)
        u = random_divfree(g, s + 1, kmax)
        v = random_divfree(g, s + 2, kmax)
        note("curl grad = 0", l2_norm(curl(gradient(f))), l2_norm(gradient(f)))
        note("div curl = 0", l2_norm(divergence(curl(u))), l2_norm(u))
        c = constant(g, np.array([1.5, -2.0, 0.25]))
        note("J const = const", l2_norm(J.apply(c) - c), l2_norm(c))
        note("div Ju = 0", l2_norm(divergence(J.apply(u))), l2_norm(u))
        idx = tuple(np.random.default_rng(s).integers(0, 3, size=3))
        note("D J = J D", l2_norm(partial(J.apply(f), idx) - J.apply(partial(f, idx))), l2_norm(partial(f, idx)))
        lhs = curl(advect(v, u))
        rhs = advect(v, curl(u)) + omega_nonlinear(v, u)
        note("Omega identity", l2_norm(lhs - rhs), l2_norm(lhs))
        note("velocity round trip", l2_norm(velocity_from_vorticity(curl(u)) - u), l2_norm(u))
    tol = {"velocity round trip": 1e-10}
    for name, err in worst.items():
        yield name, err, tol.get(name, 1e-8)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="obtorus", description="Regularised Oldroyd-B flow on the periodic unit box")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="single run: diagnostics CSV and snapshots")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (default: run.out from the config)")

    s = sub.add_parser("sweep-eps", help="distance of eps > 0 runs from the eps = 0 run")
    s.add_argument("--config", required=True)
    s.add_argument("--eps", required=True, type=_floats)

    st = sub.add_parser("stability", help="growth of initial perturbations")
    st.add_argument("--config", required=True)
    st.add_argument("--amps", required=True, type=_floats)

    c = sub.add_parser("convergence", help="Richardson orders in dt")
    c.add_argument("--config", required=True)
    c.add_argument("--dts", required=True, type=_floats)

    ci = sub.add_parser("check-identities", help="operator identity suite; nonzero exit on failure")
    ci.add_argument("--n", type=int, default=32)
    ci.add_argument("--seed", type=int, default=0)

    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    try:
        if args.command == "check-identities":
            ok = True
            for name, err, tol in identity_checks(args.n, args.seed):
                flag = "PASS" if err <= tol else "FAIL"
                ok &= err <= tol
                print(f"{flag} {name}: {err:.3e} (tol {tol:g})")
            return 0 if ok else 1
        cfg = load_config(args.config)
        if args.command == "run":
            out = args.out or cfg.out
            if not out:
                ap.error("no output directory: pass --out or set run.out")
            res = run_to_directory(cfg, out)
            last = res.records[-1]
            print(f"t={last.t:g} kinetic={last.kinetic:.6e} min_eig={last.min_eig:.6e}")
            print(res.recorder.energy_report())
            return 0
        if args.command == "sweep-eps":
            report = epsilon_sweep(cfg, args.eps)
        elif args.command == "stability":
            report = stability_pair(cfg, args.amps)
        else:
            report = self_convergence(cfg, args.dts)
        print("\n".join(report.lines()))
        return 0
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
