"""Command line front end: run hypothesis, spectral and semigroup checks from a JSON config."""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import math
import platform
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from . import evolve as ev
from . import model as md
from . import spectral as spc
from .config import ALL_CHECKS, EVOLVE_CHECKS, MODEL_CHECKS, SPECTRAL_CHECKS, ConfigError, RunConfig, load_config
from .expr import ExprSyntaxError, parse, tree
from .grid import DiscreteOperator, assemble, assemble_scalar, build_grid

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

# statement each check probes, in plain words
ANCHORS = {
    "ellipticity": "uniform ellipticity and boundedness of Q",
    "dissipativity": "dissipativity of V: symmetric part bounded above by beta < 0",
    "gradient_condition": "|D_j V| (-V)^(-gamma) bounded for some gamma in [0, 1/2)",
    "grad_ratio": "|grad v| <= c v",
    "okazawa": "Yosida-approximation gradient bound |grad v_eps|_Q^2 <= a v_eps^2 + b v_eps^3",
    "sectoriality": "Re<-V xi, xi> >= M |Im<V xi, xi>| (analytic semigroup)",
    "offdiagonal_sign": "nonnegative off-diagonal potential entries (positivity)",
    "coercivity": "smallest singular value of the potential grows at infinity (compact resolvent)",
    "little_o": "diagonal of V is o(|x|^alpha)",
    "eigen": "discrete spectrum with orthonormal eigenvectors",
    "weyl": "Weyl asymptotics of the eigenvalue counting function",
    "trace": "heat trace equals the sum of exp(-lambda_n t)",
    "contraction": "contractive semigroup on L^p",
    "ultracontractivity": "kernel bound |k_ij(t,x,y)| <= M t^(-d/2)",
    "trotter_kato": "Lie-Trotter product formula for the split potential",
    "kernel": "integral kernel representation of the semigroup",
    "gaussian_fit": "Gaussian upper bound for the matrix heat kernel",
    "offdiag_vs_diag": "|k_ij(t,x,y) + k_ij(t,y,x)| <= 2 sqrt(k_ii k_jj)",
    "positivity": "positive semigroup iff off-diagonal potential entries are nonnegative",
    "lower_bound": "k_2v(t,x,y) <= k_ij(t,x,y)",
    "decay": "kernel decay exp(-|x|^gamma / gamma) with gamma = 1 + alpha/2",
    "maximal_inequality": "||div(Q grad u)||_p + ||V u||_p <= C ||L u||_p",
}


class Skip(Exception):
    """A check whose preconditions do not hold; the message names the violated one."""


@dataclass
class CheckResult:
    name: str
    verdict: str
    reason: str | None = None
    constants: dict[str, Any] = field(default_factory=dict)
    witness: dict[str, Any] | None = None
    artifacts: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return md._jsonable({
            "name": self.name, "verdict": self.verdict, "reason": self.reason,
            "constants": self.constants, "witness": self.witness, "artifacts": self.artifacts,
            "notes": self.notes, "anchor": ANCHORS.get(self.name, ""),
        })


class Context:
    """Lazily built shared objects (grid, operator, spectrum) for one run."""

    def __init__(self, cfg: RunConfig, out: Path):
        self.cfg = cfg
        self.spec = cfg.system
        self.out = out
        self.grid = build_grid(self.spec.d, cfg.grid["R"], cfg.grid["N"])
        self._op: DiscreteOperator | None = None
        self._spectrum = None

    @property
    def op(self) -> DiscreteOperator:
        if self._op is None:
            self._op = assemble(self.spec, self.grid)
        return self._op

    def spectrum(self):
        if self._spectrum is None:
            if not self.spec.is_symmetric():
                raise Skip("V is not symmetric: the spectral checks assume symmetric V")
            k = min(int(self.cfg.spectral["k"]), self.op.size - 1)
            self._spectrum = spc.eigen_lowest(self.op, k, seed=self.cfg.seed)
        return self._spectrum

    def sources(self) -> list[int]:
        pts = self.cfg.evolve.get("sources")
        if not pts:
            return ev.default_sources(self.grid)
        return list(dict.fromkeys(self.grid.node_index(p) for p in pts))

    def origin(self) -> int:
        return self.grid.node_index(np.zeros(self.spec.d))


def _from_model(rep: md.CheckReport) -> CheckResult:
    verdict = "PASS" if rep.holds else "FAIL"
    witness = rep.witness.to_dict() if rep.witness is not None else None
    if verdict == "FAIL" and witness is None:
        witness = {"verdict": rep.verdict.value, **rep.constants}
    notes = list(rep.notes)
    if rep.verdict is md.Verdict.UNBOUNDED_TREND:
        notes.insert(0, "unbounded trend on the radius grid")
    return CheckResult(rep.name, verdict, None, dict(rep.constants), witness, [], notes)


def _from_estimate(rep: ev.EstimateReport, name: str | None = None) -> CheckResult:
    witness = rep.witness
    if rep.status == "FAIL" and witness is None:
        witness = dict(rep.constants)
    return CheckResult(name or rep.name, rep.status, None, dict(rep.constants), witness, [], list(rep.notes))


def _dissipative_full(spec) -> bool:
    rep = md.dissipativity_check(spec.Vt)
    return rep.constants["beta"] <= 1e-12


# ---------------------------------------------------------------------------
# model checks


def run_ellipticity(ctx: Context) -> CheckResult:
    return _from_model(md.ellipticity_check(ctx.spec.Q))


def run_dissipativity(ctx: Context) -> CheckResult:
    res = _from_model(md.dissipativity_check(ctx.spec.V))
    res.constants["beta_full_potential"] = md.dissipativity_check(ctx.spec.Vt).constants["beta"]
    return res


def run_gradient_condition(ctx: Context) -> CheckResult:
    return _from_model(md.gradient_condition_check(ctx.spec.V))


def run_grad_ratio(ctx: Context) -> CheckResult:
    return _from_model(md.grad_ratio_check(ctx.spec.v))


def run_okazawa(ctx: Context) -> CheckResult:
    return _from_model(md.okazawa_check(ctx.spec.v, ctx.spec.Q))


def run_sectoriality(ctx: Context) -> CheckResult:
    return _from_model(md.sectoriality_check(ctx.spec))


def run_offdiagonal_sign(ctx: Context) -> CheckResult:
    return _from_model(md.offdiagonal_sign_check(ctx.spec))


def run_coercivity(ctx: Context) -> CheckResult:
    return _from_model(md.coercivity_check(ctx.spec.Vt))


def run_little_o(ctx: Context) -> CheckResult:
    if ctx.spec.alpha is None:
        raise Skip("no alpha declared: little-o check needs v = 1+|x|^alpha")
    try:
        return _from_model(md.little_o_check(ctx.spec.V, ctx.spec.v, ctx.spec.alpha))
    except ValueError as exc:
        raise Skip(str(exc)) from exc


# ---------------------------------------------------------------------------
# spectral checks


def run_eigen(ctx: Context) -> CheckResult:
    res = ctx.spectrum()
    path = res.write_csv(ctx.out / "eigenvalues.csv")
    gram = ctx.grid.cell * res.vectors.T @ res.vectors
    ortho = float(np.max(np.abs(gram - np.eye(res.k))))
    rel_res = float(np.max(res.residuals / np.maximum(1.0, np.abs(res.lambdas))))
    ok = ortho <= 1e-10 and rel_res <= 1e-8
    out = CheckResult("eigen", "PASS" if ok else "FAIL", None,
                      {"k": res.k, "lambda_0": res.lambdas[0], "lambda_max": res.lambdas[-1],
                       "max_relative_residual": rel_res, "orthonormality_defect": ortho, "method": res.method},
                      artifacts=[path.name])
    if not ok:
        out.witness = {"orthonormality_defect": ortho, "max_relative_residual": rel_res}
    return out


def _weyl_preconditions(ctx: Context):
    spec = ctx.spec
    if spec.alpha is None:
        raise Skip("no alpha declared: Weyl asymptotics need v = 1+|x|^alpha")
    if not spec.Q.is_identity():
        raise Skip("Q is not the identity: Weyl asymptotics are stated for Q = I")
    if not spec.is_symmetric():
        raise Skip("V is not symmetric")
    try:
        lo = md.little_o_check(spec.V, spec.v, spec.alpha)
    except ValueError as exc:
        raise Skip(str(exc)) from exc
    if not lo.holds:
        raise Skip("diagonal of V is not o(|x|^alpha)")


def run_weyl(ctx: Context) -> CheckResult:
    _weyl_preconditions(ctx)
    res = ctx.spectrum()
    if res.k < 40:
        raise Skip(f"Weyl fit needs at least 40 eigenvalues, config gives k = {res.k}")
    rep = spc.weyl_fit(res, ctx.spec.alpha, ctx.spec.d, ctx.spec.m)
    path = rep.write_csv(ctx.out / "weyl.csv")
    out = CheckResult("weyl", "PASS" if rep.passed else "FAIL", None, rep.to_dict(), artifacts=[path.name])
    if not rep.passed:
        out.witness = {"tail": rep.tail, "theory": rep.theory, "deviation": rep.deviation}
    return out


def run_trace(ctx: Context) -> CheckResult:
    res = ctx.spectrum()
    rows, worst, verdict = [], 0.0, "PASS"
    for t in ctx.cfg.spectral["t_trace"]:
        rep = spc.trace_check(res, ctx.op, t)
        rows.append(rep.to_dict())
        if not rep.conclusive:
            verdict = "INCONCLUSIVE" if verdict == "PASS" else verdict
            continue
        allowed = rep.truncation_bound / abs(rep.kernel_side) + 1e-8
        worst = max(worst, rep.rel_gap)
        if rep.rel_gap > allowed:
            verdict = "FAIL"
    out = CheckResult("trace", verdict, None, {"max_rel_gap": worst, "per_t": rows})
    if verdict == "FAIL":
        out.witness = max(rows, key=lambda r: r["rel_gap"])
    if verdict == "INCONCLUSIVE":
        out.reason = "truncation bound exceeds 10% of the trace for some t"
    return out


# ---------------------------------------------------------------------------
# semigroup checks


def run_contraction(ctx: Context) -> CheckResult:
    if not _dissipative_full(ctx.spec):
        raise Skip("full potential is not dissipative (beta > 0)")
    e = ctx.cfg.evolve
    return _from_estimate(ev.contraction_check(ctx.op, e["t_grid"], trials=e["trials"], seed=e["seed"]))


def run_ultracontractivity(ctx: Context) -> CheckResult:
    if not _dissipative_full(ctx.spec):
        raise Skip("full potential is not dissipative (beta > 0)")
    return _from_estimate(ev.lp_lq_check(ctx.op, ctx.cfg.evolve["t_grid"], ctx.sources()))


def run_trotter_kato(ctx: Context) -> CheckResult:
    op_V = assemble(ctx.spec, ctx.grid, potential=ctx.spec.V)
    return _from_estimate(ev.trotter_kato_check(op_V, ctx.spec.v, 0.5, seed=ctx.cfg.seed))


def run_kernel(ctx: Context) -> CheckResult:
    t = ctx.cfg.evolve["t_kernel"][0]
    sl = ev.kernel_slice(ctx.op, t, ctx.origin())
    path = sl.write_csv(ctx.out / "kernel_slice.csv")
    finite = bool(np.all(np.isfinite(sl.values)))
    consts = {"t": t, "y": sl.y_point, "max_abs": float(np.max(np.abs(sl.values)))}
    ok = finite
    if ctx.spec.is_symmetric():
        defect = ev.symmetry_defect(sl, ev.kernel_slice(ctx.op, t, ctx.origin(), adjoint=True))
        consts["symmetry_defect"] = defect
        ok = ok and defect <= 1e-8
    out = CheckResult("kernel", "PASS" if ok else "FAIL", None, consts, artifacts=[path.name])
    if not ok:
        out.witness = dict(consts, finite=finite)
    return out


def _slices(ctx: Context):
    return [ev.kernel_slice(ctx.op, t, y) for t in ctx.cfg.evolve["t_kernel"] for y in ctx.sources()]


def run_gaussian_fit(ctx: Context) -> CheckResult:
    fit = ev.gaussian_fit(_slices(ctx))
    path = fit.write_json(ctx.out / "gaussian_fit.json")
    return CheckResult("gaussian_fit", "PASS" if fit.passed else "FAIL", None, fit.to_dict(), fit.witness,
                       artifacts=[path.name])


def run_offdiag_vs_diag(ctx: Context) -> CheckResult:
    if not ctx.spec.is_symmetric():
        raise Skip("V is not symmetric")
    worst, bad = -math.inf, None
    notes: list[str] = []
    for t in ctx.cfg.evolve["t_kernel"]:
        for y in ctx.sources():
            rep = ev.offdiag_vs_diag_check(ev.kernel_slice(ctx.op, t, y), ev.kernel_slice(ctx.op, t, y, adjoint=True))
            notes.extend(rep.notes)
            if rep.constants["max_violation"] > worst:
                worst = rep.constants["max_violation"]
            if not rep.passed and bad is None:
                bad = rep
    out = CheckResult("offdiag_vs_diag", "PASS" if bad is None else "FAIL", None, {"max_violation": worst},
                      notes=notes)
    if bad is not None:
        out.witness = bad.witness or dict(bad.constants)
    return out


def run_positivity(ctx: Context) -> CheckResult:
    return _from_estimate(ev.positivity_check(ctx.op, ctx.spec, ctx.cfg.evolve["t_kernel"], ctx.sources()))


def run_lower_bound(ctx: Context) -> CheckResult:
    reps = []
    for t in ctx.cfg.evolve["t_kernel"]:
        try:
            reps.append(ev.lower_bound_check(ctx.spec, ctx.grid, t, ctx.origin(), op=ctx.op))
        except ev.PreconditionError as exc:
            raise Skip(str(exc)) from exc
    worst = min(reps, key=lambda r: r.constants["min_margin"])
    out = _from_estimate(worst, "lower_bound")
    out.constants = {
        "min_margin": worst.constants["min_margin"],
        "min_margin_diagonal": min(r.constants["min_margin_diagonal"] for r in reps),
        "min_margin_offdiagonal": min(r.constants["min_margin_offdiagonal"] for r in reps),
        "per_t": [r.constants for r in reps],
    }
    return out


def run_decay(ctx: Context) -> CheckResult:
    alpha = ctx.spec.alpha
    if alpha is None or not alpha > 2:
        raise Skip("decay profile needs a declared alpha > 2")
    scalar = assemble_scalar(ctx.spec.Q, ctx.spec.v, ctx.grid)
    mu0 = float(spc.eigen_lowest(scalar, 1).lambdas[0])
    fit = ev.decay_profile_fit(ctx.op, ctx.cfg.evolve["t_decay"], alpha, mu0=mu0)
    path = fit.write_json(ctx.out / "decay_fit.json")
    out = CheckResult("decay", "PASS" if fit.passed else "FAIL", None, fit.to_dict(), artifacts=[path.name])
    if not fit.passed:
        out.witness = {"gamma_hat": fit.gamma_hat, "decay_gamma": fit.decay_gamma, "window": fit.window}
    return out


def run_maximal_inequality(ctx: Context) -> CheckResult:
    e = ctx.cfg.evolve
    return _from_estimate(ev.maximal_inequality_probe(ctx.spec, ctx.grid, ctx.cfg.p, trials=4 * e["trials"],
                                                      seed=e["seed"]))


CHECKS: dict[str, Callable[[Context], CheckResult]] = {
    name: globals()[f"run_{name}"] for name in ALL_CHECKS
}

GROUPS = {
    "check-hypotheses": MODEL_CHECKS,
    "eigen": ("eigen", "trace"),
    "weyl": ("weyl",),
    "evolve": ("contraction", "ultracontractivity", "trotter_kato", "positivity", "offdiag_vs_diag",
               "lower_bound", "maximal_inequality"),
    "kernel": ("kernel", "gaussian_fit", "decay"),
    "verify-all": ALL_CHECKS,
}


def run_checks(cfg: RunConfig, names, out: Path) -> tuple[list[CheckResult], bool]:
    """Run each named check in isolation; returns the results and whether any raised."""
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, out)
    order = [n for n in MODEL_CHECKS + SPECTRAL_CHECKS + EVOLVE_CHECKS if n in names]
    results, crashed = [], False
    for name in order:
        try:
            res = CHECKS[name](ctx)
        except Skip as exc:
            res = CheckResult(name, "SKIPPED", str(exc))
        except Exception as exc:  # isolate: one broken check must not abort the rest
            crashed = True
            res = CheckResult(name, "INCONCLUSIVE", f"runtime error: {type(exc).__name__}: {exc}",
                              notes=traceback.format_exception_only(type(exc), exc))
        results.append(res)
    return results, crashed


def build_report(cfg: RunConfig, results: list[CheckResult]) -> dict:
    return {
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "environment": {
            "grid": {"d": cfg.system.d, **cfg.grid},
            "seed": cfg.seed,
            "versions": {"matschro": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
        },
        "system": cfg.system.to_dict(),
        "checks": [r.to_dict() for r in results],
        "summary": {v: sum(r.verdict == v for r in results) for v in ("PASS", "FAIL", "INCONCLUSIVE", "SKIPPED")},
    }


def run(config, command: str = "verify-all", out: str | Path | None = None, seed: int | None = None) -> int:
    """Load the config, run the checks of ``command`` and write report.json; returns the exit code."""
    try:
        cfg = load_config(config, out=out, seed=seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if command == "verify-all" and cfg.checks:
        names = cfg.checks
    else:
        names = GROUPS[command]
    results, crashed = run_checks(cfg, names, cfg.output_dir)
    report = build_report(cfg, results)
    path = cfg.output_dir / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    for r in results:
        tail = f" ({r.reason})" if r.reason else ""
        print(f"{r.name:20s} {r.verdict}{tail}")
    print(f"report written to {path}")
    if crashed:
        return EXIT_RUNTIME
    return EXIT_FAIL if any(r.verdict == "FAIL" for r in results) else EXIT_OK


def _parse_check(text: str, dim: int) -> int:
    try:
        e = parse(text, dim)
    except ExprSyntaxError as exc:
        print(exc.diagnostic(), file=sys.stderr)
        return EXIT_CONFIG
    print(f"normal form: {e}")
    print(tree(e))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="matschro", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("parse-check", help="parse an expression and print its syntax tree")
    p.add_argument("expression")
    p.add_argument("--dim", type=int, default=1)
    for name in GROUPS:
        q = sub.add_parser(name, help=f"run the {name} checks")
        q.add_argument("--config", required=True, help="JSON run configuration")
        q.add_argument("--out", help="output directory (overrides output_dir)")
        q.add_argument("--seed", type=int, help="random seed (overrides evolve.seed)")
        q.add_argument("--threads", type=int, help="BLAS thread limit")
    args = parser.parse_args(argv)
    if args.command == "parse-check":
        return _parse_check(args.expression, args.dim)
    if args.threads:
        with threadpool_limits(limits=args.threads):
            return run(args.config, args.command, args.out, args.seed)
    return run(args.config, args.command, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
