"""Command-line interface: ``llrbounds <subcommand> ...``.

Exit codes: 0 success, 1 usage or input error, 2 empty or infeasible
interval, 3 numerical failure.  Every emission records the seed, the
package version and the resolved configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys

import numpy as np

from . import __version__
from .experiments import (
    PRESETS,
    Scenario,
    build_rules,
    preset,
    run_counterexample_mean,
    run_coupling_check,
    run_coverage,
    run_dimension_divergence,
    run_quantile_curve,
)
from .intervals import (
    interval_functional_space,
    interval_unconstrained_closed_form,
    rule_for_method,
)
from .llr import LlrStatistic, SolverFailure
from .maxquantile import DecisionRule, max_quantile, max_quantile_per_mu
from .model import ProblemInstance, instance_to_dict, load_instance, load_observation, parse_observation
from .nulldist import dominance_diagnostic, mean_estimate, sample_null

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_EMPTY = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    """Bad arguments or unreadable input."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".17g")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return None
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def _float_list(text: str, name: str) -> list[float]:
    try:
        vals = [float(t) for t in text.replace(";", ",").split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--{name}: expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise UsageError(f"--{name}: no values given")
    return vals


def _int_list(text: str, name: str) -> list[int]:
    vals = _float_list(text, name)
    if any(v != int(v) for v in vals):
        raise UsageError(f"--{name}: expected integers, got {text!r}")
    return [int(v) for v in vals]


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("CI_SEED")
    if env is None or env.strip() == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"CI_SEED must be an integer, got {env!r}") from None


# ---------------------------------------------------------------------------
# model sources

def _instance(args) -> tuple[ProblemInstance, Scenario | None]:
    if args.preset and args.model:
        raise UsageError("give exactly one of --preset and --model")
    if args.preset:
        sc = preset(args.preset)
        return sc.inst, sc
    if args.model:
        try:
            return load_instance(args.model), None
        except FileNotFoundError:
            raise UsageError(f"model file not found: {args.model}") from None
        except (KeyError, ValueError, TypeError) as exc:
            msg = exc.args[0] if exc.args else str(exc)
            raise UsageError(f"invalid model {args.model}: {msg}") from None
    raise UsageError("a model is required: give --preset or --model")


def _search_box(args, inst: ProblemInstance, sc: Scenario | None):
    if args.lower is not None or args.upper is not None:
        if args.lower is None or args.upper is None:
            raise UsageError("--lower and --upper go together")
        lo, hi = _float_list(args.lower, "lower"), _float_list(args.upper, "upper")
        if len(lo) == 1:
            lo = lo * inst.p
        if len(hi) == 1:
            hi = hi * inst.p
        return np.array(lo), np.array(hi)
    if sc is not None:
        return sc.search_lower, sc.search_upper
    raise UsageError("--lower and --upper are required with --model")


def _xstar(args, inst: ProblemInstance) -> np.ndarray:
    if args.xstar is None:
        raise UsageError("--xstar is required")
    x = np.array(_float_list(args.xstar, "xstar"))
    if x.size != inst.p:
        raise UsageError(f"--xstar has {x.size} entries, the model has {inst.p} parameters")
    if not inst.constraints.contains(x):
        raise UsageError("--xstar lies outside the constraint set")
    return x


def _load_rule(path: str) -> DecisionRule:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"rule file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"rule file {path} is not valid JSON: {exc}") from None
    if isinstance(d, dict) and "rule" in d and isinstance(d["rule"], dict):
        d = d["rule"]
    try:
        return DecisionRule.from_dict(d)
    except (KeyError, ValueError, TypeError) as exc:
        msg = exc.args[0] if exc.args else str(exc)
        raise UsageError(f"invalid rule in {path}: {msg}") from None


# ---------------------------------------------------------------------------
# emission

def _config(args, **extra) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "out", "threads")}
    cfg.update(extra)
    return _jsonable(cfg)


def _emit_json(args, payload: dict, seed: int, config: dict):
    doc = {"version": __version__, "seed": seed, "config": config}
    doc.update(payload)
    _write(args, json.dumps(_jsonable(doc), indent=2, sort_keys=False) + "\n")


def _emit_csv(args, body: str, seed: int, config: dict):
    pre = [f"# version={__version__}", f"# seed={seed}",
           f"# config={json.dumps(config, sort_keys=True)}"]
    _write(args, "\n".join(pre) + "\n" + body)


def _write(args, text: str):
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _csv_table(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# subcommands

def cmd_interval(args) -> int:
    seed = _seed(args)
    inst, sc = _instance(args)
    if args.y is None:
        raise UsageError("--y is required")
    try:
        y = load_observation(args.y) if os.path.exists(args.y) else parse_observation(args.y)
    except ValueError as exc:
        raise UsageError(f"--y: {exc}") from None
    if y.size != inst.m:
        raise UsageError(f"--y has {y.size} entries, the model has {inst.m} observations")
    if not 0.0 < args.alpha < 1.0:
        raise UsageError("--alpha must lie strictly between 0 and 1")
    stat = LlrStatistic(inst)
    method = args.method
    rule_info = None
    if method == "closed-form":
        res = interval_unconstrained_closed_form(inst, y, args.alpha)
    else:
        if method in ("ssb", "osb"):
            rule = rule_for_method(method, args.alpha, inst.m)
        elif args.rule:
            rule = _load_rule(args.rule)
            if abs(rule.level - (1.0 - args.alpha)) > 1e-12:
                raise UsageError(f"rule level {rule.level} does not match 1 - alpha")
            if method == "mq" and not rule.is_constant:
                raise UsageError("method mq needs a scalar rule")
        elif sc is not None:
            sc = _scenario_overrides(args, sc)
            rule = build_rules(sc, args.alpha, seed, methods=[method], threads=args.threads)[method]
        else:
            raise UsageError(f"method {method} with --model needs --rule")
        rule_info = rule.to_dict() if rule.kind != "analytic" else {"kind": "analytic",
                                                                    "level": rule.level}
        res = interval_functional_space(stat, y, rule, method, args.alpha)
    cfg = _config(args, seed=seed, model=instance_to_dict(inst), y=y.tolist())
    if args.format == "csv":
        d = res.to_dict()
        keys = ["method", "alpha", "lower", "upper", "empty", "q_used", "s2", "n_solves"]
        q = d["q_used"]
        d["q_used"] = q if not isinstance(q, dict) else json.dumps(q, sort_keys=True)
        _emit_csv(args, _csv_table(keys, [[d[k] for k in keys]]), seed, cfg)
    else:
        payload = res.to_dict()
        if rule_info is not None:
            payload["rule"] = rule_info
        _emit_json(args, payload, seed, cfg)
    return EXIT_EMPTY if res.empty else EXIT_OK


def _scenario_overrides(args, sc: Scenario) -> Scenario:
    kw = {}
    if getattr(args, "budget", None) is not None:
        kw["budget"] = args.budget
        kw["budget_mu"] = args.budget
    if getattr(args, "n_per_eval", None) is not None:
        kw["n_per_eval"] = args.n_per_eval
    return sc.with_overrides(**kw) if kw else sc


def cmd_coverage(args) -> int:
    seed = _seed(args)
    if args.model:
        raise UsageError("coverage runs on presets; use --preset")
    _, sc = _instance(args)
    sc = _scenario_overrides(args, sc)
    if args.methods:
        sc = sc.with_overrides(methods=tuple(m.strip().lower() for m in args.methods.split(",")))
    if args.xstar:
        pts = tuple(tuple(_float_list(t, "xstar")) for t in args.xstar.split(";") if t.strip())
        sc = sc.with_overrides(truth_points=pts)
    alphas = None if args.alpha is None else [args.alpha]
    rules = None
    if args.rule:
        if alphas is None:
            raise UsageError("--rule needs --alpha")
        rule = _load_rule(args.rule)
        rules = {m: rule_for_method(m, args.alpha, sc.inst.m) for m in sc.methods if m in ("ssb", "osb")}
        for m in sc.methods:
            if m not in rules:
                rules[m] = rule
    report = run_coverage(sc, seed, rules=rules, reps=args.reps, alpha_levels=alphas,
                          threads=args.threads)
    cfg = _config(args, seed=seed, scenario=report.config)
    if args.format == "csv":
        _emit_csv(args, report.to_csv(), seed, cfg)
    else:
        _emit_json(args, {"report": report.to_dict()}, seed, cfg)
    return EXIT_NUMERICAL if any(r.failures for r in report.rows) else EXIT_OK


def cmd_maxq(args) -> int:
    seed = _seed(args)
    inst, sc = _instance(args)
    lo, hi = _search_box(args, inst, sc)
    stat = LlrStatistic(inst)
    budget = args.budget if args.budget is not None else 200
    n_per = args.n_per_eval if args.n_per_eval is not None else 10_000
    if args.per_mu:
        if args.mu_grid is not None:
            grid = np.array(_float_list(args.mu_grid, "mu-grid"))
        elif sc is not None:
            grid = sc.mu_grid
        else:
            raise UsageError("--per-mu with --model needs --mu-grid")
        res = max_quantile_per_mu(stat, args.level, grid, lo, hi, budget=budget, n_per_eval=n_per,
                                  seed=seed, threads=args.threads)
        rule = res.rule
        rows = list(zip(res.mu, res.q, res.ci_lo, res.ci_hi))
        payload = {"rule": rule.to_dict(), "mu": res.mu, "q": res.q, "ci_lo": res.ci_lo,
                   "ci_hi": res.ci_hi, "argmax": res.argmax, "dropped": res.dropped,
                   "n_evals": res.n_evals}
        header = ["mu", "q", "ci_lo", "ci_hi"]
    else:
        res = max_quantile(stat, args.level, lo, hi, budget=budget, n_per_eval=n_per, seed=seed,
                           threads=args.threads)
        rule = res.rule()
        rows = [[res.q, res.ci[0], res.ci[1]] + list(res.argmax)]
        payload = {"rule": rule.to_dict(), "q": res.q, "ci": list(res.ci),
                   "argmax": res.argmax, "n_evals": res.n_evals, "n_per_eval": res.n_per_eval}
        header = ["q", "ci_lo", "ci_hi"] + [f"argmax_{i}" for i in range(inst.p)]
    cfg = _config(args, seed=seed, model=instance_to_dict(inst), lower=lo, upper=hi,
                  budget=budget, n_per_eval=n_per)
    if args.format == "csv":
        _emit_csv(args, _csv_table(header, rows), seed, cfg)
    else:
        _emit_json(args, payload, seed, cfg)
    return EXIT_OK


def cmd_dominance(args) -> int:
    seed = _seed(args)
    inst, _ = _instance(args)
    x = _xstar(args, inst)
    stat = LlrStatistic(inst)
    if args.n < 10_000:
        raise UsageError("--n must be at least 10000 for the dominance diagnostic")
    sample = sample_null(stat, x, args.n, seed, threads=args.threads)
    res = dominance_diagnostic(sample, df=args.df)
    mean, se = mean_estimate(sample)
    cfg = _config(args, seed=seed, model=instance_to_dict(inst))
    if args.format == "csv":
        _emit_csv(args, res.to_csv(), seed, cfg)
    else:
        _emit_json(args, {"verdict": res.verdict, "n_violations": int(res.violations.size),
                          "violations": res.violations, "failing_levels": res.failing_levels(),
                          "mean": mean, "mean_se": se}, seed, cfg)
    return EXIT_OK


def cmd_counterexample(args) -> int:
    seed = _seed(args)
    n = args.n
    if args.check == "mean":
        rep = run_counterexample_mean(n, seed, threads=args.threads)
        d = rep.to_dict()
        header, rows = list(d), [list(d.values())]
    elif args.check == "coupling":
        rep = run_coupling_check(n, seed, threads=args.threads)
        d = rep.to_dict()
        header, rows = list(d), [list(d.values())]
    else:
        p_list = _int_list(args.p_list, "p-list")
        if any(p < 3 for p in p_list):
            raise UsageError("--p-list entries must be at least 3")
        rep = run_dimension_divergence(p_list, n, seed, threads=args.threads)
        d = {"p": rep.p, "mean": rep.mean, "se": rep.se, "n": rep.n, "seed": rep.seed,
             "increasing": rep.increasing, "diverging": rep.diverging}
        header, rows = ["p", "mean", "se"], list(zip(rep.p, rep.mean, rep.se))
    cfg = _config(args, seed=seed)
    if args.format == "csv":
        _emit_csv(args, _csv_table(header, rows), seed, cfg)
    else:
        _emit_json(args, {"report": d}, seed, cfg)
    return EXIT_OK


def cmd_quantile_curve(args) -> int:
    seed = _seed(args)
    if args.t_grid is not None:
        t = _float_list(args.t_grid, "t-grid")
    else:
        t = np.geomspace(0.01, math.e, 20)
    try:
        curve = run_quantile_curve(args.level, t, args.n, seed, conf=args.conf, threads=args.threads)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    cfg = _config(args, seed=seed, t_grid=list(map(float, t)))
    if args.format == "csv":
        _emit_csv(args, curve.to_csv(), seed, cfg)
    else:
        _emit_json(args, {"t": curve.t, "q_hat": curve.q_hat, "ci_lo": curve.ci_lo,
                          "ci_hi": curve.ci_hi, "flagged": curve.flagged, "cutoff": curve.cutoff,
                          "level": curve.level, "n": curve.n}, seed, cfg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _positive_int(text: str) -> int:
    try:
        v = int(float(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v <= 0 or v != float(text):
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _probability(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1), got {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="llrbounds",
                     description="Confidence intervals from constrained likelihood-ratio tests.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="random seed (default: $CI_SEED, else 0)")
    common.add_argument("--threads", type=_positive_int, default=None,
                        help="worker threads (default: logical cores); results do not depend on it")
    common.add_argument("--format", choices=("json", "csv"), default="json")
    common.add_argument("--out", default=None, help="output path (default: stdout)")
    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--preset", choices=sorted(PRESETS))
    model.add_argument("--model", help="JSON model file")

    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("interval", parents=[common, model], help="one confidence interval")
    p.add_argument("--y", help="observation: comma-separated values or a file")
    p.add_argument("--method", choices=("ssb", "osb", "mq", "mqmu", "closed-form"), default="osb")
    p.add_argument("--alpha", type=_probability, required=True)
    p.add_argument("--rule", help="decision rule JSON (for mq/mqmu)")
    p.add_argument("--budget", type=_positive_int)
    p.add_argument("--n-per-eval", type=_positive_int)
    p.set_defaults(func=cmd_interval)

    p = sub.add_parser("coverage", parents=[common, model], help="coverage study on a preset")
    p.add_argument("--alpha", type=_probability)
    p.add_argument("--reps", type=_positive_int)
    p.add_argument("--methods", help="comma-separated subset of ssb,osb,mq,mqmu")
    p.add_argument("--xstar", help="truth points, ';'-separated, coordinates ','-separated")
    p.add_argument("--rule", help="decision rule JSON used for mq/mqmu")
    p.add_argument("--budget", type=_positive_int)
    p.add_argument("--n-per-eval", type=_positive_int)
    p.set_defaults(func=cmd_coverage)

    p = sub.add_parser("maxq", parents=[common, model], help="maximum-quantile search")
    p.add_argument("--level", type=_probability, default=0.95)
    p.add_argument("--lower", help="search box lower corner")
    p.add_argument("--upper", help="search box upper corner")
    p.add_argument("--budget", type=_positive_int)
    p.add_argument("--n-per-eval", type=_positive_int)
    p.add_argument("--per-mu", action="store_true", help="one quantile per value of h @ x")
    p.add_argument("--mu-grid", help="comma-separated grid for --per-mu")
    p.set_defaults(func=cmd_maxq)

    p = sub.add_parser("dominance", parents=[common, model], help="stochastic dominance check")
    p.add_argument("--xstar", required=True)
    p.add_argument("--n", type=_positive_int, default=1_000_000)
    p.add_argument("--df", type=_positive_int, default=1)
    p.set_defaults(func=cmd_dominance)

    p = sub.add_parser("counterexample", parents=[common], help="counterexample checks")
    p.add_argument("--check", choices=("mean", "coupling", "divergence"), default="mean")
    p.add_argument("--n", type=_positive_int, default=1_000_000)
    p.add_argument("--p-list", default="3,6,12,24")
    p.set_defaults(func=cmd_counterexample)

    p = sub.add_parser("quantile-curve", parents=[common], help="null quantiles along (t, t, 1)")
    p.add_argument("--level", type=_probability, default=0.68)
    p.add_argument("--t-grid", help="comma-separated t values in (0, e]")
    p.add_argument("--n", type=_positive_int, default=100_000)
    p.add_argument("--conf", type=_probability, default=0.95)
    p.set_defaults(func=cmd_quantile_curve)
    return parser


_VECTOR_FLAGS = ("--y", "--xstar", "--lower", "--upper", "--mu-grid", "--t-grid")


def _join_negative_vectors(argv: list[str]) -> list[str]:
    """Rewrite ``--y -1,-2`` as ``--y=-1,-2`` so argparse does not read an option."""
    out, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a in _VECTOR_FLAGS and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"{a}={argv[i + 1]}")
            i += 2
            continue
        out.append(a)
        i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = parser.parse_args(_join_negative_vectors(argv))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"llrbounds: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"llrbounds: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"llrbounds: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
