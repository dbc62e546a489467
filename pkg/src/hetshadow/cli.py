"""Command-line front end: hetshadow <command> [options].

Exit codes: 0 pass, 1 check failed, 2 bad configuration or missing input.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from . import enclosure, render, shadow
from .model import ConfigError, check_hypotheses, load_model, model_from_dict

OK, FAIL, CONFIG = 0, 1, 2


class UsageError(Exception):
    pass


def _model(args, n=None):
    spec = args.model
    if spec.endswith(".json") or os.sep in spec:
        if not os.path.exists(spec):
            raise FileNotFoundError(spec)
        return load_model(spec)
    return model_from_dict({"preset": spec, "n": n if n is not None else args.n})


def _out(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _sigma(args, n):
    # four or more modes need the wider section (see README)
    if args.sigma is not None:
        return args.sigma
    return 0.05 if n <= 3 else 0.1


def cmd_verify_model(args):
    model = _model(args)
    rep = check_hypotheses(model, sample_count=100, seed=args.seed)
    payload = {"model": model.name, "n": model.n, **rep.to_dict()}
    enclosure.write_json(_out(args, "model_report.json"), payload)
    for k, v in rep.violations.items():
        print(f"{k:12s} {v:.3e}")
    for k, v in rep.flags.items():
        print(f"{k:12s} {v}")
    if rep.passed:
        print("PASS")
        return OK
    print("FAIL: " + ", ".join(rep.failures))
    return FAIL


def cmd_portrait(args):
    model = _model(args)
    j, k = args.j, args.k
    if not (1 <= j <= model.n and 1 <= k <= model.n) or j == k:
        raise UsageError(f"need distinct 1 <= j, k <= {model.n}")
    data = render.portrait(model, j, k, grid=args.grid, seed=args.seed)
    svg = _out(args, f"portrait_j{j}_k{k}.svg")
    render.write_portrait(svg, _out(args, f"portrait_j{j}_k{k}.csv"), data)
    kinds = {}
    for e in data["equilibria"]:
        kinds[e["kind"]] = kinds.get(e["kind"], 0) + 1
    print(f"equilibria: {kinds}; straight heteroclinic lines: {len(data['lines'])}")
    print(svg)
    return OK


def cmd_classify(args):
    table = enclosure.enumerate_and_classify(args.max_degree)
    enclosure.write_json(_out(args, "classification.json"), table.to_dict())
    for v in enclosure.SADDLE_VARS:
        counts = {c: table.count(c, v) for c in (enclosure.VERY_SUITABLE, enclosure.POTENTIALLY_SUITABLE,
                                                 enclosure.UNSUITABLE)}
        print(f"{v:3s} " + "  ".join(f"{c}={k}" for c, k in counts.items()))
    for v, lab in table.potentially_suitable():
        print(f"potentially suitable: {v} <- {lab}")
    return OK if table.count(enclosure.UNSUITABLE) == 0 else FAIL


def cmd_enclosure(args):
    sigma = args.sigma if args.sigma is not None else 0.01
    T = args.T if args.T is not None else 12.0
    system = enclosure.build_synthetic_nf_system(enclosure.all_resonant_cubics(seed=args.seed),
                                                 nu=(1.0, 1.5), rho=1.0)
    params = enclosure.WTubeParams(T=T, sigma=sigma, A=3.0)
    params = dataclasses.replace(params, K=enclosure.estimate_K(system, params))
    tubes = enclosure.verify_tube_enclosure(system, params, count=20, seed=args.seed)
    center = enclosure.verify_center_modulus(system, params, count=20, seed=args.seed)
    enclosure.write_json(_out(args, "enclosure.json"), {"tubes": tubes.to_dict(), "center": center.to_dict()})
    for name, r in tubes.relative.items():
        print(f"tube {name:3s} relative slack {r:.4f}")
    print(f"center log drift {center.worst_log_drift:.4f} (band {center.band:.4f})")
    ok = tubes.passed and center.passed
    print("PASS" if ok else f"FAIL: {tubes.witness or 'center modulus band'}")
    return OK if ok else FAIL


def _chain(args, model, log=print):
    cfg = shadow.ChainConfig(model.n, _sigma(args, model.n), args.T if args.T is not None else 10.0,
                             grid=args.grid)
    if args.T is not None:
        return shadow.verify_chain(model, cfg, seed=args.seed)
    return shadow.find_chain(model, cfg, log=log)


def cmd_covering(args):
    model = _model(args)
    rep = _chain(args, model)
    shadow.write_report(_out(args, "chain_report.json"), rep)
    for v in rep.links:
        tag = "pass" if v["passed"] else "FAIL"
        print(f"{v['name']:12s} {tag}  entry {v['entry_margin']:+.3e}  exit {v['exit_margin']:+.3e}"
              + (f"  {v['message']}" if not v["passed"] and v["message"] else ""))
    if rep.passed:
        print(f"PASS at T={rep.T:g}")
        return OK
    print(f"FAIL at T={rep.T:g}: " + ", ".join(rep.failed))
    return FAIL


def cmd_shadow(args):
    model = _model(args, n=args.n if args.n is not None else 4)
    rep = _chain(args, model)
    if not rep.passed:
        print("chain not verified: " + ", ".join(rep.failed))
        return FAIL
    cfg = shadow.ChainConfig(model.n, rep.config["sigma"], rep.T, grid=args.grid)
    res = shadow.shoot_shadowing_orbit(model, cfg, rep, log=print)
    d = res.diagnostics
    shadow.write_mass_csv(_out(args, "masses.csv"), res)
    render.mass_cascade_svg(_out(args, "mass_cascade.svg"), res.times, res.masses,
                            title=f"mode masses, n={model.n}, T={rep.T:g}, sigma={d['sigma']:g}")
    summary = {k: v for k, v in d.items() if k != "history"}
    summary["q"] = res.q
    enclosure.write_json(_out(args, "shadow.json"), summary)
    for name, m in d["membership"].items():
        print(f"{name:10s} {m}")
    print(f"dominance {d['dominance_order']}, peak |b{model.n}|^2 = {d['peak_last_mode']:.4f}, "
          f"max distance to chain {d['max_deviation']:.2e}")
    ok = d["entered_all"] and d["dominance_order"] == list(range(1, model.n + 1))
    print("PASS" if ok else "FAIL")
    return OK if ok else FAIL


COMMANDS = {"verify-model": cmd_verify_model, "portrait": cmd_portrait, "classify": cmd_classify,
            "enclosure": cmd_enclosure, "covering": cmd_covering, "shadow": cmd_shadow}


def build_parser():
    p = argparse.ArgumentParser(prog="hetshadow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--model", default="ck", help="preset (ck, nh) or JSON model file")
        s.add_argument("--n", type=int, default=None, help="number of modes for presets")
        s.add_argument("--j", type=int, default=1)
        s.add_argument("--k", type=int, default=2)
        s.add_argument("--sigma", type=float, default=None)
        s.add_argument("--T", type=float, default=None, help="fixed T (default: search)")
        s.add_argument("--grid", type=int, default=5)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", default="out")
        if name == "classify":
            s.add_argument("--max-degree", type=int, default=9)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.n is None and args.command != "shadow":
        args.n = 3
    threads = os.environ.get("HETSHADOW_THREADS")
    try:
        if threads is not None and int(threads) < 1:
            raise UsageError("HETSHADOW_THREADS must be a positive integer")
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc}", file=sys.stderr)
        return CONFIG
    except (ConfigError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return CONFIG
    except shadow.SearchFailedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return FAIL


if __name__ == "__main__":
    sys.exit(main())
