"""``sketchpriv`` command-line entry point.

Exit codes: 0 success, 2 domain error, 3 I/O error, 4 policy violation.
Every command echoes its resolved configuration (seed included) on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from sketchpriv import attacks, bounds
from sketchpriv import sketches as sk
from sketchpriv.errors import (
    DomainError,
    FormatError,
    PolicyViolation,
    ServiceUnavailable,
    SketchPrivError,
)

EXIT_OK, EXIT_DOMAIN, EXIT_IO, EXIT_POLICY = 0, 2, 3, 4

DESK_MAX_ADDS = 10**8

log = logging.getLogger("sketchpriv")


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, PolicyViolation):
        return EXIT_POLICY
    if isinstance(exc, (FormatError, ServiceUnavailable, OSError)):
        return EXIT_IO
    return EXIT_DOMAIN


def _echo_config(args: argparse.Namespace, **extra) -> None:
    cfg = {k: v for k, v in vars(args).items() if k != "func" and not callable(v)}
    cfg.update(extra)
    print("# config " + json.dumps(cfg, sort_keys=True, default=str), file=sys.stderr)


def _write(text: str, out: str | None) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).write_text(text, encoding="utf-8")


def _parse_ints(text: str) -> list[int]:
    """``a,b,c`` or an inclusive ``start:stop:step`` range."""
    text = text.strip()
    if ":" in text:
        parts = [int(float(x)) for x in text.split(":")]
        if len(parts) == 2:
            parts.append(1)
        start, stop, step = parts
        if step <= 0:
            raise DomainError("range step must be positive")
        return list(range(start, stop + 1, step))
    return [int(float(x)) for x in text.split(",") if x]


def _load_salt(path: str | None) -> sk.Salt:
    return sk.DEFAULT_SALT if path is None else sk.Salt.load(path)


def _algo_param(args: argparse.Namespace) -> tuple[sk.Algo, int]:
    algo = sk.parse_algo(args.algo)
    if algo in (sk.Algo.KMV, sk.Algo.PCSA):
        return algo, args.k
    return algo, args.p


def _read_sketch(path: str) -> sk.Sketch:
    return sk.deserialize(Path(path).read_bytes())


def _read_elements(path: str) -> list[bytes]:
    from sketchpriv.service import parse_elements

    data = sys.stdin.buffer.read() if path == "-" else Path(path).read_bytes()
    return parse_elements(data)


# --- commands --------------------------------------------------------------


def cmd_build(args) -> int:
    algo, param = _algo_param(args)
    _echo_config(args, resolved_algo=algo.name, resolved_param=param)
    salt = _load_salt(args.salt_file)
    m = sk.build(algo, param, _read_elements(args.input), salt)
    if args.out:
        Path(args.out).write_bytes(sk.serialize(m))
    est = sk.estimate(m)
    if args.json:
        print(json.dumps({"algo": algo.name, "param": param, "estimate": est,
                          "out": args.out}))
    else:
        print(f"{est:.6g}")
    return EXIT_OK


def cmd_merge(args) -> int:
    _echo_config(args)
    m = sk.merge_all(_read_sketch(p) for p in args.sketches)
    Path(args.out).write_bytes(sk.serialize(m))
    print(f"{sk.estimate(m):.6g}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    _echo_config(args)
    m = sk.merge_all(_read_sketch(p) for p in args.sketches)
    print(f"{sk.estimate(m):.6g}")
    return EXIT_OK


def cmd_bounds(args) -> int:
    eps = math.log(2) if args.epsilon is None else args.epsilon
    n_values = _parse_ints(args.n)
    _echo_config(args, resolved_epsilon=eps, points=len(n_values))
    regime = bounds.Regime(args.regime)
    if regime is bounds.Regime.DELTA and args.delta is None:
        raise DomainError("--delta is required for the delta regime")
    delta = args.delta if regime is bounds.Regime.DELTA else None
    rows = bounds.min_std_error_curve(eps, args.N, n_values, regime, delta)
    _write(bounds.std_error_csv(rows), args.out)
    return EXIT_OK


def cmd_hll_privacy(args) -> int:
    ps = _parse_ints(args.p)
    ns = _parse_ints(args.n)
    _echo_config(args, resolved_p=ps, points=len(ns))
    _write(bounds.hll_privacy_csv(bounds.hll_privacy_rows(ps, ns)), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    full = args.scale == "full"
    targets = args.targets or (attacks.FULL_TARGETS if full else attacks.DESK_TARGETS)
    sketches = args.sketches or (attacks.FULL_SKETCHES if full else attacks.DESK_SKETCHES)
    cards = _parse_ints(args.cardinalities) if args.cardinalities else list(
        attacks.FULL_CARDINALITIES if full else attacks.DESK_CARDINALITIES)
    adds = sketches * sum(cards)
    _echo_config(args, resolved_targets=targets, resolved_sketches=sketches,
                 resolved_cardinalities=cards, total_adds=adds)
    if not full and adds > DESK_MAX_ADDS:
        raise DomainError(f"{adds} adds exceeds the desk-scale budget; pass --scale full")
    report = attacks.simulate_ignore_probabilities(args.p, cards, targets, sketches,
                                                   args.seed, args.threads)
    _write(report.to_csv(), args.out)
    if args.json_out:
        Path(args.json_out).write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_attack_membership(args) -> int:
    _echo_config(args)
    m = _read_sketch(args.sketch)
    salt = _load_salt(args.salt_file)
    v = attacks.membership_attack(m, args.target.encode("utf-8"), salt, args.prior,
                                  ignore_prob=args.ignore_prob)
    doc = {"attack": "membership", "changed": v.changed, "prior": args.prior,
           "ignore_prob": v.ignore_prob, "posterior": v.posterior}
    if args.json:
        print(json.dumps(doc))
    elif v.changed:
        print(f"sketch changed: target NOT in the set (posterior {v.posterior:.3f})")
    else:
        print(f"sketch unchanged: target likely in the set "
              f"(prior {args.prior:.3f} -> posterior {v.posterior:.3f})")
    return EXIT_OK


def cmd_attack_intersect(args) -> int:
    _echo_config(args)
    sketches = [_read_sketch(p) for p in args.sketches]
    target_hash = None
    if args.target is not None:
        target_hash = sk.hash_element(args.target.encode("utf-8"), _load_salt(args.salt_file))
    f = attacks.intersection_attack(sketches, target_hash)
    if f.algo == sk.Algo.KMV:
        cands = [f"{h:016x}" for h in sorted(f.candidate_constraints)]
    else:
        cands = sorted(list(c) for c in f.candidate_constraints)
    doc = {"attack": "intersect", "algo": f.algo.name, "sketches": f.num_sketches_used,
           "candidate_count": f.candidate_count, "candidates": cands,
           "contains_target": f.contains_target}
    if args.json:
        print(json.dumps(doc))
    else:
        print(f"{f.candidate_count} candidate(s) common to {f.num_sketches_used} sketches")
        if f.contains_target is not None:
            print("target consistent with all sketches" if f.contains_target
                  else "target excluded")
    return EXIT_OK


def cmd_attack_external(args) -> int:
    from sketchpriv.service import ServiceClient

    _echo_config(args)
    client = ServiceClient(args.url)
    r = attacks.external_api_attack(client, (args.dimension, args.period),
                                    args.target.encode("utf-8"), args.rounding)
    doc = {"attack": "external", "guess": r.guess, "estimates": list(r.estimates),
           "rounding": args.rounding}
    if args.json:
        print(json.dumps(doc))
    else:
        verdict = "target likely in the set" if r.guess else "target NOT in the set"
        print(f"{verdict} (estimates {r.estimates[0]:g} vs {r.estimates[1]:g})")
    return EXIT_OK


def cmd_serve(args) -> int:
    from sketchpriv.service import ApiMode, ApiPolicy, SketchService, make_server

    algo, param = _algo_param(args)
    mode = ApiMode.RESTRICTED if args.restricted else ApiMode.RAW
    audit = args.audit_log or (str(Path(args.root) / "audit.jsonl") if args.restricted else None)
    _echo_config(args, mode=mode.value, audit_log=audit)
    salt = _load_salt(args.salt_file)
    policy = ApiPolicy(mode, args.rounding, audit)
    service = SketchService(args.root, salt, policy, algo, param)
    server = make_server(service, args.host, args.port)
    host, port = server.server_address[:2]
    print(f"serving on http://{host}:{port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def _add_algo_flags(p: argparse.ArgumentParser, algo: str = "hll") -> None:
    p.add_argument("--algo", default=algo, choices=["kmv", "pcsa", "loglog", "hll"])
    p.add_argument("--p", type=int, default=12, help="register index bits (loglog/hll)")
    p.add_argument("--k", type=int, default=1024, help="list size (kmv) or bitmap count (pcsa)")
    p.add_argument("--salt-file", help="hex-encoded secret salt; unsalted if omitted")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sketchpriv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="sketch a newline-delimited element file")
    p.add_argument("input", help="element file, or - for stdin")
    _add_algo_flags(p)
    p.add_argument("--out", help="write the binary sketch here")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("merge", help="merge sketch files")
    p.add_argument("sketches", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("estimate", help="estimate the union of sketch files")
    p.add_argument("sketches", nargs="+")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bounds", help="minimum standard error of a private estimator (CSV)")
    p.add_argument("--regime", default="pure", choices=[r.value for r in bounds.Regime])
    p.add_argument("--epsilon", type=float, help="privacy parameter (default ln 2)")
    p.add_argument("--delta", type=float)
    p.add_argument("--N", type=int, default=100, help="minimum protected cardinality")
    p.add_argument("--n", default="100:20000:100", help="cardinalities: list or start:stop:step")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("hll-privacy", help="average HLL privacy loss per (p, n) (CSV)")
    p.add_argument("--p", default="9,12,15")
    p.add_argument("--n", default="100:100000:100")
    p.add_argument("--out")
    p.set_defaults(func=cmd_hll_privacy)

    p = sub.add_parser("simulate", help="Monte-Carlo ignore probabilities for HLL")
    p.add_argument("--p", type=int, default=15)
    p.add_argument("--cardinalities", help="list or range; scale default if omitted")
    p.add_argument("--targets", type=int)
    p.add_argument("--sketches", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", default="desk", choices=["desk", "full"])
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="CSV output (stdout if omitted)")
    p.add_argument("--json-out", help="also write the JSON report here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("attack", help="run a membership attack")
    asub = p.add_subparsers(dest="attack", required=True)

    a = asub.add_parser("membership", help="add-and-check against a sketch file")
    a.add_argument("--sketch", required=True)
    a.add_argument("--target", required=True)
    a.add_argument("--salt-file")
    a.add_argument("--prior", type=float, default=0.01)
    a.add_argument("--ignore-prob", type=float, help="known ignore probability q")
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_attack_membership)

    a = asub.add_parser("intersect", help="intersect sketches sharing one element")
    a.add_argument("sketches", nargs="+")
    a.add_argument("--target", help="check this element against the result")
    a.add_argument("--salt-file")
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_attack_intersect)

    a = asub.add_parser("external", help="attack through a merge/estimate-only service")
    a.add_argument("--url", required=True)
    a.add_argument("--dimension", required=True)
    a.add_argument("--period", required=True)
    a.add_argument("--target", required=True)
    a.add_argument("--rounding", type=int, default=1)
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_attack_external)

    p = sub.add_parser("serve", help="run the sketch service over HTTP")
    p.add_argument("--root", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    _add_algo_flags(p)
    p.set_defaults(p=15)
    p.add_argument("--restricted", action="store_true")
    p.add_argument("--rounding", type=int, default=1)
    p.add_argument("--audit-log")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SketchPrivError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
