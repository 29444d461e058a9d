"""Command line runner: solve, simulate, diagnose, DI probes and stability checks.

Every command writes its outputs into one directory and finishes by writing
manifest.json, which lists the files with their checksums.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from . import __version__
from . import di as di_mod
from . import dynamics as dyn
from . import equilibrium as eq
from .model import BerkNashError, GameScenario, Scenario, ValidationError, build_scenario, dumps_spec, load_scenario, scenario_to_spec
from .scenarios import describe_builtin, list_builtins, make_builtin

log = logging.getLogger("berknash")

EXIT_OK, EXIT_VALIDATION, EXIT_NONCONVERGENCE = 0, 2, 3
WORKERS_ENV = "BERKNASH_WORKERS"


# Output helpers -----------------------------------------------------------------------


def _fmt(x: Any) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if x is None:
        return ""
    return str(x)


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(x) for x in row) + "\n")


def _jsonable(obj: Any) -> Any:
    return eq._plain(obj)


def write_jsonl(path: str, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(_jsonable(rec)) + "\n")


def _sha256_file(path: str) -> str:
    return dyn._sha256(path)


@dataclass
class RunManifest:
    command: str
    scenario: dict
    output_dir: str
    seeds: list = field(default_factory=list)
    horizons: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)
    status: str = "complete"
    tool_version: str = __version__

    @property
    def config_checksum(self) -> str:
        blob = json.dumps({"command": self.command, "scenario": self.scenario, "config": self.config}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def write(self, directory: str) -> None:
        """Checksum every listed file and write the manifest; this is the commit point."""
        out = asdict(self)
        out["config_checksum"] = self.config_checksum
        out["checksums"] = {name: _sha256_file(os.path.join(directory, name)) for name in sorted(self.files)}
        with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(_jsonable(out), fh, indent=1, sort_keys=True)
            fh.write("\n")


# Scenario resolution --------------------------------------------------------------------


def _parse_params(items: Sequence[str] | None) -> dict:
    params: dict = {}
    for item in items or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValidationError(f"parameter {item!r} is not key=value")
        try:
            params[key] = json.loads(raw)
        except json.JSONDecodeError:
            params[key] = raw
    return params


def resolve_scenario(ref: str, params: dict) -> tuple[Scenario | GameScenario, dict]:
    if os.path.isfile(ref):
        if params:
            raise ValidationError("--param applies only to builtin scenarios")
        with open(ref, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        return load_scenario(ref), {"file": ref, "sha256": digest}
    return make_builtin(ref, params), {"builtin": ref, "params": params}


def _need_single(scn) -> Scenario:
    if isinstance(scn, GameScenario):
        raise ValidationError("this command needs a single-agent scenario")
    return scn


def _out_dir(args, default: str) -> str:
    d = args.out or default
    os.makedirs(d, exist_ok=True)
    return d


def _parse_seeds(text: str) -> list[int]:
    seeds: list[int] = []
    for part in text.split(","):
        lo, sep, hi = part.partition("..")
        if sep:
            a, b = int(lo), int(hi)
            if b < a:
                raise ValidationError(f"empty seed range {part!r}")
            seeds.extend(range(a, b + 1))
        else:
            seeds.append(int(part))
    return seeds


def _parse_vector(text: str) -> list[float]:
    return [float(x) for x in text.split(",")]


def _workers(args) -> int:
    if getattr(args, "workers", None):
        return max(1, int(args.workers))
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


# Commands ------------------------------------------------------------------------------------


def cmd_scenario(args) -> int:
    if args.action == "list":
        for name in list_builtins():
            print(f"{name}\t{describe_builtin(name)['summary']}")
        return EXIT_OK
    if not args.name:
        raise ValidationError(f"scenario {args.action} needs a name")
    if args.action == "show":
        print(json.dumps(_jsonable(describe_builtin(args.name)), indent=1))
        return EXIT_OK
    scn = _need_single(resolve_scenario(args.name, _parse_params(args.param))[0])
    text = dumps_spec(scenario_to_spec(scn))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_solve(args) -> int:
    params = _parse_params(args.param)
    scn, ref = resolve_scenario(args.scenario, params)
    out = _out_dir(args, os.path.join("runs", f"solve-{os.path.basename(args.scenario)}"))
    manifest = RunManifest("solve", ref, out, config={"mode": args.mode, "tau": args.tau, "tol": args.tol})
    records: list[dict] = []
    code = EXIT_OK
    try:
        if isinstance(scn, GameScenario) or args.mode == "game":
            if not isinstance(scn, GameScenario):
                raise ValidationError("--game needs a game scenario")
            records = [eq.game_profile_json(r) for r in eq.find_game_bne(scn, tol=args.tol)]
        elif args.mode == "rationalize":
            seq = eq.rationalizable_set(scn, tol=args.tol)
            records = [{"step": k, "actions": list(s)} for k, s in enumerate(seq)]
        elif args.mode == "intended":
            if args.tau is None:
                raise ValidationError("--intended needs a temperature")
            records = [r.to_json() for r in eq.find_intended_bne(scn, args.tau)]
        elif args.mode == "mixed-binary":
            records = [r.to_json() for r in eq.find_mixed_bne_binary(scn, tol=args.tol)]
        else:
            records = [r.to_json() for r in eq.find_pure_bne(scn, tol=args.tol)]
    except eq.NonConvergence as exc:
        log.error("solver did not converge: %s", exc)
        manifest.status = "partial"
        code = EXIT_NONCONVERGENCE
    write_jsonl(os.path.join(out, "results.jsonl"), records)
    manifest.files["results.jsonl"] = "jsonl"
    manifest.write(out)
    return code


def _simulate_one(job: tuple) -> dict:
    spec, T, seed, policy, directory = job
    scn = build_scenario(spec)
    path = dyn.simulate_path(scn, None, T, seed, policy)
    path.save(directory)
    final = np.exp(path.checkpoint_logw[-1])
    sigma = path.checkpoint_sigma[-1]
    return {
        "seed": seed,
        "horizon": T,
        "last_action": int(path.actions[-1]),
        "modal_action": int(np.argmax(sigma)),
        "modal_frequency": float(sigma.max()),
        "map_theta": int(np.argmax(final)),
        "map_mass": float(final.max()),
    }


SUMMARY_FIELDS = ["seed", "horizon", "last_action", "modal_action", "modal_frequency", "map_theta", "map_mass"]


def cmd_simulate(args) -> int:
    params = _parse_params(args.param)
    scn, ref = resolve_scenario(args.scenario, params)
    scn = _need_single(scn)
    seeds = _parse_seeds(args.seeds)
    policy = dyn.Policy.parse(args.policy)
    out = _out_dir(args, os.path.join("runs", f"simulate-{os.path.basename(args.scenario)}"))
    spec = scenario_to_spec(scn)
    with open(os.path.join(out, "scenario.json"), "w", encoding="utf-8") as fh:
        fh.write(dumps_spec(spec))
    jobs = [(spec, args.horizon, s, args.policy, os.path.join(out, "paths", f"seed_{s}")) for s in seeds]
    workers = _workers(args)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_simulate_one, jobs))
    else:
        rows = [_simulate_one(j) for j in jobs]
    rows.sort(key=lambda r: r["seed"])
    write_csv(os.path.join(out, "summary.csv"), SUMMARY_FIELDS, ([r[k] for k in SUMMARY_FIELDS] for r in rows))
    manifest = RunManifest(
        "simulate", ref, out, seeds, [args.horizon], {"policy": policy.describe(), "paths": [os.path.relpath(j[4], out) for j in jobs]}
    )
    manifest.files = {"scenario.json": "spec", "summary.csv": "csv"}
    manifest.write(out)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    run = args.run_dir
    with open(os.path.join(run, "manifest.json"), encoding="utf-8") as fh:
        man = json.load(fh)
    if man.get("command") != "simulate":
        raise ValidationError("diagnose needs a directory written by simulate")
    scn = load_scenario(os.path.join(run, "scenario.json"))
    out = _out_dir(args, os.path.join(run, "diagnose"))
    records, rows = [], []
    for rel in man["config"]["paths"]:
        path = dyn.load_path(os.path.join(run, rel))
        window = args.window or max(1, path.horizon // 10)
        rec: dict = {"path": rel, "seed": path.seed}
        conv = dyn.diagnose_convergence(scn, path, window)
        rec["convergence"] = conv.to_json()
        sigma = dyn.empirical_frequency(path, path.horizon).probs
        mins = set(int(i) for i in eq.min_set_indices(scn.kl_table @ sigma))
        C = args.rate_set if args.rate_set is not None else [i for i in range(scn.n_theta) if i not in mins]
        try:
            rec["concentration"] = dyn.concentration_rate(scn, path, C).to_json()
            rec["concentration"]["C"] = C
        except BerkNashError as exc:
            rec["concentration"] = {"error": str(exc), "C": C}
        if scn.n_theta >= 2:
            th, thp = args.theta, args.theta_prime
            rec["oscillation"] = dyn.oscillation_stats(scn, path, th, thp).to_json()
            rec["oscillation"].update({"theta": th, "theta_prime": thp})
        records.append(rec)
        osc = rec.get("oscillation", {})
        conc = rec["concentration"]
        rows.append(
            [
                path.seed if not isinstance(path.seed, list) else "-".join(map(str, path.seed)),
                path.horizon,
                conv.action_limit,
                conv.frequency_limit is not None,
                conc.get("slope"),
                conc.get("rho_C"),
                osc.get("crossings"),
                osc.get("equal_odds_visits"),
                osc.get("min_mass"),
                osc.get("max_mass"),
                osc.get("replay_exact"),
            ]
        )
    write_jsonl(os.path.join(out, "diagnose.jsonl"), records)
    header = ["seed", "horizon", "action_limit", "frequency_limit", "slope", "rho_C", "crossings", "equal_odds_visits", "min_mass", "max_mass", "replay_exact"]
    write_csv(os.path.join(out, "diagnose.csv"), header, rows)
    manifest = RunManifest(
        "diagnose",
        man["scenario"],
        out,
        man.get("seeds", []),
        man.get("horizons", []),
        {"run_dir": run, "window": args.window, "theta": args.theta, "theta_prime": args.theta_prime, "rate_set": args.rate_set},
    )
    manifest.files = {"diagnose.jsonl": "jsonl", "diagnose.csv": "csv"}
    manifest.write(out)
    return EXIT_OK


def cmd_di(args) -> int:
    params = _parse_params(args.param)
    scn, ref = resolve_scenario(args.scenario, params)
    scn = _need_single(scn)
    out = _out_dir(args, os.path.join("runs", f"di-{os.path.basename(args.scenario)}"))
    config = {"eps": args.eps, "dt": args.dt, "T": args.T, "selection": args.selection}
    manifest = RunManifest("di", ref, out, config=config)
    if args.integrate:
        if not args.start:
            raise ValidationError("--integrate needs --from")
        config["from"] = args.start
        tr = di_mod.integrate_di(scn, _parse_vector(args.start), args.T, args.dt, args.selection)
        with open(os.path.join(out, "trajectory.csv"), "w", encoding="utf-8") as fh:
            fh.write(tr.to_csv())
        manifest.files["trajectory.csv"] = "csv"
    else:
        if args.candidate:
            cands = [_parse_vector(c) for c in args.candidate]
        else:
            found = eq.find_mixed_bne_binary(scn) if scn.n_actions == 2 else eq.find_pure_bne(scn)
            cands = [r.sigma.probs.tolist() for r in found]
        if not cands:
            raise ValidationError("no candidate set given and no equilibrium found")
        config["candidates"] = cands
        verdict = di_mod.probe_global_attraction(scn, cands, eps=args.eps, T=args.T, dt=args.dt)
        rec = verdict.to_json()
        rec["candidates"] = cands
        if verdict.counterexample is not None:
            cx = verdict.counterexample
            tr = di_mod.integrate_di(scn, cx["start"], args.T, args.dt, cx["selection"])
            with open(os.path.join(out, "counterexample.csv"), "w", encoding="utf-8") as fh:
                fh.write(tr.to_csv())
            manifest.files["counterexample.csv"] = "csv"
            rec["counterexample_file"] = "counterexample.csv"
        write_jsonl(os.path.join(out, "verdict.jsonl"), [rec])
        manifest.files["verdict.jsonl"] = "jsonl"
    manifest.write(out)
    return EXIT_OK


def cmd_stability(args) -> int:
    params = _parse_params(args.param)
    scn, ref = resolve_scenario(args.scenario, params)
    scn = _need_single(scn)
    if not 0 <= args.theta < scn.n_theta:
        raise ValidationError(f"theta must lie in [0, {scn.n_theta - 1}]")
    out = _out_dir(args, os.path.join("runs", f"stability-{os.path.basename(args.scenario)}"))
    rep = dyn.classify_stability(scn, args.theta, neighborhood_radius=args.radius, belief_mesh=args.mesh)
    write_jsonl(os.path.join(out, "stability.jsonl"), [rep.to_json()])
    manifest = RunManifest("stability", ref, out, config={"theta": args.theta, "radius": args.radius, "mesh": args.mesh})
    manifest.files["stability.jsonl"] = "jsonl"
    manifest.write(out)
    return EXIT_OK


def cmd_probe(args) -> int:
    params = _parse_params(args.param)
    scn, ref = resolve_scenario(args.scenario, params)
    scn = _need_single(scn)
    out = _out_dir(args, os.path.join("runs", f"probe-{os.path.basename(args.scenario)}"))
    rep = dyn.probe_attraction(
        scn, args.action, args.mode, args.reps, args.horizon, args.seed, args.eps, args.kappa, policy=args.policy
    )
    header = ["action", "mode", "successes", "reps", "estimate", "wilson_lo", "wilson_hi", "eps", "kappa", "horizon", "seed", "meets_target"]
    row = [rep.action, rep.mode, rep.successes, rep.reps, rep.estimate, rep.interval[0], rep.interval[1], args.eps, args.kappa, args.horizon, args.seed, rep.meets_target]
    write_csv(os.path.join(out, "probe.csv"), header, [row])
    manifest = RunManifest("probe", ref, out, [args.seed], [args.horizon], {"action": args.action, "mode": args.mode, "reps": args.reps, "eps": args.eps, "kappa": args.kappa, "policy": args.policy})
    manifest.files["probe.csv"] = "csv"
    manifest.write(out)
    return EXIT_OK


# Parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="berknash", description="Equilibrium and learning experiments for misspecified Bayesian agents.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, scenario=True):
        if scenario:
            sp.add_argument("scenario", help="builtin name or path to a scenario spec file")
            sp.add_argument("--param", action="append", metavar="KEY=VALUE", help="builtin parameter (repeatable)")
        sp.add_argument("--out", help="output directory")

    s = sub.add_parser("scenario", help="list, show or export builtin scenarios")
    s.add_argument("action", choices=["list", "show", "export"])
    s.add_argument("name", nargs="?")
    s.add_argument("--param", action="append", metavar="KEY=VALUE")
    s.add_argument("--out", help="file for export (default: stdout)")
    s.set_defaults(func=cmd_scenario)

    s = sub.add_parser("solve", help="find equilibria")
    common(s)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--pure", dest="mode", action="store_const", const="pure")
    g.add_argument("--mixed-binary", dest="mode", action="store_const", const="mixed-binary")
    g.add_argument("--intended", dest="tau", type=float, metavar="TAU")
    g.add_argument("--game", dest="mode", action="store_const", const="game")
    g.add_argument("--rationalize", dest="mode", action="store_const", const="rationalize")
    s.add_argument("--tol", type=float, default=eq.DEFAULT_OPT_TOL)
    s.set_defaults(func=cmd_solve, mode="pure")

    s = sub.add_parser("simulate", help="simulate learning paths")
    common(s)
    s.add_argument("--seeds", default="0", help="e.g. 0..99 or 1,2,5")
    s.add_argument("--horizon", type=int, required=True)
    s.add_argument("--policy", default="myopic", help="myopic[:tol], logit:tau or override")
    s.add_argument("--workers", type=int, help=f"worker processes (default ${WORKERS_ENV} or 1)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("diagnose", help="convergence, concentration and oscillation of a simulate run")
    s.add_argument("run_dir")
    s.add_argument("--out")
    s.add_argument("--window", type=int)
    s.add_argument("--theta", type=int, default=0)
    s.add_argument("--theta-prime", type=int, default=1)
    s.add_argument("--rate-set", type=lambda t: [int(x) for x in t.split(",")])
    s.set_defaults(func=cmd_diagnose)

    s = sub.add_parser("di", help="differential inclusion probes")
    common(s)
    m = s.add_mutually_exclusive_group(required=True)
    m.add_argument("--probe-attraction", action="store_true")
    m.add_argument("--integrate", action="store_true")
    s.add_argument("--from", dest="start", help="start mixed action, comma separated")
    s.add_argument("--candidate", action="append", help="candidate mixed action (repeatable)")
    s.add_argument("--selection", default="min_speed", choices=list(di_mod.SELECTIONS))
    s.add_argument("--eps", type=float, default=0.01)
    s.add_argument("--dt", type=float, default=1e-3)
    s.add_argument("--T", type=float, default=40.0)
    s.set_defaults(func=cmd_di)

    s = sub.add_parser("stability", help="local stability of a point belief")
    common(s)
    s.add_argument("--theta", type=int, required=True)
    s.add_argument("--radius", type=float, default=0.05)
    s.add_argument("--mesh", type=int, default=25)
    s.set_defaults(func=cmd_stability)

    s = sub.add_parser("probe", help="Monte Carlo attraction probe for one action")
    common(s)
    s.add_argument("--action", type=int, required=True)
    s.add_argument("--mode", default="positive_attraction", choices=["positive_attraction", "uniform_stability"])
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--horizon", type=int, default=2000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eps", type=float, default=0.05)
    s.add_argument("--kappa", type=float)
    s.add_argument("--policy", default="myopic")
    s.set_defaults(func=cmd_probe)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "tau", None) is not None:
        args.mode = "intended"
    try:
        return args.func(args)
    except eq.NonConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (BerkNashError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
