"""Command line entry point: ``tdmoments {learn,oracle,curves,compare}``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
import warnings
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import config as cfg
from .mdp import (
    CliffWalkConfig,
    MdpModel,
    PolicyTable,
    build_cliff_walk,
    risky_policy,
    safe_policy,
)
from .moments import (
    DivergenceError,
    FeatureMap,
    MomentEstimator,
    central_from_raw,
    default_step_sizes,
    run_policy_evaluation,
    uniform_start,
)
from .oracle import OracleEstimate, OracleQualityError, TruncationWarning, mapve, run_oracle
from .taylor import expand, register_builtin, truncation_report

log = logging.getLogger("tdmoments")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_ORACLE = 0, 2, 3, 4


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# building blocks


def build_model(config: dict) -> MdpModel:
    dom = config["domain"]
    if dom["type"] == "file":
        with open(dom["path"], encoding="utf-8") as fh:
            return MdpModel.from_dict(json.load(fh))
    fields = {k: dom[k] for k in ("width", "height", "slip_probability", "step_reward", "cliff_reward", "goal_reward", "discount")}
    return build_cliff_walk(CliffWalkConfig(**fields))


def build_policy(config: dict, model: MdpModel, which: str | None = None) -> PolicyTable:
    which = which or config["policy"]
    if which == "safe":
        return safe_policy(model)
    if which == "risky":
        return risky_policy(model)
    with open(config["policy_path"], encoding="utf-8") as fh:
        return PolicyTable.from_dict(json.load(fh))


def build_estimator(config: dict, model: MdpModel) -> MomentEstimator:
    learn = config["learn"]
    n = config["n"]
    return MomentEstimator(
        n,
        FeatureMap.tabular(model),
        model.discount,
        step_sizes=learn["step_sizes"] or default_step_sizes(n, learn["base_step_size"]),
        trace_decays=learn["trace_decays"],
        literal_trace=learn["literal_trace"],
    )


def functions_of(config: dict) -> dict:
    return {name: register_builtin(name) for name in config["utility"]["functions"]}


def digest(doc) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _header(config: dict) -> str:
    return f"# config: {cfg.dump(config)}\n"


def write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_csv(path: Path, config: dict, header: list[str], rows) -> None:
    buf = io.StringIO()
    buf.write(_header(config))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# ---------------------------------------------------------------------------
# commands


def utility_with_report(f, raw: list[float], center: str, order: int, state=None):
    ue = expand(f, raw, center, order, state=state)
    if center == "mean":
        report = truncation_report(f, "mean", central_from_raw(raw), order, mean=raw[1])
    else:
        report = truncation_report(f, "origin", raw, order)
    return ue, report


def cmd_learn(config: dict, out: Path) -> dict:
    model = build_model(config)
    policy = build_policy(config, model)
    est = build_estimator(config, model)
    learn = config["learn"]
    rng = np.random.default_rng(config["seed"])
    start = uniform_start(model) if learn["start"] == "uniform" else None
    history = run_policy_evaluation(
        model,
        policy,
        est,
        learn["episodes"],
        rng,
        max_steps=learn["max_steps"],
        snapshot_every=learn["snapshot_every"],
        start=start,
        step_decay=learn["step_decay"],
    )
    states = model.nonterminal_states
    write_csv(
        out / "learning_log.csv",
        config,
        ["episode", "moment_index", "state_id", "value"],
        history.rows(est.features, states),
    )
    util = config["utility"]
    rows = []
    for s in states:
        raw = est.values(s)
        for name, f in functions_of(config).items():
            ue, rep = utility_with_report(f, raw, util["center"], util["order"], state=s)
            rows.append((s, name, util["center"], util["order"], ue.value, int(rep.flagged)))
    write_csv(out / "utilities.csv", config, ["state_id", "function_name", "center", "order", "value", "flagged"], rows)
    snap = est.to_dict()
    snap.update(
        seed=config["seed"],
        config=config,
        episodes=learn["episodes"],
        truncated_episodes=history.truncated_episodes,
        start_state_moments=est.values(model.start_state)[1:],
    )
    write_json(out / "estimator.json", snap)
    return snap


def oracle_cache_path(config: dict, cache_dir: Path, policy_name: str | None = None) -> Path:
    model = build_model(config)
    policy = build_policy(config, model, policy_name)
    orc = config["oracle"]
    key = digest(
        {
            "model": digest(model.to_dict()),
            "policy": digest(policy.to_dict()),
            "n": config["n"],
            "functions": sorted(config["utility"]["functions"]),
            "rollouts": orc["rollouts"],
            "max_steps": orc["max_steps"],
            "seed": orc["seed"],
        }
    )
    return cache_dir / f"oracle-{key[:16]}.json"


def cmd_oracle(config: dict, out: Path, policy_name: str | None = None) -> tuple[Path, OracleEstimate]:
    path = oracle_cache_path(config, out, policy_name)
    if path.exists():
        log.info("oracle cache hit: %s", path)
        with open(path, encoding="utf-8") as fh:
            return path, OracleEstimate.from_dict(json.load(fh)["oracle"])
    model = build_model(config)
    policy = build_policy(config, model, policy_name)
    orc = config["oracle"]
    funcs = functions_of(config)
    est = run_oracle(
        model,
        policy,
        n=config["n"],
        functions={name: f.evaluate for name, f in funcs.items()},
        rollouts=orc["rollouts"],
        max_steps=orc["max_steps"],
        seed=orc["seed"],
    )
    write_json(
        path,
        {
            "config": config,
            "policy": policy_name or config["policy"],
            "model_hash": digest(model.to_dict()),
            "policy_hash": digest(policy.to_dict()),
            "oracle": est.to_dict(),
        },
    )
    return path, est


def _snapshots_from_log(rows: list[dict]) -> dict[int, dict[int, dict[int, float]]]:
    """episode -> state -> moment index -> value"""
    snaps: dict = defaultdict(lambda: defaultdict(dict))
    for r in rows:
        snaps[int(r["episode"])][int(r["state_id"])][int(r["moment_index"])] = float(r["value"])
    return snaps


def compute_curves(config: dict, log_rows: list[dict], oracle: OracleEstimate) -> list[tuple]:
    snaps = _snapshots_from_log(log_rows)
    if not snaps:
        raise InputError("learning log is empty")
    logged_states = set(next(iter(snaps.values())))
    missing = logged_states - set(oracle.states)
    if missing:
        raise InputError(f"oracle does not cover states {sorted(missing)}")
    states = sorted(logged_states)
    n = min(oracle.n, max(next(iter(snaps.values()))[states[0]]))
    util = config["utility"]
    funcs = functions_of(config)
    absent = [name for name in funcs if name not in oracle.utilities]
    if absent:
        raise InputError(f"oracle has no utility values for {absent}")
    order = min(util["order"], n)
    rows = []
    for episode in sorted(snaps):
        snap = snaps[episode]
        for k in range(1, n + 1):
            res = mapve({s: snap[s][k] for s in states}, oracle.moment(k), states)
            rows.append((episode, f"moment_{k}", res.value, len(res.included), len(res.excluded)))
        for name, f in funcs.items():
            est = {
                s: expand(f, [1.0] + [snap[s][k] for k in range(1, n + 1)], util["center"], order).value
                for s in states
            }
            res = mapve(est, oracle.utility(name), states)
            rows.append((episode, f"utility_{name}", res.value, len(res.included), len(res.excluded)))
    return rows


def cmd_curves(config: dict, out: Path, log_path, oracle_path) -> list[tuple]:
    rows = read_csv(log_path)
    with open(oracle_path, encoding="utf-8") as fh:
        oracle = OracleEstimate.from_dict(json.load(fh)["oracle"])
    curves = compute_curves(config, rows, oracle)
    write_csv(out / "curves.csv", config, ["episode", "series", "mapve", "included_states", "excluded_states"], curves)
    return curves


def cmd_compare(config: dict, out: Path) -> dict:
    model = build_model(config)
    cmp_ = config["compare"]
    util = config["utility"]
    f = register_builtin(cmp_["function"])
    order = util["order"]
    table = {}
    for name in cmp_["policies"]:
        policy = build_policy(config, model, name)
        est = build_estimator(config, model)
        rng = np.random.default_rng(config["seed"])
        start = uniform_start(model) if cmp_["start"] == "uniform" else None
        run_policy_evaluation(
            model,
            policy,
            est,
            cmp_["episodes"],
            rng,
            max_steps=config["learn"]["max_steps"],
            snapshot_every=max(1, cmp_["episodes"]),
            start=start,
            step_decay=cmp_["step_decay"],
        )
        raw = est.values(model.start_state)
        ue, report = utility_with_report(f, raw, util["center"], order, state=model.start_state)
        row = {
            "expected_return": raw[1],
            "expected_utility": ue.value,
            "utility_terms": list(ue.terms),
            "truncation_flagged": report.flagged,
            "moments": raw[1:],
        }
        if cmp_["oracle_rollouts"] > 0:
            orc = run_oracle(
                model,
                policy,
                n=config["n"],
                functions={f.name: f.evaluate},
                rollouts=cmp_["oracle_rollouts"],
                max_steps=config["oracle"]["max_steps"],
                seed=config["oracle"]["seed"],
                states=[model.start_state],
            )
            oracle_raw = [1.0] + orc.moments[0].tolist()
            row["oracle"] = {
                "expected_return": float(orc.moments[0, 0]),
                "expected_return_se": float(orc.moment_se[0, 0]),
                "expected_utility": float(orc.utilities[f.name][0]),
                "expected_utility_se": float(orc.utility_se[f.name][0]),
                "taylor_of_oracle_moments": expand(f, oracle_raw, util["center"], order).value,
                "rollouts": cmp_["oracle_rollouts"],
            }
        table[name] = row
    a, b = cmp_["policies"]
    pick = lambda key: a if table[a][key] >= table[b][key] else b
    result = {
        "config": config,
        "seed": config["seed"],
        "function": f.name,
        "center": util["center"],
        "order": order,
        "start_state": model.start_state,
        "policies": table,
        "preference": {"expected_return": pick("expected_return"), "expected_utility": pick("expected_utility")},
    }
    write_json(out / "compare.json", result)
    write_csv(
        out / "compare.csv",
        config,
        ["policy", "expected_return", f"expected_{f.name}"],
        [(p, table[p]["expected_return"], table[p]["expected_utility"]) for p in cmp_["policies"]],
    )
    return result


# ---------------------------------------------------------------------------


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="K=V", help="override a config key (dotted path)")
    common.add_argument("--literal-trace", action="store_true", help="variant trace z = gamma^k lambda_k + grad v, without carrying z forward")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tdmoments", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("learn", parents=[common], help="learn moments with TD and write the learning log")
    p = sub.add_parser("oracle", parents=[common], help="Monte-Carlo ground truth, cached")
    p.add_argument("--policy", choices=["safe", "risky", "file"], help="override the configured policy")
    p = sub.add_parser("curves", parents=[common], help="MAPVE per snapshot against an oracle")
    p.add_argument("--log", required=True, help="learning_log.csv from 'learn'")
    p.add_argument("--oracle", required=True, help="oracle cache file from 'oracle'")
    sub.add_parser("compare", parents=[common], help="start-state value vs utility for two policies")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise cfg.ConfigError("--seed must be an unsigned 64-bit integer")
        config = cfg.load_config(args.config, args.set, args.seed, args.literal_trace)
        for name in config["utility"]["functions"] + [config["compare"]["function"]]:
            try:
                register_builtin(name)
            except (ValueError, TypeError) as exc:
                raise cfg.ConfigError(str(exc)) from exc
        out = cfg.ensure_dir(args.out)
        with warnings.catch_warnings():
            warnings.simplefilter("always", TruncationWarning)
            if args.command == "learn":
                snap = cmd_learn(config, out)
                print(f"wrote {out / 'learning_log.csv'}, {out / 'utilities.csv'} and {out / 'estimator.json'}")
                print("start-state moments:", " ".join(f"{v:.6g}" for v in snap["start_state_moments"]))
            elif args.command == "oracle":
                path, _ = cmd_oracle(config, out, args.policy)
                print(f"wrote {path}")
            elif args.command == "curves":
                cmd_curves(config, out, args.log, args.oracle)
                print(f"wrote {out / 'curves.csv'}")
            elif args.command == "compare":
                res = cmd_compare(config, out)
                for name, row in res["policies"].items():
                    print(f"{name:>6}: E[G0] = {row['expected_return']:.4f}   E[{res['function']}(G0)] = {row['expected_utility']:.4f}")
                pref = res["preference"]
                print(f"preferred by E[G0]: {pref['expected_return']}; by E[{res['function']}(G0)]: {pref['expected_utility']}")
    except cfg.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except OracleQualityError as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
