import json

import numpy as np
import pytest

from tdmoments.cli import main, read_csv
from tdmoments.mdp import LEFT, build_cliff_walk, only_action, save_json

FAST = ["--set", "n=3", "--set", "utility.order=3", "--set", "oracle.rollouts=2000"]


def run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path)])


def test_learn_zero_episodes(tmp_path):
    assert run(tmp_path, "learn", "--set", "learn.episodes=0") == 0
    snap = json.loads((tmp_path / "estimator.json").read_text())
    assert np.count_nonzero(snap["weights"]) == 0
    rows = read_csv(tmp_path / "learning_log.csv")
    assert {r["episode"] for r in rows} == {"0"}


def test_learn_writes_five_curves(tmp_path):
    assert run(tmp_path, "learn", "--set", "learn.episodes=50", "--set", "learn.snapshot_every=25", "--seed", "3") == 0
    rows = read_csv(tmp_path / "learning_log.csv")
    assert {r["moment_index"] for r in rows} == {"1", "2", "3", "4", "5"}
    assert {r["episode"] for r in rows} == {"0", "25", "50"}
    assert len(rows) == 3 * 5 * 37
    snap = json.loads((tmp_path / "estimator.json").read_text())
    assert snap["seed"] == 3 and snap["config"]["seed"] == 3


def test_every_output_embeds_config(tmp_path):
    run(tmp_path, "learn", "--set", "learn.episodes=5", "--seed", "11")
    first = (tmp_path / "learning_log.csv").read_text().splitlines()[0]
    assert first.startswith("# config: ")
    assert json.loads(first[len("# config: "):])["seed"] == 11


@pytest.mark.parametrize(
    "args",
    [
        ["--set", "n=0"],
        ["--set", "bogus=1"],
        ["--set", "learn.start=sideways"],
        ["--set", "utility.functions=[\"tanh\"]"],
        ["--set", "nodots"],
        ["--seed", "-1"],
    ],
)
def test_bad_config_exit_code(tmp_path, args):
    assert run(tmp_path, "learn", *args) == 2


def test_malformed_config_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(tmp_path, "learn", "--config", str(bad)) == 2


def test_config_file_and_overrides(tmp_path):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"n": 2, "learn": {"episodes": 3}, "utility": {"order": 2}}))
    assert run(tmp_path, "learn", "--config", str(conf), "--set", "learn.episodes=4") == 0
    snap = json.loads((tmp_path / "estimator.json").read_text())
    assert snap["n"] == 2 and snap["episodes"] == 4


def test_divergence_exit_code(tmp_path):
    assert run(tmp_path, "learn", "--set", "domain.step_reward=-1e5", "--set", "learn.episodes=1") == 3


def test_literal_trace_flag(tmp_path):
    assert run(tmp_path, "learn", "--literal-trace", "--set", "learn.episodes=2") == 0
    assert json.loads((tmp_path / "estimator.json").read_text())["literal_trace"] is True


def test_oracle_cache_hit_and_seed_keying(tmp_path):
    assert run(tmp_path, "oracle", *FAST, "--set", "oracle.rollouts=300") == 0
    files = sorted(tmp_path.glob("oracle-*.json"))
    assert len(files) == 1
    before = files[0].read_bytes()
    mtime = files[0].stat().st_mtime_ns
    assert run(tmp_path, "oracle", *FAST, "--set", "oracle.rollouts=300") == 0
    assert files[0].read_bytes() == before
    assert files[0].stat().st_mtime_ns == mtime
    assert run(tmp_path, "oracle", *FAST, "--set", "oracle.rollouts=300", "--seed", "1") == 0
    assert len(list(tmp_path.glob("oracle-*.json"))) == 2


def test_oracle_quality_exit_code(tmp_path):
    model = build_cliff_walk()
    pol = tmp_path / "stuck.json"
    save_json(only_action(model, LEFT), pol)
    code = run(
        tmp_path, "oracle", "--set", "policy=file", "--set", f"policy_path={pol}",
        "--set", "oracle.rollouts=50", "--set", "oracle.max_steps=20",
    )
    assert code == 4


def test_imported_mdp_and_policy(tmp_path):
    from tdmoments.mdp import chain

    model = chain([1.0, 2.0], discount=0.5)
    save_json(model, tmp_path / "mdp.json")
    save_json(only_action(model), tmp_path / "pol.json")
    code = run(
        tmp_path, "oracle", "--set", "domain.type=file", "--set", f"domain.path={tmp_path / 'mdp.json'}",
        "--set", "policy=file", "--set", f"policy_path={tmp_path / 'pol.json'}", *FAST,
    )
    assert code == 0
    (path,) = tmp_path.glob("oracle-*.json")
    orc = json.loads(path.read_text())["oracle"]
    assert orc["moments"][0] == [2.0, 4.0, 8.0]


def _learn_and_oracle(tmp_path, *extra):
    assert run(tmp_path, "learn", *FAST, *extra) == 0
    assert run(tmp_path, "oracle", *FAST, *extra) == 0
    (orc,) = tmp_path.glob("oracle-*.json")
    return tmp_path / "learning_log.csv", orc


def test_curves_zero_snapshot_is_one(tmp_path):
    log, orc = _learn_and_oracle(tmp_path, "--set", "learn.episodes=0")
    assert run(tmp_path, "curves", *FAST, "--log", str(log), "--oracle", str(orc)) == 0
    rows = read_csv(tmp_path / "curves.csv")
    moment_rows = [r for r in rows if r["series"].startswith("moment_")]
    assert len(moment_rows) == 3
    assert all(float(r["mapve"]) == 1.0 for r in moment_rows)


def test_curves_oracle_snapshot_is_zero(tmp_path):
    _, orc_path = _learn_and_oracle(tmp_path, "--set", "learn.episodes=0")
    orc = json.loads(orc_path.read_text())["oracle"]
    fake = tmp_path / "fake_log.csv"
    lines = ["episode,moment_index,state_id,value"]
    for i, s in enumerate(orc["states"]):
        for k in range(3):
            lines.append(f"0,{k + 1},{s},{orc['moments'][i][k]!r}")
    fake.write_text("\n".join(lines) + "\n")
    assert run(tmp_path, "curves", *FAST, "--log", str(fake), "--oracle", str(orc_path)) == 0
    rows = read_csv(tmp_path / "curves.csv")
    assert all(float(r["mapve"]) == 0.0 for r in rows if r["series"].startswith("moment_"))
    ident = [r for r in rows if r["series"] == "utility_identity"]
    assert float(ident[0]["mapve"]) == 0.0


def test_curves_missing_oracle_states(tmp_path):
    log, orc_path = _learn_and_oracle(tmp_path, "--set", "learn.episodes=0")
    doc = json.loads(orc_path.read_text())
    o = doc["oracle"]
    for key in ("states", "sample_count", "truncated_fraction", "moments", "moment_se"):
        o[key] = o[key][1:]
    for key in ("utilities", "utility_se"):
        o[key] = {k: v[1:] for k, v in o[key].items()}
    orc_path.write_text(json.dumps(doc))
    assert run(tmp_path, "curves", *FAST, "--log", str(log), "--oracle", str(orc_path)) == 2


def test_curves_trend_down(tmp_path):
    log, orc = _learn_and_oracle(
        tmp_path, "--set", "learn.episodes=1500", "--set", "learn.snapshot_every=500", "--seed", "5"
    )
    assert run(tmp_path, "curves", *FAST, "--log", str(log), "--oracle", str(orc)) == 0
    rows = read_csv(tmp_path / "curves.csv")
    for k in (1, 2, 3):
        series = [float(r["mapve"]) for r in rows if r["series"] == f"moment_{k}"]
        assert series[-1] < series[0]


def test_compare_deterministic_world_prefers_risky_twice(tmp_path):
    code = run(
        tmp_path, "compare", "--set", "domain.slip_probability=0", "--set", "compare.episodes=2000",
        "--set", "compare.step_decay=null",
    )
    assert code == 0
    res = json.loads((tmp_path / "compare.json").read_text())
    assert res["preference"] == {"expected_return": "risky", "expected_utility": "risky"}
    cfg = res["config"]["domain"]
    safe_len = (cfg["width"] - 1) + 2 * (cfg["height"] - 1)
    assert res["policies"]["safe"]["expected_return"] == pytest.approx(cfg["step_reward"] * safe_len, abs=1e-6)
    assert res["policies"]["risky"]["expected_return"] == pytest.approx(cfg["step_reward"] * (cfg["width"] + 1), abs=1e-6)


def test_compare_with_oracle_cross_check(tmp_path):
    code = run(
        tmp_path, "compare", "--seed", "2", "--set", "compare.episodes=20000", "--set", "compare.step_decay=3000",
        "--set", "compare.oracle_rollouts=2000",
    )
    assert code == 0
    res = json.loads((tmp_path / "compare.json").read_text())
    for name, row in res["policies"].items():
        orc = row["oracle"]
        assert abs(row["expected_return"] - orc["expected_return"]) <= 3 * orc["expected_return_se"], name
        assert abs(row["expected_utility"] - orc["expected_utility"]) <= 3 * orc["expected_utility_se"], name


def test_learn_writes_utility_table(tmp_path):
    assert run(tmp_path, "learn", "--set", "learn.episodes=20", "--set", "utility.functions=[\"identity\", \"exp_neg\"]") == 0
    rows = read_csv(tmp_path / "utilities.csv")
    assert len(rows) == 2 * 37
    snap = json.loads((tmp_path / "estimator.json").read_text())
    w = np.array(snap["weights"])
    for r in rows:
        assert r["center"] == "mean" and r["order"] == "5" and r["flagged"] in {"0", "1"}
        if r["function_name"] == "identity":
            assert float(r["value"]) == w[0, int(r["state_id"])]
