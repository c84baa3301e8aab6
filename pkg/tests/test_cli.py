import csv
import io
import json

import pytest

from warnprop.cli import (EXIT_CONFIG, EXIT_INCONCLUSIVE, EXIT_OK, ConfigError, digest, execute, load_config,
                          main)

KCORE = {"instance": {"name": "kcore", "params": {"k_core": 3, "degree_family": 3.5}}}


def rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg, indent=2))
    return p


def test_bad_json_reports_line(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "instance": {"name": "kcore"},\n  "n": [100,]\n}')
    assert main(["converge", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "line 3" in capsys.readouterr().err


def test_schema_error_reports_line(tmp_path, capsys):
    cfg = {**KCORE, "n": [100], "replicates": 0}
    p = write_cfg(tmp_path, cfg)
    assert main(["converge", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "replicates" in err and "(line " in err


def test_unknown_key_reports_line():
    text = '{\n  "instance": {"name": "kcore"},\n  "bogus": 1\n}'
    with pytest.raises(ConfigError, match=r"line 3"):
        load_config(text)


def test_unknown_instance(tmp_path):
    p = write_cfg(tmp_path, {"instance": {"name": "nope"}})
    assert main(["converge", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    p = write_cfg(tmp_path, {"instance": {"name": "kcore", "params": {"k_core": 1}}})
    assert main(["converge", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert main(["converge", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_digest_is_canonical():
    a = {"b": 1, "a": [1.5, 2]}
    b = {"a": [1.5, 2], "b": 1}
    assert digest(a) == digest(b) and len(digest(a)) == 16
    assert digest(a) != digest({"a": [1.5, 2], "b": 2})


def test_converge_stamps_and_t0(tmp_path):
    cfg = {**KCORE, "n": [2000], "replicates": 2, "deltas": [0.01, 0.1]}
    out = tmp_path / "o"
    assert execute("converge", json.dumps(cfg), out, seed=7) == EXIT_OK
    trace, summ = rows(out / "converge.csv"), rows(out / "converge_summary.csv")
    dig = {r["config_digest"] for r in trace + summ}
    assert len(dig) == 1 and {r["seed"] for r in trace + summ} == {"7"}
    assert len(summ) == 4
    for r in summ:
        assert r["converged"] == "1" and int(r["t0"]) <= int(r["final_round"])
    t_strict = {(r["replicate"], r["delta"]): int(r["t0"]) for r in summ}
    assert all(t_strict[(rep, "0.1")] <= t_strict[(rep, "0.01")] for rep in ("0", "1"))


def test_converge_constant_rule(tmp_path):
    cfg = {"instance": {"name": "constant", "params": {"value": "0"}}, "n": [500, 1000],
           "deltas": [0.5, 0.01, 1e-6]}
    out = tmp_path / "o"
    assert execute("converge", json.dumps(cfg), out) == EXIT_OK
    assert {r["t0"] for r in rows(out / "converge_summary.csv")} == {"1"}


def test_converge_empty_graph(tmp_path):
    cfg = {"instance": {"name": "kcore", "params": {"degree_family": 0.0}}, "n": [50]}
    out = tmp_path / "o"
    assert execute("converge", json.dumps(cfg), out) == EXIT_OK
    trace = rows(out / "converge.csv")
    assert all(r["changes"] in ("", "0") and r["changes_since"] == "0" for r in trace)


def test_threshold(tmp_path):
    cfg = {**KCORE, "n": [20_000], "grid": [2.0, 5.0], "bisect": {"lo": 3.0, "hi": 4.0, "tol": 1e-4}}
    out = tmp_path / "o"
    assert execute("threshold", json.dumps(cfg), out) == EXIT_OK
    pts = rows(out / "threshold.csv")
    low, high = pts
    assert float(low["core_predicted"]) < 1e-6 and float(low["core_empirical"]) < 0.01
    assert abs(float(high["core_predicted"]) - float(high["core_empirical"])) < 0.02
    summ = {r["method"]: float(r["threshold"]) for r in rows(out / "threshold_summary.csv")}
    assert abs(summ["bisection"] - summ["scalar_oracle"]) < 1e-3
    bad = {"instance": {"name": "constant"}, "grid": [1.0]}
    with pytest.raises(ConfigError):
        execute("threshold", json.dumps(bad), out)


def test_contiguity(tmp_path):
    cfg = {**KCORE, "n": [2000], "replicates": 2, "history_samples": 50_000}
    out = tmp_path / "o"
    assert execute("contiguity", json.dumps(cfg), out, seed=1) == EXIT_OK
    gh = rows(out / "contiguity_ghat.csv")
    assert len(gh) == 2 and all(r["matching_ok"] == "1" for r in gh)
    comp = rows(out / "contiguity_compilations.csv")
    assert comp and all(0 <= float(r["relative_gap"]) <= 1 for r in comp)
    q = rows(out / "q_table.csv")
    table = {(r["mu1"], r["mu2"]): r["q"] for r in q}
    assert all(table[(b, a)] == v for (a, b), v in table.items())
    assert rows(out / "census.csv")


def test_subcritical(tmp_path):
    cfg = {**KCORE, "samples": 50_000, "grid": [3.5, 4.5]}
    out = tmp_path / "o"
    assert execute("subcritical", json.dumps(cfg), out) == EXIT_OK
    v = rows(out / "subcritical.csv")
    assert [r["verdict"] for r in v] == ["subcritical", "subcritical"]
    assert float(v[0]["rho"]) > float(v[1]["rho"])
    assert rows(out / "transition_matrix.csv")


def test_subcritical_inconclusive_exit(tmp_path):
    # just above the threshold rho is 1 to within noise
    cfg = {**KCORE, "samples": 2000, "grid": [3.351]}
    assert execute("subcritical", json.dumps(cfg), tmp_path / "o") == EXIT_INCONCLUSIVE


def test_assumptions(tmp_path):
    cfg = {**KCORE, "n": [3000], "radius": 1, "tree_samples": 10_000}
    out = tmp_path / "o"
    assert execute("assumptions", json.dumps(cfg), out) == EXIT_OK
    assert {r["metric"] for r in rows(out / "assumptions.csv")}


SMALL = {
    "converge": {**KCORE, "n": [1500], "replicates": 2},
    "threshold": {**KCORE, "n": [1500], "grid": [3.0, 4.0]},
    "contiguity": {**KCORE, "n": [1500], "replicates": 2, "history_samples": 20_000},
    "subcritical": {**KCORE, "samples": 20_000, "grid": [4.0, 5.0]},
    "assumptions": {**KCORE, "n": [1500], "radius": 1},
}


@pytest.mark.parametrize("verb", sorted(SMALL))
def test_determinism_and_threads(tmp_path, verb):
    text = json.dumps(SMALL[verb])
    outs = []
    for k, threads in enumerate((1, 1, 3)):
        out = tmp_path / f"o{k}"
        execute(verb, text, out, seed=42, threads=threads)
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert outs[0] == outs[1] == outs[2]
    other = tmp_path / "other"
    execute(verb, text, other, seed=43)
    changed = {p.name: p.read_bytes() for p in sorted(other.iterdir())}
    assert changed != outs[0]


def test_bad_seed_and_threads(tmp_path):
    with pytest.raises(ConfigError):
        execute("converge", json.dumps(KCORE), tmp_path, seed=-1)
    with pytest.raises(ConfigError):
        execute("converge", json.dumps(KCORE), tmp_path, threads=0)
