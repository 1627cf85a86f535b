import json
import os

import pytest

from scbf import config as cf
from scbf.cli import main


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def base(kind, **exp):
    return {"schema_version": 1, "seed": 7, "model": {"N": 2}, "sim": {"T": 0.05, "dt": 0.01},
            "experiment": {"kind": kind, **exp}}


@pytest.mark.parametrize("raw", [
    {"seed": 1, "experiment": {"kind": "check"}},
    {"schema_version": 2, "seed": 1, "experiment": {"kind": "check"}},
    {"schema_version": 1, "experiment": {"kind": "check"}},
    {"schema_version": 1, "seed": 1, "experiment": {"kind": "dance"}},
    {"schema_version": 1, "seed": 1, "model": {"r": 4}, "experiment": {"kind": "check"}},
    {"schema_version": 1, "seed": 1, "model": {"mu": 0}, "experiment": {"kind": "check"}},
    {"schema_version": 1, "seed": 1, "bogus": 1, "experiment": {"kind": "check"}},
    {"schema_version": 1, "seed": 1, "experiment": {"kind": "check", "bogus": 1}},
    {"schema_version": 1, "seed": 1, "sim": {"seed": 2}, "experiment": {"kind": "check"}},
    {"schema_version": 1, "seed": 1, "noise": {"eigenvalues": [1.0]}, "experiment": {"kind": "check"}},
])
def test_schema_rejects(raw, tmp_path):
    with pytest.raises(cf.ConfigError):
        cf.resolve(raw)
    assert main(["check", "--config", write(tmp_path, raw), "--out", str(tmp_path / "o")]) == 2


def test_malformed_json_exits_2(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["check", "--config", str(p)]) == 2
    with pytest.raises(cf.ConfigError):
        cf.load(str(p))
    assert main(["check", "--config", str(tmp_path / "missing.json")]) == 2


def test_kind_mismatch_exits_2(tmp_path):
    assert main(["simulate", "--config", write(tmp_path, base("check"))]) == 2


def test_round_trip_and_hash():
    full = cf.resolve(base("invariant"))
    again = cf.resolve(json.loads(cf.dumps(full)))
    assert again == full
    assert cf.config_hash(again) == cf.config_hash(full)
    other = cf.resolve(dict(base("invariant"), seed=8))
    assert cf.config_hash(other) != cf.config_hash(full)
    assert full["sim"]["seed"] == 7


def test_check_conditions_and_exit_codes(tmp_path, capsys):
    out = str(tmp_path / "ok")
    assert main(["check", "--config", write(tmp_path, base("check")), "--out", out]) == 0
    text = capsys.readouterr().out
    assert "cond419" in text and "Tr(AQ)" in text and "finite tail" in text
    rows = dict(line.split(",") for line in open(os.path.join(out, "conditions.csv")).read().split()[1:])
    assert rows["cond419"] == "True" and rows["TrAQ_tail_finite"] == "True"
    weak = base("check")
    weak["model"]["mu"] = 0.01
    path = write(tmp_path, weak, "weak.json")
    assert main(["check", "--config", path, "--out", str(tmp_path / "w0")]) == 0
    assert main(["check", "--config", path, "--require-419", "--out", str(tmp_path / "w1")]) == 1


def test_divergent_trace_flag(tmp_path):
    cfg = base("check")
    cfg["noise"] = {"decay": 1.5}
    out = str(tmp_path / "d")
    main(["check", "--config", write(tmp_path, cfg), "--out", out])
    assert "TrAQ_tail_finite,False" in open(os.path.join(out, "conditions.csv")).read()


def test_simulate_T0_single_state(tmp_path):
    cfg = base("simulate")
    cfg["sim"]["T"] = 0.0
    out = str(tmp_path / "s")
    assert main(["simulate", "--config", write(tmp_path, cfg), "--out", out]) == 0
    rows = open(os.path.join(out, "trajectory.csv")).read().splitlines()
    assert len(rows) == 2
    man = json.load(open(os.path.join(out, "manifest.json")))
    assert "trajectory.csv" in man["artifacts"] and man["checks"] == {"finite": True}
    resolved = json.load(open(os.path.join(out, "resolved_config.json")))
    assert resolved == cf.resolve(cfg)
    assert man["config_hash"] == cf.config_hash(resolved)


def test_repeat_is_identical_except_wall_time(tmp_path):
    path = write(tmp_path, base("simulate"))
    outs = [str(tmp_path / f"r{i}") for i in range(2)]
    for o in outs:
        assert main(["simulate", "--config", path, "--out", o]) == 0
    m = [json.load(open(os.path.join(o, "manifest.json"))) for o in outs]
    for x in m:
        x.pop("wall_time")
    assert m[0] == m[1]
    for name in m[0]["artifacts"]:
        a, b = (open(os.path.join(o, name), "rb").read() for o in outs)
        assert a == b, name


def test_seed_override_changes_outputs(tmp_path):
    path = write(tmp_path, base("simulate"))
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    main(["simulate", "--config", path, "--out", a])
    main(["simulate", "--config", path, "--seed", "99", "--out", b])
    assert json.load(open(os.path.join(b, "resolved_config.json")))["seed"] == 99
    assert open(os.path.join(a, "trajectory.csv")).read() != open(os.path.join(b, "trajectory.csv")).read()


def test_output_dir_environment_override(tmp_path, monkeypatch):
    target = tmp_path / "env_out"
    monkeypatch.setenv(cf.OUTPUT_ENV, str(target))
    assert main(["check", "--config", write(tmp_path, base("check"))]) == 0
    assert (target / "manifest.json").exists()
    assert cf.output_dir(cf.resolve(base("check")), "x") == "x"


def test_runtime_error_keeps_partial_artifacts(tmp_path):
    cfg = base("simulate", x0=[[1, 0, 1e6, 0.0]])
    cfg["sim"] = {"T": 1.0, "dt": 0.5}
    out = tmp_path / "blow"
    assert main(["simulate", "--config", write(tmp_path, cfg), "--out", str(out)]) == 2
    man = json.load(open(out / "manifest.json"))
    assert man["error"] and (out / "resolved_config.json").exists()


def test_invariant_two_measures_and_gap(tmp_path):
    cfg = base("invariant", horizon=4.0, n_streams=4, gap_times=[0.5, 1.0], gap_paths=40)
    out = tmp_path / "inv"
    code = main(["invariant", "--config", write(tmp_path, cfg), "--out", str(out)])
    assert code in (0, 1)
    man = json.load(open(out / "manifest.json"))
    assert {"measure_0.json", "measure_1.json", "invariant_checks.csv"} <= set(os.listdir(out))
    assert any(k.startswith("gap") for k in man["checks"])
