import json

import pytest

from rwre_lab.config import CSV_COLUMNS, ConfigError, ExperimentConfig, ExperimentRun
from rwre_lab.stats import Estimate

from small_configs import small_config


def test_shipped_configs_load():
    for name in ("ballistic", "couple", "einstein_homogeneous", "girsanov", "harnack", "kalikow", "regen"):
        cfg = ExperimentConfig.from_dict(small_config(name))
        assert cfg.experiment in name


@pytest.mark.parametrize("patch", [
    {"experiment": "nope"},
    {"replicas": 0},
    {"replicas": 2.5},
    {"seed": -1},
    {"lambdas": "0.1"},
    {"lambdas": [0.2]},          # kappa / 2 = 0.11 for this distribution
    {"betas": [1.0]},
    {"lateral_period": 2},
    {"surprise": 1},
    {"dist": {"kind": "homogeneous", "omega": [0.5, 0.5, 0.1, 0.1]}},
])
def test_invalid_configs_are_rejected(patch):
    raw = small_config("kalikow")
    raw.update(patch)
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(raw)


def test_experiment_mismatch(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(small_config("kalikow")))
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p, "regen")
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(p)
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "missing.json")


def test_digest_is_stable_and_sensitive():
    a = ExperimentConfig.from_dict(small_config("kalikow"))
    b = ExperimentConfig.from_dict(small_config("kalikow"))
    assert a.digest() == b.digest()
    b.seed += 1
    assert a.digest() != b.digest()


def test_csv_schema_and_report(tmp_path):
    cfg = ExperimentConfig.from_dict(small_config("kalikow"))
    run = ExperimentRun(cfg)
    run.add("speed", Estimate(0.5, 0.01, 40), lam=0.1)
    run.add_exact("tv", 0.0)
    run.checks["ok"] = True
    run.tables["extra.csv"] = (["a", "b"], [[1, 0.5], [True, 2]])
    run.write(tmp_path)
    lines = (tmp_path / "results.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert lines[1] == "kalikow,speed,0.1,0.5,0.01,40,0.0,0.47,0.53"
    assert lines[2].startswith("kalikow,tv,,0.0,0.0,1,")
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["config_hash"] == cfg.digest() and rep["checks"] == {"ok": True}
    assert (tmp_path / "extra.csv").read_text() == "a,b\n1,0.5\n1,2\n"
    assert run.passed
