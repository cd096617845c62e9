"""Scaled-down copies of the shipped experiment configs for fast end-to-end runs."""
import json
from pathlib import Path

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

OVERRIDES = {
    "ballistic": {"replicas": 30, "horizon": 3000, "params": {"renewal_table_replicas": 1}},
    "couple": {"replicas": 30, "horizon": 1000, "lambdas": [0.1],
               "params": {"n_grid": [1], "coupling_replicas": 2, "coupling_steps": 2000,
                          "exit_replicas": 30, "z_replicas": 500}},
    "einstein_homogeneous": {"replicas": 30, "horizon": 2000, "lambdas": [0.1, 0.05]},
    "girsanov": {"replicas": 60, "params": {"n_max": 3, "instances": 3, "t": 1.0}},
    "harnack": {"params": {"R": 8, "sigma": 0.5, "lam_times_R": 0.3, "count": 3, "kappa": 0.1, "n_atoms": 4}},
    "kalikow": {},
    "regen": {"lambdas": [0.1], "replicas": 4, "n_levels": 120},
}


def small_config(name: str) -> dict:
    raw = json.loads((CONFIGS / f"{name}.json").read_text())
    raw.update(OVERRIDES[name])
    return raw


def write_small(name: str, directory: Path) -> Path:
    path = Path(directory) / f"{name}.json"
    path.write_text(json.dumps(small_config(name)))
    return path
