"""Config schema: validation, defaults, canonical hashing."""

import copy

import pytest
import yaml

from xsrc import config as cfgmod
from xsrc.errors import ConfigError

MINIMAL = {
    "seed": 7,
    "data": {
        "synth": {
            "grid_rows": 12,
            "grid_cols": 12,
            "n_time": 300,
            "components": [
                {"type": "global_oscillation", "amplitude": 1.0, "period": 60},
                {"type": "local_chaos", "amplitude": 0.4, "mu": 3.9},
            ],
        }
    },
    "model": {
        "refine_factors": [2],
        "layers": [
            {
                "tile_rows": 3,
                "tile_cols": 3,
                "hyper": {"d_r": 30, "g": 0.6, "p": 0.3, "g_in": 0.3},
            },
            {
                "tile_rows": 6,
                "tile_cols": 6,
                "hyper": {"d_r": 30, "g": 0.6, "p": 0.3, "g_in": 0.3},
            },
        ],
    },
    "training": {"train_frames": 260},
    "forecast": {"warmup_frames": 60, "horizon": 40},
}


def _write(tmp_path, doc):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(doc))
    return path


def test_minimal_config_normalizes(tmp_path):
    norm = cfgmod.load_config(_write(tmp_path, MINIMAL))
    assert norm["model"]["n_layers"] == 2
    assert norm["model"]["layers"][0]["overlap"] == 2
    assert norm["model"]["layers"][0]["hyper"]["washout"] == 100
    assert norm["output"]["directory"] == "out"
    assert norm["eval"]["horizons"] == [1, 5, 10, 50]
    cfgmod.hierarchy_config(norm).validate()
    spec = cfgmod.synth_spec(norm)
    assert spec.seed == 7  # falls back to the master seed


def test_unknown_keys_rejected(tmp_path):
    doc = copy.deepcopy(MINIMAL)
    doc["extra_section"] = {}
    with pytest.raises(ConfigError, match="unknown key"):
        cfgmod.load_config(_write(tmp_path, doc))
    doc = copy.deepcopy(MINIMAL)
    doc["model"]["layers"][0]["hyper"]["spectral_radius"] = 0.9
    with pytest.raises(ConfigError, match="unknown key"):
        cfgmod.load_config(_write(tmp_path, doc))


def test_missing_required_key(tmp_path):
    doc = copy.deepcopy(MINIMAL)
    del doc["seed"]
    with pytest.raises(ConfigError, match="seed"):
        cfgmod.load_config(_write(tmp_path, doc))
    doc = copy.deepcopy(MINIMAL)
    del doc["model"]["layers"][0]["hyper"]["g"]
    with pytest.raises(ConfigError, match="'g'"):
        cfgmod.load_config(_write(tmp_path, doc))


def test_data_exactly_one_source(tmp_path):
    doc = copy.deepcopy(MINIMAL)
    doc["data"]["path"] = "x.fgrid"
    with pytest.raises(ConfigError, match="exactly one"):
        cfgmod.load_config(_write(tmp_path, doc))


def test_n_layers_consistency(tmp_path):
    doc = copy.deepcopy(MINIMAL)
    doc["model"]["n_layers"] = 3
    with pytest.raises(ConfigError, match="n_layers"):
        cfgmod.load_config(_write(tmp_path, doc))
    doc["model"]["n_layers"] = 2
    norm = cfgmod.load_config(_write(tmp_path, doc))
    assert norm["model"]["n_layers"] == 2


def test_hash_covers_defaults(tmp_path):
    norm_a = cfgmod.load_config(_write(tmp_path, MINIMAL))
    doc = copy.deepcopy(MINIMAL)
    doc["output"] = {"directory": "out"}  # explicit default
    norm_b = cfgmod.load_config(_write(tmp_path, doc))
    assert cfgmod.config_hash(norm_a) == cfgmod.config_hash(norm_b)
    doc["output"] = {"directory": "elsewhere"}
    norm_c = cfgmod.load_config(_write(tmp_path, doc))
    assert cfgmod.config_hash(norm_a) != cfgmod.config_hash(norm_c)


def test_bad_component_type(tmp_path):
    doc = copy.deepcopy(MINIMAL)
    doc["data"]["synth"]["components"][0]["type"] = "tidal_wave"
    with pytest.raises(ConfigError, match="type"):
        cfgmod.load_config(_write(tmp_path, doc))


def test_sweep_section(tmp_path):
    doc = copy.deepcopy(MINIMAL)
    doc["sweep"] = {
        "layers": [
            {"g": [0.5], "noise": [0.0], "g_in": [0.3], "g_l": [0.3], "tau": [2.0]},
            {"g": [0.5], "noise": [0.0], "g_in": [0.3], "g_l": [0.3], "tau": [2.0]},
        ],
        "seeds_per_config": 3,
    }
    norm = cfgmod.load_config(_write(tmp_path, doc))
    sweep = cfgmod.sweep_spec(norm)
    assert sweep.seeds_per_config == 3
    assert sweep.horizons == (1, 5, 10, 50)
    doc["sweep"]["layers"] = doc["sweep"]["layers"][:1]
    with pytest.raises(ConfigError, match="one grid per model layer"):
        cfgmod.load_config(_write(tmp_path, doc))


def test_invalid_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("seed: [unclosed")
    with pytest.raises(ConfigError, match="invalid YAML"):
        cfgmod.load_config(path)
