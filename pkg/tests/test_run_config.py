import json

import pytest

from acre.errors import ConfigError
from acre.run_config import FIELD_DEFAULTS, KNOWN_KEYS, RunConfig, load_config_file, resolve_run_config
from acre.training import TrainConfig


class TestResolveRunConfig:

    def test_defaults(self):
        run = resolve_run_config()
        assert run.train == TrainConfig()
        assert run.dataset is None

    def test_flags_beat_file_values(self):
        run = resolve_run_config(
            {"learning_rate": 0.01, "num_filters": 16, "dataset": "data/a"},
            {"learning_rate": "0.005", "dataset": None},
        )
        assert run.train.learning_rate == 0.005
        assert run.model.num_filters == 16
        assert run.dataset == "data/a"

    def test_flag_strings_are_coerced(self):
        run = resolve_run_config(overrides={
            "atrous_rates": "2,3", "batch_norm": "false", "epochs": "7", "structure": "parallel",
        })
        assert run.model.atrous_rates == (2, 3)
        assert run.model.num_atrous == 2
        assert run.model.batch_norm is False
        assert run.train.epochs == 7
        assert run.model.structure == "parallel"

    def test_explicit_num_atrous_is_checked_against_rates(self):
        with pytest.raises(ConfigError, match="num_atrous"):
            resolve_run_config({"atrous_rates": [1, 2], "num_atrous": 3})

    def test_rates_flag_overrides_a_preset_count(self):
        from config import PRESETS

        run = resolve_run_config(load_config_file(PRESETS["kinship_serial"]), {"atrous_rates": "1,2"})
        assert run.model.atrous_rates == (1, 2)
        assert run.model.num_atrous == 2

    def test_rates_in_file_override_the_default_count(self):
        run = resolve_run_config({"atrous_rates": [3]})
        assert run.model.num_atrous == 1

    def test_flags_for_both_are_checked(self):
        with pytest.raises(ConfigError, match="num_atrous"):
            resolve_run_config({"atrous_rates": [1, 2, 4]}, {"atrous_rates": "1,2", "num_atrous": "3"})

    def test_every_problem_is_reported(self):
        with pytest.raises(ConfigError) as info:
            resolve_run_config({"learning_rate": -1.0, "kernel_size": 0, "colour": "red", "epochs": "many"})
        problems = info.value.problems
        assert len(problems) == 4
        assert any("colour" in p for p in problems)
        assert any("learning_rate" in p for p in problems)
        assert any("kernel_size" in p for p in problems)
        assert any("epochs" in p for p in problems)
        assert "; " in str(info.value)

    def test_reshape_constraint(self):
        with pytest.raises(ConfigError, match="reshape"):
            resolve_run_config({"embedding_dim": 100})

    def test_run_keys_must_be_paths(self):
        with pytest.raises(ConfigError, match="dataset"):
            resolve_run_config({"dataset": 3})


class TestRunConfigFiles:

    def test_saved_config_reproduces_the_run(self, tmp_path):
        run = resolve_run_config({"structure": "parallel", "integration": "con", "seed": 3, "cache": "c.json"})
        path = tmp_path / "config.json"
        run.save(str(path))
        saved = json.loads(path.read_text(encoding="utf-8"))
        assert list(saved) == list(KNOWN_KEYS)
        assert saved["integration"] == "concat"
        assert resolve_run_config(load_config_file(str(path))) == run

    def test_flat_layout(self):
        flat = RunConfig(train=TrainConfig()).to_dict()
        assert set(flat) == set(FIELD_DEFAULTS) | {"dataset", "cache", "output_dir"}
        assert flat["atrous_rates"] == [1, 2, 4]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config_file(str(tmp_path / "nope.json"))

    def test_not_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("learning_rate = 0.1\n", encoding="utf-8")
        with pytest.raises(ConfigError, match="JSON"):
            load_config_file(str(path))

    def test_not_an_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_config_file(str(path))

    def test_presets_are_valid(self):
        from config import PRESETS

        assert {"kinship_serial", "kinship_parallel", "fb15k237_serial", "fb15k237_parallel"} <= set(PRESETS)
        for path in PRESETS.values():
            resolve_run_config(load_config_file(path))
