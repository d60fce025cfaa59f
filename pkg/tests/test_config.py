import json

import pytest

from bindsep.config import ConfigError, ExperimentConfig, load_config, parse_config
from bindsep.losses import LossFlags


def test_defaults_roundtrip():
    cfg = ExperimentConfig()
    again = parse_config(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert cfg.train.learning_rate > 0 and cfg.train.gamma == 0.10 and cfg.train.tau == 1.25
    assert cfg.backbone_warm_fit_steps == 0 and cfg.fog_include_last is False


def test_empty_document_is_defaults():
    assert parse_config({}) == ExperimentConfig()


def test_nested_values():
    cfg = parse_config({
        "model": {"prompt_layers": 1},
        "train": {"flags": "Q", "prompts_in_aux": False, "gamma": 0, "loss_weights": [1, 0.5, 1]},
        "data": {"tasks": [{"family": "CAUSE", "triggers": [0, 1, 2], "alphabet": [0, 1, 2, 5, 6]}], "order": [0]},
        "ablation": {"flags": ["none", "QVP"], "orders": [[0]]},
        "repeats": 3,
    })
    assert cfg.model.prompt_layers == 1
    assert cfg.train.flags == LossFlags(True, False, False, False)
    assert cfg.train.gamma == 0.0 and isinstance(cfg.train.gamma, float)
    assert cfg.train.loss_weights == (1.0, 0.5, 1.0)
    assert cfg.data.tasks[0].triggers == (0, 1, 2)
    assert cfg.ablation.axes() == {"flags": ["none", "QVP"], "orders": [[0]]}


@pytest.mark.parametrize("doc, path", [
    ({"modle": {}}, "config.modle: unknown key"),
    ({"train": {"lr": 0.1}}, "config.train.lr: unknown key"),
    ({"train": {"learning_rate": "fast"}}, "config.train.learning_rate: expected a number"),
    ({"train": {"epochs_per_task": 2.5}}, "config.train.epochs_per_task: expected a int"),
    ({"train": {"flags": "QZ"}}, "config.train.flags"),
    ({"train": {"warmup_epochs": 9}}, "config.train.warmup_epochs"),
    ({"train": {"loss_weights": [1, 1]}}, "config.train.loss_weights"),
    ({"model": {"prompt_layers": 9}}, "config.model.prompt_layers"),
    ({"model": {"num_layers": True}}, "config.model.num_layers: expected a int"),
    ({"data": {"tasks": [{"family": "COUNT"}, {"family": "WHEN"}]}}, "config.data.tasks[1].family"),
    ({"data": {"tasks": [{"family": "COUNT", "colour": 1}]}}, "config.data.tasks[0].colour: unknown key"),
    ({"data": {"tasks": [{"family": "FIRST", "alphabet": [1, 12]}]}}, "config.data.tasks[0].alphabet"),
    ({"data": {"order": [0, 0, 1, 2]}}, "config.data.order"),
    ({"data": {"tasks": []}}, "config.data.tasks"),
    ({"ablation": {"flags": ["Q", 3]}}, "config.ablation.flags[1]"),
    ({"ablation": {"gamma": ["a"]}}, "config.ablation.gamma[0]"),
    ({"repeats": 0}, "config.repeats"),
    ([], "config: expected a dict"),
])
def test_errors_name_field_path(doc, path):
    with pytest.raises(ConfigError) as exc:
        parse_config(doc)
    assert str(exc.value).startswith(path)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{\n  \"repeats\": 1,\n}")
    with pytest.raises(ConfigError, match="line 3"):
        load_config(tmp_path / "bad.json")
