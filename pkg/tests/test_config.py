import pytest
import yaml

from maskfill.config import build_sections, load_config, parse_overrides, read_config_file, write_config
from maskfill.errors import ConfigError
from maskfill.losses import LossConfig
from maskfill.schedule import ScheduleConfig
from maskfill.trainer import TrainConfig

SECTIONS = {"train": TrainConfig, "schedule": ScheduleConfig}


def write(tmp_path, text):
    path = tmp_path / "cfg.yaml"
    path.write_text(text)
    return path


def test_file_values(tmp_path):
    path = write(
        tmp_path,
        "train:\n"
        "  batch_size: 8\n"
        "  task_probabilities: [0.5, 0.5]\n"
        "  loss:\n"
        "    lam: 0.5\n"
        "schedule:\n"
        "  kind: cosine\n",
    )
    configs = load_config(SECTIONS, path)
    assert configs["train"].batch_size == 8
    assert configs["train"].task_probabilities == (0.5, 0.5)
    assert configs["train"].loss == LossConfig(lam=0.5)
    assert configs["train"].learning_rate == TrainConfig().learning_rate
    assert configs["schedule"].kind == "cosine"

    values, lines = read_config_file(path)
    assert lines["train.loss.lam"] == 5
    assert values["schedule"] == {"kind": "cosine"}


def test_defaults_without_file():
    configs = load_config(SECTIONS)
    assert configs["train"] == TrainConfig()
    assert configs["schedule"] == ScheduleConfig()


def test_errors_name_the_line(tmp_path):
    path = write(tmp_path, "schedule:\n  kind: linear\ntrain:\n  batch: 3\n")
    with pytest.raises(ConfigError, match=r"cfg.yaml:4: unknown key 'train.batch'"):
        load_config(SECTIONS, path)

    path = write(tmp_path, "train:\n  seed: 1\n  batch_size: many\n")
    with pytest.raises(ConfigError, match=r"cfg.yaml:3: 'train.batch_size' must be an integer"):
        load_config(SECTIONS, path)

    path = write(tmp_path, "train:\n  progress: 1\n")
    with pytest.raises(ConfigError, match="true or false"):
        load_config(SECTIONS, path)

    path = write(tmp_path, "train:\n  seed: 1\n  batch_size: 0\n")
    with pytest.raises(ConfigError, match=r"cfg.yaml:3: train.batch_size: must be >= 1"):
        load_config(SECTIONS, path)

    path = write(tmp_path, "sampling:\n  steps: 3\n")
    with pytest.raises(ConfigError, match="unknown section 'sampling'"):
        load_config(SECTIONS, path)

    path = write(tmp_path, "train:\n  batch_size: [1, 2\n")
    with pytest.raises(ConfigError, match=r"cfg.yaml:\d+: invalid YAML"):
        load_config(SECTIONS, path)

    with pytest.raises(FileNotFoundError):
        load_config(SECTIONS, tmp_path / "missing.yaml")


def test_precedence(tmp_path):
    path = write(tmp_path, "train:\n  batch_size: 8\n  seed: 5\n  learning_rate: 0.1\n")
    configs = load_config(
        SECTIONS,
        path,
        overrides=["train.batch_size=16", "train.learning_rate=0.01", "train.loss.lam=0"],
        flags={"train": {"batch_size": 32, "seed": None}},
    )
    train = configs["train"]
    assert train.batch_size == 32
    assert train.learning_rate == 0.01
    assert train.seed == 5
    assert train.loss.lam == 0.0


def test_parse_overrides():
    assert parse_overrides(["a.b=1", "a.c.d=x", "a.e=[1, 2]"]) == {"a": {"b": 1, "c": {"d": "x"}, "e": [1, 2]}}
    with pytest.raises(ConfigError, match="section.key=value"):
        parse_overrides(["train.batch_size"])
    with pytest.raises(ConfigError, match="section.key"):
        parse_overrides(["batch_size=3"])


def test_write_config_round_trip(tmp_path):
    configs = load_config(SECTIONS, overrides=["train.batch_size=12"])
    digest = write_config(configs, tmp_path / "run")
    assert (tmp_path / "run" / "config.sha256").read_text().strip() == digest
    with open(tmp_path / "run" / "config.yaml") as f:
        values = yaml.safe_load(f)
    assert build_sections(SECTIONS, values) == configs
    assert write_config(configs, tmp_path / "again") == digest
    other = load_config(SECTIONS, overrides=["train.batch_size=13"])
    assert write_config(other, tmp_path / "other") != digest
