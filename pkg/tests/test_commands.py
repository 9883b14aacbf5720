import json
import sys

import numpy as np
import pytest
from pytest import fixture

from maskfill.commands import (
    EVAL_SECTIONS,
    GEN_DATA_SECTIONS,
    MASK_LADDER_SECTIONS,
    SAMPLE_RECORDS,
    SAMPLE_SECTIONS,
    TRAIN_SECTIONS,
    SampleJob,
    cmd_eval,
    cmd_gen_data,
    cmd_mask_ladder,
    cmd_sample,
    cmd_train,
    condition_for_prompt,
    other_class_token,
    read_sample_dir,
    resolve_checkpoint,
)
from maskfill.config import load_config, to_plain
from maskfill.errors import ConfigError
from maskfill.evalkit import output_support, read_report
from maskfill.maskops import LadderConfig, bbox_mask, iou, mask_ladder
from maskfill.scripts import maskfill_mask_ladder, maskfill_sample
from maskfill.shapesdata import COLOR_TABLE, Vocabulary, read_dataset
from maskfill.trainer import load_checkpoint
from maskfill.utilities import load_mask, save_image, save_mask

from . import TINY_RESOLUTION, tiny_model_config, tiny_schedule_config


# fixture for a dataset and a one-step training run shared by the pipeline tests
@fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    data = cmd_gen_data(
        load_config(
            GEN_DATA_SECTIONS,
            overrides=["dataset.size_range=[6, 10]"],
            flags={
                "dataset": {"resolution": TINY_RESOLUTION, "num_samples": 12},
                "job": {"out": str(root / "data"), "heldout_samples": 4},
            },
        )
    )
    run_dir = cmd_train(
        load_config(
            TRAIN_SECTIONS,
            flags={
                "train": {
                    "batch_size": 4,
                    "total_steps": 1,
                    "train_data": str(data / "train"),
                    "progress": False,
                    "device": "cpu",
                },
                "model": to_plain(tiny_model_config()),
                "schedule": to_plain(tiny_schedule_config()),
                "job": {"out": str(root / "run")},
            },
        )
    )
    return root, data, run_dir


def test_gen_data_writes_both_splits(trained_run):
    root, data, _ = trained_run
    assert len(read_dataset(data / "train")) == 12
    assert len(read_dataset(data / "heldout")) == 4
    assert (data / "config.yaml").exists()
    assert len((data / "config.sha256").read_text().strip()) == 64


def test_train_writes_run_directory(trained_run):
    _, _, run_dir = trained_run
    rows = (run_dir / "metrics.tsv").read_text().splitlines()
    assert len(rows) == 2
    assert rows[1].startswith("1\tinpaint:")
    assert (run_dir / "checkpoints" / "step_0000001.pt").exists()
    assert resolve_checkpoint(str(run_dir)) == run_dir / "checkpoints" / "step_0000001.pt"
    with open(run_dir / "manifest.json") as f:
        manifest = json.load(f)
    assert manifest["config_hash"] and len(manifest["checkpoints"]) == 1
    # the default ladder is given for 32 px and rescaled to the 16 px data
    ladder = load_checkpoint(resolve_checkpoint(str(run_dir))).configs["ladder"]
    assert list(ladder["kernel_sizes"]) == [5, 9, 17]
    assert ladder["resolution"] == TINY_RESOLUTION


def test_sample_and_eval_batch(trained_run):
    root, data, run_dir = trained_run
    samples = cmd_sample(
        load_config(
            SAMPLE_SECTIONS,
            flags={
                "sample": {"steps": 4, "mask_switch_step": 2},
                "job": {
                    "checkpoint": str(run_dir),
                    "data": str(data / "heldout"),
                    "num_samples": 2,
                    "levels": [0, 4],
                    "compare_switch": True,
                    "device": "cpu",
                    "out": str(root / "samples"),
                },
            },
        )
    )
    with open(samples / SAMPLE_RECORDS) as f:
        records = [json.loads(line) for line in f]
    assert len(records) == 2 * 2 * 2
    assert {r["variant"] for r in records} == {"switch", "noswitch"}
    assert {r["s"] for r in records} == {0, 4}
    assert [r["seed"] for r in records[:4]] == [0, 0, 0, 0]
    for record in records:
        for name in ("x0", "input_mask", "object_mask", "output", "final_mask"):
            assert (samples / record["sample_id"] / f"{name}.png").exists()

    items = read_sample_dir(samples)
    for item in items:
        outside = ~item.active_mask
        assert np.array_equal(item.output[:, outside], item.x0[:, outside])
        assert not np.any(item.active_mask & ~item.input_mask)

    report = cmd_eval(
        load_config(
            EVAL_SECTIONS,
            flags={"eval": {"eval_resolution": 16}, "job": {"samples": str(samples), "out": str(root / "eval")}},
        )
    )
    assert report.aggregate["num_samples"] == 8
    assert "switch/iou_mean" in report.aggregate and "noswitch/iou_mean" in report.aggregate
    assert "switch/s0/input_iou_mean" in report.aggregate and "switch/s4/input_iou_mean" in report.aggregate
    # input_iou is measured on the generated pixels, not on the mask the sampler kept
    by_id = {item.sample_id: item for item in items}
    for record in report.records:
        item = by_id[record["sample_id"]]
        assert item.object_color in COLOR_TABLE
        support = output_support(item.output, item.input_mask, item.object_color)
        assert record["input_iou"] == pytest.approx(iou(support, item.input_mask))
        assert 0.0 <= record["input_iou"] <= 1.0
    assert "probe_heldout_accuracy" not in report.aggregate
    restored = read_report(root / "eval" / "report.jsonl")
    assert len(restored.records) == 8
    assert (root / "eval" / "summary.txt").exists()

    probe_path = root / "eval_probe" / "probe.pt"
    flags = {
        "eval": {"eval_resolution": 16, "probe": {"crop_size": 16, "epochs": 1, "min_accuracy": 0.0}},
        "job": {
            "samples": str(samples),
            "heldout_data": str(data / "heldout"),
            "probe": str(probe_path),
            "out": str(root / "eval_probe"),
        },
    }
    first = cmd_eval(load_config(EVAL_SECTIONS, flags=flags))
    assert probe_path.exists()
    assert "probe_correct_mean" in first.aggregate or "switch/probe_correct_mean" in first.aggregate
    second = cmd_eval(load_config(EVAL_SECTIONS, flags=flags))
    assert second.aggregate["probe_heldout_accuracy"] == first.aggregate["probe_heldout_accuracy"]


def test_sample_single_image(trained_run):
    root, data, run_dir = trained_run
    sample = read_dataset(data / "heldout")[0]
    save_image(sample.image, root / "single" / "image.png")
    save_mask(bbox_mask(sample.mask), root / "single" / "mask.png")
    out = cmd_sample(
        load_config(
            SAMPLE_SECTIONS,
            flags={
                "sample": {"steps": 4, "trace": True, "trace_every": 2},
                "job": {
                    "checkpoint": str(run_dir),
                    "image": str(root / "single" / "image.png"),
                    "mask": str(root / "single" / "mask.png"),
                    "prompt": sample.caption,
                    "device": "cpu",
                    "out": str(root / "single" / "out"),
                },
            },
        )
    )
    assert (out / "output.png").exists()
    assert np.all(load_mask(out / "final_mask.png") <= bbox_mask(sample.mask))
    assert len(list((out / "trace").glob("step_*.png"))) == 4
    assert (out / "trace_strip.png").exists()


def test_mask_ladder_command(tmp_path):
    mask = np.zeros((32, 32), dtype=bool)
    mask[8:20, 10:16] = True
    mask[14:18, 16:24] = True
    save_mask(mask, tmp_path / "mask.png")
    paths = cmd_mask_ladder(
        load_config(MASK_LADDER_SECTIONS, flags={"job": {"mask": str(tmp_path / "mask.png"), "out": str(tmp_path)}})
    )
    assert [p.name for p in paths] == [f"level_{s}.png" for s in range(5)]
    assert np.array_equal(load_mask(paths[0]), mask)
    assert np.array_equal(load_mask(paths[-1]), bbox_mask(mask))
    assert (tmp_path / "ladder_strip.png").exists()


def test_mask_ladder_command_rescales_to_mask_size(tmp_path):
    mask = np.zeros((64, 64), dtype=bool)
    mask[16:40, 20:32] = True
    mask[28:36, 32:48] = True
    save_mask(mask, tmp_path / "mask.png")
    paths = cmd_mask_ladder(
        load_config(MASK_LADDER_SECTIONS, flags={"job": {"mask": str(tmp_path / "mask.png"), "out": str(tmp_path)}})
    )
    expected = mask_ladder(mask, LadderConfig().scaled_to(64))
    for path, level in zip(paths, expected):
        assert np.array_equal(load_mask(path), level)


def test_sample_batch_with_other_class(trained_run):
    root, data, run_dir = trained_run
    samples = cmd_sample(
        load_config(
            SAMPLE_SECTIONS,
            flags={
                "sample": {"steps": 2, "mask_switch_step": 1},
                "job": {
                    "checkpoint": str(run_dir),
                    "data": str(data / "heldout"),
                    "num_samples": 3,
                    "prompt_class": "other",
                    "device": "cpu",
                    "out": str(root / "samples_other"),
                },
            },
        )
    )
    with open(samples / SAMPLE_RECORDS) as f:
        records = [json.loads(line) for line in f]
    assert len(records) == 3
    vocab = Vocabulary(**load_checkpoint(resolve_checkpoint(str(run_dir))).configs["vocabulary"])
    for record in records:
        assert record["class_index"] != record["source_class_index"]
        assert record["class_index"] == (record["source_class_index"] + 1) % len(vocab.classes)
        assert vocab.decode(record["token"]) == record["prompt"]
        assert record["prompt"].startswith(f"a {record['color']} ")


def test_other_class_token():
    vocab = Vocabulary(("circle", "square"), ("red", "blue"))
    assert vocab.decode(other_class_token(vocab, vocab.encode("a red circle"))) == "a red square"
    assert vocab.decode(other_class_token(vocab, vocab.encode("a blue square"))) == "a blue circle"
    assert vocab.decode(other_class_token(vocab, vocab.encode("square"))) == "circle"
    with pytest.raises(ValueError, match="null"):
        other_class_token(vocab, 0)


def test_conditions_from_prompts():
    vocab = Vocabulary(("circle", "square"), ("red", "blue"))
    assert condition_for_prompt(vocab, "").kind == "null"
    assert condition_for_prompt(vocab, "square").kind == "class-label"
    caption = condition_for_prompt(vocab, "a blue circle")
    assert caption.kind == "caption-template"
    assert caption.prompt_text == "a blue circle"
    with pytest.raises(ValueError, match="vocabulary"):
        condition_for_prompt(vocab, "a green circle")


def test_sample_job_validation():
    with pytest.raises(ConfigError, match="job.image"):
        SampleJob()
    with pytest.raises(ConfigError, match="job.mask"):
        SampleJob(image="x.png")
    with pytest.raises(ConfigError, match="job.condition"):
        SampleJob(data="heldout", condition="color")
    with pytest.raises(ConfigError, match="job.prompt_class"):
        SampleJob(data="heldout", prompt_class="random")


def test_script_exit_codes(tmp_path, monkeypatch):
    mask = np.zeros((32, 32), dtype=bool)
    mask[4:12, 4:12] = True
    save_mask(mask, tmp_path / "mask.png")

    monkeypatch.setattr(sys, "argv", ["maskfill_mask_ladder", str(tmp_path / "mask.png"), "--out", str(tmp_path / "a")])
    assert maskfill_mask_ladder.main() == 0
    assert (tmp_path / "a" / "level_4.png").exists()
    assert (tmp_path / "a" / "maskfill_mask_ladder.log").exists()

    monkeypatch.setattr(sys, "argv", ["maskfill_mask_ladder", str(tmp_path / "nope.png"), "--out", str(tmp_path / "b")])
    assert maskfill_mask_ladder.main() == 1

    monkeypatch.setattr(sys, "argv", ["maskfill_sample", "--out", str(tmp_path / "c")])
    assert maskfill_sample.main() == 1
