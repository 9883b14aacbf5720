import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from maskfill.errors import CheckpointError, ConfigError, NonFiniteError
from maskfill.losses import LossConfig
from maskfill.maskops import LadderConfig
from maskfill.model import InpaintingUNet
from maskfill.trainer import (
    CHECKPOINT_FORMAT,
    METRICS_HEADER,
    TASK_INPAINT,
    TASK_TEXT_TO_IMAGE,
    TrainConfig,
    assemble_batch,
    latest_checkpoint,
    load_checkpoint,
    make_optimizer,
    save_checkpoint,
    train,
    training_step,
)

from . import TINY_TIMESTEPS, tiny_dataset, tiny_ladder, tiny_model_config, tiny_schedule_config


def small_config(**kwargs) -> TrainConfig:
    values = dict(batch_size=4, total_steps=4, checkpoint_every=2, progress=False, device="cpu", seed=5)
    values.update(kwargs)
    return TrainConfig(**values)


def test_config_validation():
    with pytest.raises(ConfigError, match="train.task_probabilities"):
        TrainConfig(task_probabilities=(0.5, 0.6))
    with pytest.raises(ConfigError, match="train.task_probabilities"):
        TrainConfig(task_probabilities=(1.0,))
    with pytest.raises(ConfigError, match="train.cond_dropout_prob"):
        TrainConfig(cond_dropout_prob=1.5)
    with pytest.raises(ConfigError, match="train.batch_size"):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError, match="train.checkpoint_every"):
        TrainConfig(checkpoint_every=0)


def test_batches_are_reproducible(tiny_dataset, tiny_ladder):
    cfg = small_config(batch_size=8)
    a = assemble_batch(tiny_dataset, 3, cfg, tiny_ladder, TINY_TIMESTEPS)
    b = assemble_batch(tiny_dataset, 3, cfg, tiny_ladder, TINY_TIMESTEPS)
    threaded = assemble_batch(tiny_dataset, 3, replace(cfg, n_workers=4), tiny_ladder, TINY_TIMESTEPS)
    for key, value in a.__dict__.items():
        assert torch.equal(value, getattr(b, key)), key
        assert torch.equal(value, getattr(threaded, key)), key
    other = assemble_batch(tiny_dataset, 4, cfg, tiny_ladder, TINY_TIMESTEPS)
    assert not torch.equal(a.noise, other.noise)

    assert len(a) == 8
    assert a.images.shape == (8, 3, 16, 16)
    assert a.precision_masks.shape == (8, 1, 16, 16)
    assert int(a.timesteps.min()) >= 1 and int(a.timesteps.max()) <= TINY_TIMESTEPS


def test_inpaint_only_batches(tiny_dataset, tiny_ladder):
    cfg = small_config(batch_size=32, task_probabilities=(1.0, 0.0), cond_dropout_prob=0.0)
    batch = assemble_batch(tiny_dataset, 1, cfg, tiny_ladder, TINY_TIMESTEPS)
    assert torch.all(batch.tasks == TASK_INPAINT)
    assert torch.all(batch.tokens > 0)
    for i in range(len(batch)):
        idx = int(batch.sample_ids[i])
        expected = tiny_dataset.precision_mask(idx, int(batch.levels[i]), tiny_ladder)
        assert torch.equal(batch.precision_masks[i, 0].bool(), torch.from_numpy(expected))
        assert torch.equal(batch.instance_masks[i, 0].bool(), torch.from_numpy(tiny_dataset.masks[idx]))
        # the instance always lies inside its precision mask
        assert torch.all(batch.precision_masks[i][batch.instance_masks[i].bool()] == 1)
    assert torch.all(batch.prediction_weight == 1)

    exact = assemble_batch(tiny_dataset, 1, replace(cfg, use_precision_ladder=False), tiny_ladder, TINY_TIMESTEPS)
    assert torch.all(exact.levels == 0)


def test_text_to_image_items(tiny_dataset, tiny_ladder):
    cfg = small_config(batch_size=16, task_probabilities=(0.0, 1.0), cond_dropout_prob=0.0)
    batch = assemble_batch(tiny_dataset, 1, cfg, tiny_ladder, TINY_TIMESTEPS)
    assert torch.all(batch.tasks == TASK_TEXT_TO_IMAGE)
    assert torch.all(batch.precision_masks == 1)
    assert torch.all(batch.levels == tiny_ladder.S)
    expected_tokens = torch.from_numpy(tiny_dataset.caption_tokens[batch.sample_ids.numpy()])
    assert torch.equal(batch.tokens, expected_tokens)
    assert torch.all(batch.prediction_weight == 0)


def test_task_and_level_frequencies(tiny_dataset, tiny_ladder):
    cfg = small_config(batch_size=10_000)
    batch = assemble_batch(tiny_dataset, 1, cfg, tiny_ladder, TINY_TIMESTEPS)
    inpaint = batch.tasks == TASK_INPAINT
    assert float(inpaint.double().mean()) == pytest.approx(0.8, abs=0.02)
    levels = batch.levels[inpaint]
    for s in range(tiny_ladder.S + 1):
        assert float((levels == s).double().mean()) == pytest.approx(1 / (tiny_ladder.S + 1), abs=0.02)
    assert float((batch.tokens == 0).double().mean()) == pytest.approx(0.1, abs=0.02)


def test_condition_dropout_extremes(tiny_dataset, tiny_ladder):
    dropped = assemble_batch(tiny_dataset, 1, small_config(batch_size=32, cond_dropout_prob=1.0), tiny_ladder, 20)
    assert torch.all(dropped.tokens == 0)
    kept = assemble_batch(tiny_dataset, 1, small_config(batch_size=32, cond_dropout_prob=0.0), tiny_ladder, 20)
    assert torch.all(kept.tokens > 0)


def test_training_step_updates_the_model(tiny_dataset, tiny_ladder):
    torch.manual_seed(0)
    cfg = small_config()
    sched = tiny_schedule_config().build()
    model = InpaintingUNet(tiny_model_config())
    optimizer = make_optimizer(model, cfg)
    before = [p.detach().clone() for p in model.parameters()]
    batch = assemble_batch(tiny_dataset, 1, cfg, tiny_ladder, TINY_TIMESTEPS)
    record = training_step(model, optimizer, batch, sched, cfg, 1)
    assert any(not torch.equal(a, b) for a, b in zip(before, model.parameters()))
    assert record.step == 1 and record.batch_size == 4
    assert record.total == pytest.approx(record.seg + 0.01 * record.dice, rel=1e-5)
    assert record.row().startswith(f"1\tinpaint:{record.inpaint_items}/4\t")


def test_lam_zero_drops_the_prediction_loss(tiny_dataset, tiny_ladder):
    torch.manual_seed(0)
    cfg = small_config(loss=LossConfig(lam=0.0))
    sched = tiny_schedule_config().build()
    model = InpaintingUNet(tiny_model_config())
    batch = assemble_batch(tiny_dataset, 1, cfg, tiny_ladder, TINY_TIMESTEPS)
    record = training_step(model, make_optimizer(model, cfg), batch, sched, cfg, 1)
    assert record.total == record.seg
    assert record.dice > 0


def test_non_finite_loss_raises(tiny_dataset, tiny_ladder):
    torch.manual_seed(0)
    cfg = small_config()
    sched = tiny_schedule_config().build()
    model = InpaintingUNet(tiny_model_config())
    before = [p.detach().clone() for p in model.parameters()]
    batch = assemble_batch(tiny_dataset, 2, cfg, tiny_ladder, TINY_TIMESTEPS)
    batch.noise[0, 0, 0, 0] = float("nan")
    with pytest.raises(NonFiniteError, match="step 2") as info:
        training_step(model, make_optimizer(model, cfg), batch, sched, cfg, 2)
    record = info.value.record
    assert record["step"] == 2
    assert record["batch_size"] == 4
    assert {"inpaint_items", "t_min", "t_max", "t_mean", "seg", "dice"} <= set(record)
    assert all(torch.equal(a, b) for a, b in zip(before, model.parameters()))


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    cfg = small_config()
    sched = tiny_schedule_config().build()
    model = InpaintingUNet(tiny_model_config())
    torch.nn.init.normal_(model.out_conv.weight, std=0.1)
    path = save_checkpoint(tmp_path / "ckpt.pt", model, make_optimizer(model, cfg), {"train": {"seed": 5}}, 7, sched)

    ckpt = load_checkpoint(path)
    assert ckpt.step == 7
    assert ckpt.configs["train"] == {"seed": 5}
    assert ckpt.model_config == model.config
    assert ckpt.schedule.T == sched.T
    for key, value in model.state_dict().items():
        assert torch.equal(ckpt.model_state[key], value)

    restored = ckpt.build_model()
    x_t = torch.randn(2, 3, 16, 16)
    mask = torch.ones(2, 1, 16, 16)
    args = (x_t, mask, torch.tensor([3, 9]), torch.tensor([1, 7]), torch.tensor([0, 4]))
    model.eval()
    with torch.no_grad():
        assert torch.equal(restored(*args).eps_hat, model(*args).eps_hat)


def test_checkpoint_validation(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.pt")
    torch.save({"format": "other/1"}, str(tmp_path / "other.pt"))
    with pytest.raises(CheckpointError, match="format"):
        load_checkpoint(tmp_path / "other.pt")
    torch.save({"format": CHECKPOINT_FORMAT, "step": 1}, str(tmp_path / "partial.pt"))
    with pytest.raises(CheckpointError, match="model_state"):
        load_checkpoint(tmp_path / "partial.pt")
    (tmp_path / "garbage.pt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="unreadable"):
        load_checkpoint(tmp_path / "garbage.pt")


def test_train_writes_metrics_and_manifest(tiny_dataset, tiny_ladder, tmp_path):
    result = train(tiny_dataset, tmp_path, small_config(), tiny_model_config(), tiny_schedule_config(), tiny_ladder)
    assert [r.step for r in result.records] == [1, 2, 3, 4]
    lines = (tmp_path / "metrics.tsv").read_text().splitlines(keepends=True)
    assert lines[0] == METRICS_HEADER
    assert lines[1:] == [r.row() for r in result.records]

    with open(tmp_path / "manifest.json") as f:
        manifest = json.load(f)
    assert [c["step"] for c in manifest["checkpoints"]] == [2, 4]
    assert len(manifest["config_hash"]) == 64
    assert latest_checkpoint(tmp_path) == result.checkpoints[-1]
    assert load_checkpoint(result.checkpoints[-1]).configs["vocabulary"]["classes"] == list(tiny_dataset.vocab.classes)


def test_resume_matches_uninterrupted_run(tiny_dataset, tiny_ladder, tmp_path):
    args = (tiny_model_config(), tiny_schedule_config(), tiny_ladder)
    straight = train(tiny_dataset, tmp_path / "straight", small_config(), *args)

    first = train(tiny_dataset, tmp_path / "resumed", small_config(total_steps=2), *args)
    resumed = train(tiny_dataset, tmp_path / "resumed", small_config(), *args, resume_from=first.checkpoints[-1])
    assert [r.step for r in resumed.records] == [3, 4]

    for a, b in zip(straight.model.parameters(), resumed.model.parameters()):
        assert torch.allclose(a, b, atol=1e-6)
    for a, b in zip(straight.records[2:], resumed.records):
        assert a.total == pytest.approx(b.total, abs=1e-6)
    rows = (tmp_path / "resumed" / "metrics.tsv").read_text().splitlines()
    assert len(rows) == 1 + 4


def test_resume_rejects_a_different_schedule_or_model(tiny_dataset, tiny_ladder, tmp_path):
    args = (tiny_model_config(), tiny_schedule_config(), tiny_ladder)
    first = train(tiny_dataset, tmp_path, small_config(total_steps=2), *args)
    other_schedule = replace(tiny_schedule_config(), beta_end=0.1)
    with pytest.raises(CheckpointError, match="schedule"):
        train(
            tiny_dataset,
            tmp_path,
            small_config(),
            tiny_model_config(),
            other_schedule,
            tiny_ladder,
            resume_from=first.checkpoints[-1],
        )
    with pytest.raises(CheckpointError, match="model"):
        train(
            tiny_dataset,
            tmp_path,
            small_config(),
            tiny_model_config(base_width=8),
            tiny_schedule_config(),
            tiny_ladder,
            resume_from=first.checkpoints[-1],
        )


def test_ladder_is_rescaled_to_the_data(tiny_dataset, tmp_path):
    # LadderConfig() is given for 32 px images, the tiny data is 16 px
    result = train(
        tiny_dataset, tmp_path, small_config(total_steps=1), tiny_model_config(), tiny_schedule_config(), LadderConfig()
    )
    ladder = load_checkpoint(result.checkpoints[-1]).configs["ladder"]
    assert ladder["kernel_sizes"] == [5, 9, 17]
    assert ladder["sigmas"] == pytest.approx([1.5, 3.0, 6.0])
    assert ladder["resolution"] == 16


def test_loss_decreases_over_a_short_run(tiny_dataset, tiny_ladder, tmp_path):
    cfg = small_config(batch_size=16, total_steps=60, checkpoint_every=60, learning_rate=1e-3)
    result = train(tiny_dataset, tmp_path, cfg, tiny_model_config(), tiny_schedule_config(), tiny_ladder)
    totals = [r.total for r in result.records]
    assert len(totals) == 60
    assert np.mean(totals[-15:]) < np.mean(totals[:15])
