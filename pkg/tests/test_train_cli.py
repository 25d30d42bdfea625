"""Training-loop contracts and the command-line interface."""

import json
import re

import numpy as np
import pytest

from any2i.blob import load_tensor
from any2i.cli import main
from any2i.codec import LatentCodec
from any2i.dataset import DatasetManifest, generate_records, write_dataset
from any2i.flow import GuidanceConfig
from any2i.model import ModelConfig, VelocityModel, load_checkpoint
from any2i.ppm import read_ppm
from any2i.train import (StageConfig, TrainConfig, evaluate, evaluate_flow_loss,
                         rescale_record, split_holdout, train_model)

TINY_MODEL = ModelConfig(d_model=32, n_layers=1, n_heads=2, head_dim=16, max_seq_len=128)


def _tiny_dataset(n=12, seed=0, mix=None):
    manifest = DatasetManifest(record_count=n, seed=seed, latent_size=8,
                               task_mix=mix or {"t2i": 1.0})
    return generate_records(manifest), LatentCodec(manifest.codec_seed)


def test_zero_step_training_keeps_initialization():
    records, codec = _tiny_dataset()
    config = TrainConfig(stages=[StageConfig(8, steps=0, batch_size=2, lr=1e-3)], seed=5)
    fresh = VelocityModel(TINY_MODEL, seed=config.seed, codec_seed=codec.seed)
    model, metrics = train_model(config, records, codec, model_config=TINY_MODEL)
    assert metrics.losses == []
    for name in fresh.params:
        np.testing.assert_array_equal(model.params[name].data, fresh.params[name].data)


def test_short_training_reduces_loss():
    records, codec = _tiny_dataset(n=16, seed=1)
    config = TrainConfig(stages=[StageConfig(8, steps=150, batch_size=4, lr=3e-3)],
                         seed=1, warmup_steps=10)
    model, metrics = train_model(config, records, codec, model_config=TINY_MODEL)
    assert np.mean(metrics.losses[-10:]) < 0.7 * np.mean(metrics.losses[:5])
    assert metrics.flops > 0 and metrics.wall_clock > 0


def test_training_is_deterministic():
    records, codec = _tiny_dataset(n=8, seed=2)
    config = TrainConfig(stages=[StageConfig(8, steps=8, batch_size=2, lr=1e-3)], seed=2)
    m1, r1 = train_model(config, records, codec, model_config=TINY_MODEL)
    m2, r2 = train_model(config, records, codec, model_config=TINY_MODEL)
    assert r1.losses == r2.losses
    for name in m1.params:
        np.testing.assert_array_equal(m1.params[name].data, m2.params[name].data)


def test_training_aborts_on_non_finite_loss():
    records, codec = _tiny_dataset(n=4, seed=3)
    config = TrainConfig(stages=[StageConfig(8, steps=200, batch_size=2, lr=1e14)],
                         seed=3, warmup_steps=1)
    with pytest.raises((RuntimeError, ValueError), match="(step|finite)"):
        train_model(config, records, codec, model_config=TINY_MODEL)


def test_stage_resolution_rescaling():
    records, codec = _tiny_dataset(n=4, seed=4)
    rec16 = rescale_record(records[0], 16, codec)
    assert rec16.target.shape == (12, 16, 16)
    # nearest-neighbor upscale then downscale is the identity on 2x grids
    back = rescale_record(rec16, 8, codec)
    np.testing.assert_allclose(back.target, records[0].target, atol=1e-5)


def test_train_config_validation():
    with pytest.raises(ValueError, match="at least one stage"):
        TrainConfig(stages=[])
    with pytest.raises(ValueError, match="divisible"):
        TrainConfig(stages=[StageConfig(7, 1, 1, 1e-3)])
    with pytest.raises(ValueError, match="lr"):
        TrainConfig(stages=[StageConfig(8, 1, 1, -1.0)])


def test_channel_mismatch_rejected():
    records, codec = _tiny_dataset(n=2, seed=5)
    bad = ModelConfig(d_model=32, n_layers=1, n_heads=2, head_dim=16, latent_channels=4)
    config = TrainConfig(stages=[StageConfig(8, steps=1, batch_size=1, lr=1e-3)])
    with pytest.raises(ValueError, match="channels"):
        train_model(config, records, codec, model_config=bad)


def test_evaluate_targets_bypass_scores_one():
    records, codec = _tiny_dataset(n=6, seed=6, mix={"t2i": 0.5, "edit": 0.5})
    model = VelocityModel(TINY_MODEL, seed=0, codec_seed=codec.seed)
    scores = evaluate(model, records, codec, GuidanceConfig(steps=1), use_targets=True)
    for fam in scores.values():
        for metric, value in fam.items():
            if metric != "count":
                assert value == pytest.approx(1.0)


def test_evaluate_empty_split_errors():
    _, codec = _tiny_dataset(n=2, seed=7)
    model = VelocityModel(TINY_MODEL, seed=0)
    with pytest.raises(ValueError, match="empty"):
        evaluate(model, [], codec, GuidanceConfig(steps=1))
    with pytest.raises(ValueError, match="empty"):
        evaluate_flow_loss(model, [])


def test_split_holdout_deterministic_partition():
    records, _ = _tiny_dataset(n=20, seed=8)
    train1, held1 = split_holdout(records, frac=0.1, seed=3)
    train2, held2 = split_holdout(records, frac=0.1, seed=3)
    assert len(held1) == 2 and len(train1) == 18
    assert [r.instruction for r in held1] == [r.instruction for r in held2]


# -- CLI -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = main(["gen-data", "--out", str(data), "--count", "12", "--seed", "1",
               "--mix", '{"t2i": 0.75, "edit": 0.25}'])
    assert rc == 0
    cfg = {
        "stages": [{"resolution": 8, "steps": 6, "batch_size": 2, "lr": 1e-3}],
        "seed": 0,
        "model": {"d_model": 32, "n_layers": 1, "n_heads": 2, "head_dim": 16, "max_seq_len": 128},
    }
    cfg_path = root / "train.json"
    cfg_path.write_text(json.dumps(cfg))
    ckpt = root / "model.bin"
    rc = main(["train", "--data", str(data), "--out", str(ckpt), "--config", str(cfg_path)])
    assert rc == 0
    return root, data, ckpt


def test_cli_gen_data_prints_counts(tmp_path, capsys):
    rc = main(["gen-data", "--out", str(tmp_path / "d"), "--count", "10", "--seed", "2"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "wrote 10 records" in out
    assert re.search(r"t2i: \d+", out)


def test_cli_train_writes_checkpoint_and_metrics(cli_workspace):
    root, data, ckpt = cli_workspace
    assert ckpt.exists()
    metrics = ckpt.parent / (ckpt.name + ".metrics.csv")
    lines = metrics.read_text().splitlines()
    assert lines[0] == "step,stage,loss"
    assert len(lines) == 7
    model, extra = load_checkpoint(ckpt)
    assert extra["train_config"]["stages"][0]["steps"] == 6
    assert extra["manifest"]["record_count"] == 12


def test_cli_sample_logs_defaults_and_is_reproducible(cli_workspace, tmp_path, capsys):
    root, data, ckpt = cli_workspace
    out_ppm = tmp_path / "img.ppm"
    out_lat = tmp_path / "lat.bin"
    argv = ["sample", "--checkpoint", str(ckpt), "--out", str(out_ppm),
            "--latent-out", str(out_lat), "--instruction", "a red square at center",
            "--steps", "2"]
    assert main(argv) == 0
    log = capsys.readouterr().out
    assert "steps=2" in log and "text_scale=2.5" in log and "image_scale=1.6" in log
    img = read_ppm(out_ppm)
    assert img.shape == (16, 16, 3)
    first = out_lat.read_bytes()
    assert main(argv) == 0
    assert out_lat.read_bytes() == first  # same seed, identical blob


def test_cli_sample_single_step_and_edit_scale(cli_workspace, tmp_path, capsys):
    root, data, ckpt = cli_workspace
    # find an edit record in the dataset
    from any2i.dataset import read_dataset
    _, records = read_dataset(data)
    idx = next(i for i, r in enumerate(records) if r.task_tag == "edit")
    out_ppm = tmp_path / "e.ppm"
    assert main(["sample", "--checkpoint", str(ckpt), "--out", str(out_ppm),
                 "--record", f"{data}:{idx}", "--steps", "1"]) == 0
    log = capsys.readouterr().out
    assert "steps=1" in log
    assert "image_scale=2.0" in log  # editing auto-switch


def test_cli_eval_oracle_check_and_csv(cli_workspace, tmp_path, capsys):
    root, data, ckpt = cli_workspace
    out_csv = tmp_path / "metrics.csv"
    rc = main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--split", "all",
               "--oracle-check", "--out", str(out_csv)])
    assert rc == 0
    rows = out_csv.read_text().splitlines()
    assert rows[0] == "family,metric,value,count"
    families = {line.split(",")[0] for line in rows[1:]}
    assert families == {"t2i", "edit"}
    for line in rows[1:]:
        assert float(line.split(",")[2]) == pytest.approx(1.0)


def test_cli_eval_empty_split_fails(cli_workspace, tmp_path):
    root, data, ckpt = cli_workspace
    with pytest.raises(SystemExit):
        main(["eval", "--checkpoint", str(ckpt), "--data", str(data),
              "--split", "held", "--holdout", "0.0"])


def test_cli_inspect_mask_text_only(capsys):
    rc = main(["inspect-mask", "--instruction", "abc", "--latent-size", "4"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "matches the brute-force rule evaluator" in out
    assert "noise_image" in out
    grid_lines = [l for l in out.splitlines() if set(l) <= {"#", "."} and l]
    assert len(grid_lines) == 3 + 1 + 4  # text + timestep + 2x2 noise


def test_cli_inspect_mask_oversize_rejected():
    with pytest.raises(SystemExit, match="exceeds"):
        main(["inspect-mask", "--instruction", "abc", "--latent-size", "16", "--max-len", "10"])


def test_cli_inspect_mask_causal_mode(capsys):
    rc = main(["inspect-mask", "--instruction", "ab", "--latent-size", "4",
               "--mask-mode", "causal"])
    out = capsys.readouterr().out
    assert rc == 0
    grid = [l for l in out.splitlines() if set(l) <= {"#", "."} and l]
    # causal: strictly lower-triangular rendering
    for i, line in enumerate(grid):
        assert line.count("#") == i + 1
