"""CLI commands, config parsing, PNG grids, manifests, exit codes."""

import json

import numpy as np
import pytest
from PIL import Image

from lrgan import datasynth as ds
from lrgan import io_utils
from lrgan.cli import main
from lrgan.errors import ConfigError
from lrgan.training import TrainConfig


# ---------------------------------------------------------------------------
# png grids
# ---------------------------------------------------------------------------

def test_png_grid_black_and_white_extremes(tmp_path):
    path = tmp_path / "grid.png"
    io_utils.write_png_grid(np.full((4, 3, 8, 8), -1.0, dtype=np.float32), 2, path)
    pixels = np.asarray(Image.open(path))
    assert pixels.max() == 0  # all -1 plus black separators
    io_utils.write_png_grid(np.full((1, 3, 8, 8), 1.0, dtype=np.float32), 1, path)
    pixels = np.asarray(Image.open(path))
    assert pixels.min() == 255


def test_png_grid_layout_and_separators(tmp_path):
    path = tmp_path / "grid.png"
    io_utils.write_png_grid(np.zeros((6, 3, 8, 8), dtype=np.float32), 3, path)
    pixels = np.asarray(Image.open(path))
    assert pixels.shape == (2 * 8 + 2, 3 * 8 + 2 * 2, 3)


def test_png_tile_round_trip_quantized(tmp_path):
    rng = np.random.default_rng(0)
    images = rng.uniform(-1, 1, size=(1, 3, 8, 8)).astype(np.float32)
    path = tmp_path / "one.png"
    io_utils.write_png_grid(images, 1, path)
    tile = np.asarray(Image.open(path)).transpose(2, 0, 1)
    expected = io_utils.to_uint8(images)[0]
    np.testing.assert_array_equal(tile, expected)


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def test_load_config_values(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        "# comment\n[train]\ndataset=mnist_two\nbatch_size=32\nepochs=2\n"
        "s_min=1.2\n[model]\ntimesteps=3\n[data]\ndigits=synthetic\n")
    model_config, train_config, data = io_utils.load_config(cfg)
    assert train_config.batch_size == 32
    assert train_config.s_min == pytest.approx(1.2)
    assert model_config.s_min == pytest.approx(1.2)
    assert model_config.timesteps == 3
    assert model_config.dataset == "mnist_two"
    assert data == {"digits": "synthetic"}


def test_load_config_unknown_key_names_it(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[train]\ntmiesteps=3\n")
    with pytest.raises(ConfigError, match="tmiesteps"):
        io_utils.load_config(cfg)


def test_load_config_rejects_stray_lines(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("oops=1\n")
    with pytest.raises(ConfigError, match="outside any"):
        io_utils.load_config(cfg)


def test_config_round_trip_idempotent(tmp_path):
    config = TrainConfig(dataset="mnist_one", batch_size=32, epochs=3, lr=1e-3)
    text = io_utils.serialize_config(config, {"digits": "synthetic"})
    cfg = tmp_path / "a.cfg"
    cfg.write_text(text)
    _, parsed, data = io_utils.load_config(cfg)
    assert io_utils.serialize_config(parsed, data) == text


def test_preset_defaults_match_published_settings(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("[train]\ndataset=mnist_one\n")
    model_config, _, _ = io_utils.load_config(cfg)
    assert model_config.s_min == pytest.approx(1.2)
    cfg.write_text("[train]\ndataset=mnist_two\n")
    model_config, _, _ = io_utils.load_config(cfg)
    assert model_config.timesteps == 3
    assert model_config.s_min == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def test_manifest_appends_and_hashes(tmp_path):
    manifest = io_utils.RunManifest(tmp_path)
    manifest.append("config", seed=7)
    artifact = tmp_path / "blob.bin"
    artifact.write_bytes(b"payload")
    manifest.record_artifact(artifact)
    records = manifest.records()
    assert [r["kind"] for r in records] == ["config", "artifact"]
    assert records[1]["sha256"] == io_utils.sha256_of_file(artifact)


# ---------------------------------------------------------------------------
# subcommands end to end
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """synth -> short train, shared by the command tests below."""
    root = tmp_path_factory.mktemp("cli")
    rc = main(["synth", "--dataset", "mnist_one", "--n", "120", "--seed", "1",
               "--out", str(root / "one.lrds")])
    assert rc == 0
    cfg = root / "run.cfg"
    cfg.write_text(
        "[train]\ndataset=mnist_one\nbatch_size=16\nepochs=1\nseed=3\n"
        f"[data]\ncache={root / 'one.lrds'}\n")
    rc = main(["train", "--config", str(cfg), "--out", str(root / "run")])
    assert rc == 0
    return root


def test_cli_synth_wrote_cache(cli_workspace):
    samples = ds.read_cache(cli_workspace / "one.lrds")
    assert len(samples) == 120
    assert samples[0].image.shape == (3, 32, 32)


def test_cli_train_artifacts(cli_workspace):
    run = cli_workspace / "run"
    assert (run / "checkpoint.lrck").exists()
    assert (run / "metrics.csv").exists()
    records = [json.loads(l) for l in (run / "manifest.jsonl").read_text().splitlines()]
    kinds = [r["kind"] for r in records]
    assert kinds[0] == "config"  # manifest written before model state
    assert "params" in kinds and "artifact" in kinds


def test_cli_sample_grids(cli_workspace, tmp_path):
    out = tmp_path / "grids"
    rc = main(["sample", "--checkpoint", str(cli_workspace / "run" / "checkpoint.lrck"),
               "--out", str(out), "--grid", "2x3"])
    assert rc == 0
    for name in ("background", "appearance", "mask", "carved", "transformed", "composite"):
        assert (out / f"{name}.png").exists(), name
    pixels = np.asarray(Image.open(out / "background.png"))
    assert pixels.shape == (2 * 32 + 2, 3 * 32 + 2 * 2, 3)


def test_cli_sample_bad_grid_is_usage_error(cli_workspace, tmp_path):
    rc = main(["sample", "--checkpoint", str(cli_workspace / "run" / "checkpoint.lrck"),
               "--out", str(tmp_path / "x"), "--grid", "banana"])
    assert rc == 1


def test_cli_resume_continues_bit_exact(cli_workspace, tmp_path):
    cfg = tmp_path / "resume.cfg"
    cfg.write_text(
        "[train]\ndataset=mnist_one\nbatch_size=16\nepochs=2\nseed=3\n"
        f"[data]\ncache={cli_workspace / 'one.lrds'}\n")
    out_a = tmp_path / "uninterrupted"
    rc = main(["train", "--config", str(cfg), "--out", str(out_a)])
    assert rc == 0
    out_b = tmp_path / "resumed"
    rc = main(["train", "--config", str(cfg), "--out", str(out_b),
               "--resume", str(cli_workspace / "run" / "checkpoint.lrck")])
    assert rc == 0
    from lrgan.training import load_checkpoint
    _, arrays_a, _, _ = load_checkpoint(out_a / "checkpoint.lrck")
    _, arrays_b, _, _ = load_checkpoint(out_b / "checkpoint.lrck")
    assert set(arrays_a) == set(arrays_b)
    for name in arrays_a:
        assert np.array_equal(arrays_a[name], arrays_b[name]), name


def test_cli_pair(cli_workspace, tmp_path):
    out = tmp_path / "pairs.csv"
    rc = main(["pair", "--a", str(cli_workspace / "one.lrds"),
               "--b", str(cli_workspace / "one.lrds"), "--out", str(out)])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "index_a,index_b"
    assert len(lines) == 1 + 120


def test_cli_stats(cli_workspace, tmp_path):
    out = tmp_path / "stats"
    rc = main(["stats", "--checkpoint", str(cli_workspace / "run" / "checkpoint.lrck"),
               "--out", str(out), "--n", "32"])
    assert rc == 0
    assert (out / "transform_histograms.csv").exists()
    assert (out / "transform_histograms.png").exists()
    report = (out / "stats.csv").read_text()
    assert "mask_binariness" in report


def test_cli_eval_with_judges(cli_workspace, tmp_path):
    judges = tmp_path / "judges.csv"
    judges.write_text("image_id,judge_id,label\n"
                      "a,0,1\na,1,1\na,2,1\na,3,1\na,4,1\n"
                      "b,0,NR\nb,1,NR\nb,2,NR\nb,3,NR\nb,4,NR\n")
    out = tmp_path / "eval"
    rc = main(["eval", "--cache", str(cli_workspace / "one.lrds"), "--out", str(out),
               "--judges", str(judges), "--epochs", "1"])
    assert rc == 0
    table = (out / "quality_levels.csv").read_text().strip().splitlines()
    assert "a,1,5" in table and "b,NR,0" in table


def test_cli_unknown_command_usage_exit(capsys):
    assert main(["definitely-not-a-command"]) == 1


def test_cli_missing_cache_is_io_error(tmp_path):
    rc = main(["pair", "--a", str(tmp_path / "missing.lrds"),
               "--b", str(tmp_path / "missing.lrds"), "--out", str(tmp_path / "o.csv")])
    assert rc == 4


def test_cli_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("[train]\nbatch_size=banana\n")
    rc = main(["train", "--config", str(cfg), "--out", str(tmp_path / "run")])
    assert rc in (2, 3)  # int() failure surfaces as config error
