import dataclasses
import os

import numpy as np
import pytest

from keymotion import cli, synthdata, trainer


def test_config_file_parsing(tmp_path):
    path = tmp_path / "train.cfg"
    path.write_text("# comment line\nk = 4\nepochs=3  # trailing\n\n"
                    "dtype = float32\nno_flow = true\n")
    values = cli.read_config_file(path)
    assert values == {"k": "4", "epochs": "3", "dtype": "float32",
                      "no_flow": "true"}
    bad = tmp_path / "bad.cfg"
    bad.write_text("k: 4\n")
    with pytest.raises(ValueError, match="expected key=value"):
        cli.read_config_file(bad)


def test_apply_config_coercion():
    cfg = cli.apply_config(trainer.TrainConfig(),
                           {"k": "4", "lr1": "1e-3", "no_flow": "yes",
                            "dtype": "float32"})
    assert cfg.k == 4 and cfg.lr1 == 1e-3
    assert cfg.no_flow is True and cfg.dtype == "float32"
    with pytest.raises(ValueError, match="unknown config key"):
        cli.apply_config(trainer.TrainConfig(), {"kk": "4"})
    with pytest.raises(ValueError, match="not a boolean"):
        cli.apply_config(trainer.TrainConfig(), {"no_flow": "maybe"})


def test_flag_precedence_over_file(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("k = 4\nseed = 1\nepochs = 9\n")
    args = type("A", (), {"config": str(path), "seed": 7, "k": None,
                          "epochs": None, "ablation": ["no_flow"]})
    cfg = cli.build_train_config(args)
    assert cfg.k == 4          # from file
    assert cfg.seed == 7       # flag wins
    assert cfg.epochs == 9
    assert cfg.no_flow is True


def test_ablation_names_map_to_config_fields():
    fields = {f.name for f in dataclasses.fields(trainer.TrainConfig)}
    assert set(cli.ABLATIONS.values()) <= fields


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        cli.dispatch([])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.dispatch(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.dispatch(["train", "--data", "x"])  # missing --out
    assert exc.value.code == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    rc = cli.dispatch(["evaluate", "--data", str(tmp_path / "nope"),
                       "--checkpoint", str(tmp_path / "nope.ckpt")])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_make_dataset_command(tmp_path, capsys):
    cfg = tmp_path / "data.cfg"
    cfg.write_text("num_videos = 2\nframes_per_video = 2\nsize = 32\n")
    out = tmp_path / "data"
    rc = cli.dispatch(["make-dataset", "--out", str(out), "--seed", "5",
                       "--config", str(cfg)])
    assert rc == 0
    text = capsys.readouterr().out
    assert "tree sha256:" in text
    ds = synthdata.Dataset(out)
    assert len(ds) == 2
    spec = synthdata.SynthSpec(seed=5, num_videos=2, frames_per_video=2,
                               size=32)
    import tempfile
    with tempfile.TemporaryDirectory() as ref:
        synthdata.generate_dataset(spec, ref)
        assert synthdata.tree_sha256(ref) == synthdata.tree_sha256(out)


def test_reconstruct_command(tiny_world, tmp_path, capsys):
    clip_dir = tiny_world.data_dir / "video_002"
    out = tmp_path / "rec"
    rc = cli.dispatch(["reconstruct", str(clip_dir),
                       "--checkpoint", str(tiny_world.final),
                       "--out", str(out)])
    assert rc == 0
    assert "l1:" in capsys.readouterr().out
    assert sorted(p for p in os.listdir(out) if p.endswith(".png")) == [
        "frame_000.png", "frame_001.png", "frame_002.png"]
    assert (out / "reconstruction.gif").exists()


def test_animate_command_writes_all_outputs(tiny_world, tmp_path):
    src = tiny_world.data_dir / "video_000" / "frame_000.png"
    drv = tiny_world.data_dir / "video_001"
    out = tmp_path / "anim"
    rc = cli.dispatch(["animate", str(src), str(drv),
                       "--checkpoint", str(tiny_world.final),
                       "--out", str(out), "--mode", "relative"])
    assert rc == 0
    names = set(os.listdir(out))
    assert {"frame_000.png", "animation.gif",
            "transferred_tracks.txt"} <= names
    assert any(n.startswith("compare_") for n in names)
    from keymotion import keypoints
    locs, covs = keypoints.read_tracks(out / "transferred_tracks.txt")
    assert locs.shape == (3, tiny_world.config.k, 2)


def test_evaluate_command_csv(tiny_world, tmp_path, capsys):
    csv_path = tmp_path / "metrics.csv"
    rc = cli.dispatch(["evaluate", "--data", str(tiny_world.data_dir),
                       "--checkpoint", str(tiny_world.final),
                       "--out", str(csv_path)])
    assert rc == 0
    text = capsys.readouterr().out
    for key in ("l1", "akd", "akd_self", "videos"):
        assert key in text
    lines = csv_path.read_text().strip().splitlines()
    assert len(lines) == 2 and lines[0].split(",")[0] == "l1"


def test_show_keypoints_command(tiny_world, tmp_path):
    out = tmp_path / "kp"
    rc = cli.dispatch(["show-keypoints",
                       str(tiny_world.data_dir / "video_000"),
                       "--checkpoint", str(tiny_world.final),
                       "--out", str(out)])
    assert rc == 0
    assert (out / "tracks.txt").exists()
    pngs = [n for n in os.listdir(out) if n.endswith(".png")]
    assert len(pngs) == 3


def test_kp_sweep_reuses_checkpoints(tiny_world, tmp_path, capsys):
    # k=2 matches the session checkpoint layout: k2/checkpoint_final.ckpt
    out = tmp_path / "sweep"
    os.makedirs(out / "k2")
    os.link(tiny_world.final, out / "k2" / "checkpoint_final.ckpt")
    cfg = tmp_path / "c.cfg"
    cfg.write_text("epochs = 2\ndtype = float32\nimage_size = 32\n"
                   "checkpoint_every = 1\n")
    rc = cli.dispatch(["kp-sweep", "--data", str(tiny_world.data_dir),
                       "--out", str(out), "--k", "2", "--seed", "11",
                       "--config", str(cfg)])
    assert rc == 0
    lines = (out / "kp_sweep.csv").read_text().strip().splitlines()
    assert lines[0].split(",")[0] == "k"
    assert lines[1].split(",")[0] == "2"
    assert "training k=2" not in capsys.readouterr().out  # reused, no retrain
