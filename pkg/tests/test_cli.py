"""CLI: exit codes, config scaffolding, training, rendering, verify."""

import json

import numpy as np
import pytest

from d4d.cli import EXIT_IO, EXIT_OK, EXIT_USAGE, build_provider, main
from d4d.config import load_config, parse_toml
from d4d.errors import ConfigError
from d4d.renderer import read_displacement_raw, read_png


def write_toy_config(tmp_path, **overrides):
    """A config tiny enough for CLI tests to train in seconds."""
    text = f"""
[run]
seed = 3
prompt = "cli toy"

[model]
canonical_levels = 2
canonical_base_res = 2
canonical_max_res = 4
canonical_table_size_log2 = 6
deformation_levels = 2
deformation_base_res = 2
deformation_max_res = 3
deformation_table_size_log2 = 6
hidden_width = 8
geo_feature_dim = 4

[static]
iterations = {overrides.get("static_iters", 3)}
phases = [[{overrides.get("static_iters", 3)}, 6, 1]]
upsample_multiview = 6
upsample_2d = 6
samples_per_ray = 8
noise_start = [0.02, 0.98]
noise_end = [0.02, 0.98]

[dynamic]
iterations = {overrides.get("dynamic_iters", 3)}
render_size = [6, 6]
upsample_size = [6, 6]
n_frames = 3
window_length = [1.0, 1.0]
level_initial = 1
level_step_every = 2
lambda_tv = 0.1
samples_per_ray = 8

[guidance]
provider_2d = "echo"
provider_multiview = "echo"
provider_video = "echo"
"""
    path = tmp_path / "toy.toml"
    path.write_text(text)
    return path


class TestInitConfig:
    def test_writes_parseable_presets(self, tmp_path, capsys):
        for preset in ("text4d", "image4d", "toy"):
            path = tmp_path / f"{preset}.toml"
            assert main(["init-config", str(path), "--preset", preset]) == EXIT_OK
            config = load_config(path)
            assert config is not None

    def test_toy_preset_contents(self, tmp_path):
        path = tmp_path / "toy.toml"
        main(["init-config", str(path), "--preset", "toy"])
        config = load_config(path)
        assert config.providers.provider_video == "echo"
        assert config.dynamic.render_size == (32, 32)
        assert config.dynamic.n_frames == 8

    def test_text4d_preset_weights(self, tmp_path):
        path = tmp_path / "t.toml"
        main(["init-config", str(path)])
        text = path.read_text()
        assert "lambda_2d = 1.0" in text
        assert "1.2" in text  # documented variant
        config = parse_toml(text)
        assert config.static.weights.lambda_3d == 1.0

    def test_existing_file_needs_force(self, tmp_path, capsys):
        path = tmp_path / "x.toml"
        path.write_text("existing")
        assert main(["init-config", str(path)]) == EXIT_USAGE
        assert main(["init-config", str(path), "--force"]) == EXIT_OK

    def test_invalid_preset_is_usage_error(self, tmp_path, capsys):
        rc = main(["init-config", str(tmp_path / "y.toml"), "--preset", "bogus"])
        assert rc == 2


class TestProviders:
    def test_echo(self):
        p = build_provider("echo")
        assert p.provider_id == "echo"

    def test_gray(self):
        p = build_provider("gray:0.3:0.5", resolution=(8, 8))
        assert p.blend == 0.5
        assert p.mean_image.shape == (8, 8, 3)

    def test_unknown_spec(self):
        with pytest.raises(ConfigError):
            build_provider("mystery:thing")


class TestTrainCommands:
    def test_static_then_dynamic_then_render(self, tmp_path, capsys):
        cfg = write_toy_config(tmp_path)
        out = tmp_path / "run"
        rc = main([
            "train-static", "--config", str(cfg), "--out", str(out),
            "--metrics", str(tmp_path / "m.jsonl"),
        ])
        assert rc == EXIT_OK
        assert (out / "static.ckpt").exists()
        rows = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert len(rows) == 3

        rc = main([
            "train-dynamic", "--config", str(cfg),
            "--checkpoint", str(out / "static.ckpt"), "--out", str(out),
        ])
        assert rc == EXIT_OK
        assert (out / "dynamic.ckpt").exists()

        render_out = tmp_path / "frames"
        rc = main([
            "render", "--config", str(cfg), "--checkpoint", str(out / "dynamic.ckpt"),
            "--out", str(render_out), "--channels", "rgb,opacity,displacement",
            "--width", "8", "--height", "8", "--samples", "8",
            "--frames", "2",
        ])
        assert rc == EXIT_OK
        assert (render_out / "rgb_0000.png").exists()
        assert (render_out / "opacity_0001.png").exists()
        disp = read_displacement_raw(render_out / "displacement.d4dd")
        assert disp.shape == (2, 8, 8, 3)

    def test_static_checkpoint_time_sweep_is_constant(self, tmp_path, capsys):
        cfg = write_toy_config(tmp_path)
        out = tmp_path / "run"
        main(["train-static", "--config", str(cfg), "--out", str(out)])
        render_out = tmp_path / "sweep"
        rc = main([
            "render", "--config", str(cfg), "--checkpoint", str(out / "static.ckpt"),
            "--out", str(render_out), "--width", "8", "--height", "8",
            "--samples", "8", "--frames", "3",
        ])
        assert rc == EXIT_OK
        imgs = [read_png(render_out / f"rgb_{k:04d}.png") for k in range(3)]
        assert np.array_equal(imgs[0], imgs[1]) and np.array_equal(imgs[1], imgs[2])

    def test_turntable_matches_four_view_cameras(self, tmp_path, capsys):
        cfg = write_toy_config(tmp_path)
        out = tmp_path / "run"
        main(["train-static", "--config", str(cfg), "--out", str(out)])
        render_out = tmp_path / "turn"
        rc = main([
            "render", "--config", str(cfg), "--checkpoint", str(out / "static.ckpt"),
            "--out", str(render_out), "--width", "8", "--height", "8",
            "--samples", "8", "--turntable", "4",
        ])
        assert rc == EXIT_OK
        from d4d.config import load_config as lc
        from d4d.fields import SceneModel
        from d4d.renderer import Camera, four_view_cameras, render_frame
        from d4d.trainer import load_checkpoint

        config = lc(cfg)
        model = SceneModel(config.model, seed=config.seed, dtype=config.np_dtype())
        load_checkpoint(out / "static.ckpt", model)
        model.deformation_enabled = False
        base = Camera(0.0, 15.0, 1.8, 50.0, resolution=(8, 8))
        for k, cam in enumerate(four_view_cameras(base)):
            expected = render_frame(model, cam, 0.0, 8, jitter=0.5).rgb
            got = read_png(render_out / f"rgb_{k:04d}.png")
            expected8 = (np.clip(expected, 0, 1) * 255 + 0.5).astype(np.uint8)
            assert np.array_equal(got, expected8)

    def test_unknown_channel_usage_error(self, tmp_path, capsys):
        cfg = write_toy_config(tmp_path)
        out = tmp_path / "run"
        main(["train-static", "--config", str(cfg), "--out", str(out)])
        rc = main([
            "render", "--config", str(cfg), "--checkpoint", str(out / "static.ckpt"),
            "--out", str(tmp_path / "z"), "--channels", "normals",
        ])
        assert rc == EXIT_USAGE

    def test_missing_checkpoint_io_error(self, tmp_path, capsys):
        cfg = write_toy_config(tmp_path)
        rc = main([
            "render", "--config", str(cfg), "--checkpoint", str(tmp_path / "none.ckpt"),
            "--out", str(tmp_path / "z"),
        ])
        assert rc == EXIT_IO

    def test_hash_mismatch_io_error_unless_forced(self, tmp_path, capsys):
        cfg = write_toy_config(tmp_path)
        out = tmp_path / "run"
        main(["train-static", "--config", str(cfg), "--out", str(out)])
        cfg2 = write_toy_config(tmp_path, static_iters=4)
        rc = main([
            "render", "--config", str(cfg2), "--checkpoint", str(out / "static.ckpt"),
            "--out", str(tmp_path / "z"), "--width", "4", "--height", "4", "--samples", "4",
        ])
        assert rc == EXIT_IO
        rc = main([
            "render", "--config", str(cfg2), "--checkpoint", str(out / "static.ckpt"),
            "--out", str(tmp_path / "z"), "--width", "4", "--height", "4", "--samples", "4",
            "--force",
        ])
        assert rc == EXIT_OK


class TestVerifyCommand:
    def test_grids_suite_passes(self, capsys):
        assert main(["verify", "--suite", "grids"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "[PASS]" in out and "[FAIL]" not in out

    def test_losses_suite_passes(self, capsys):
        assert main(["verify", "--suite", "losses"]) == EXIT_OK

    def test_unknown_suite_usage_error(self, capsys):
        assert main(["verify", "--suite", "nonsense"]) == EXIT_USAGE

    def test_seed_flag_accepted(self, tmp_path, capsys):
        path = tmp_path / "c.toml"
        assert main(["init-config", str(path), "--seed", "42"]) == EXIT_OK
        assert load_config(path).seed == 42


class TestInfoCommand:
    def test_reports_version_and_checkpoint(self, tmp_path, capsys):
        cfg = write_toy_config(tmp_path)
        out = tmp_path / "run"
        main(["train-static", "--config", str(cfg), "--out", str(out)])
        rc = main([
            "info", "--config", str(cfg), "--checkpoint", str(out / "static.ckpt")
        ])
        assert rc == EXIT_OK
        text = capsys.readouterr().out
        assert "d4d engine" in text
        assert "stage=static" in text


class TestProviderExitCode:
    def test_unreachable_remote_is_exit_4(self, tmp_path, capsys):
        cfg_text = write_toy_config(tmp_path).read_text().replace(
            'provider_2d = "echo"', 'provider_2d = "remote:http://127.0.0.1:9"'
        )
        path = tmp_path / "remote.toml"
        path.write_text(cfg_text)
        rc = main(["train-static", "--config", str(path), "--out", str(tmp_path / "o")])
        assert rc == 4
