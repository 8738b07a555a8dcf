"""Config parsing, gradient files, and the four subcommands."""

import json
import os
import struct
import subprocess
import sys

import numpy as np
import numpy.testing as npt
import pytest

from conftest import smooth_image
from gradleak import cli, imaging, net
from gradleak.cli import ConfigError


def write_tiny_model(tmp_path, head="sigmoid", name="model.cfg"):
    path = tmp_path / name
    path.write_text("input=3x8x8\n"
                    "conv k=3 ch=3 s=1 act=tanh\n"
                    f"conv k=3 ch=2 s=2 act={head}\n"
                    "fc out=10\n"
                    "seed=1\n")
    return path


def write_probe_image(tmp_path, seed=7, name="probe.ppm"):
    path = tmp_path / name
    imaging.save_image(path, smooth_image(seed, shape=(3, 8, 8)))
    return path


def write_experiment(tmp_path, lines, name="run.cfg"):
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def tiny_setup(tmp_path):
    """Model config, probe image, and experiment config wired together."""
    write_tiny_model(tmp_path)
    write_probe_image(tmp_path)
    cfg = write_experiment(tmp_path, ["model=model.cfg", "image=probe.ppm",
                                      "label=4", "out=out"])
    return tmp_path, cfg


class TestConfigParsing:
    def test_keys_types_and_echo(self, tmp_path):
        text = ("# comment\n"
                "model=m.cfg\n"
                "dataset=data.bin\n"
                "image_index=3\n"
                "seed=9\n"
                "tv_weight=0.2   # trailing comment\n"
                "max_iters=100\n"
                "tol=1e-8\n"
                "flip_pullback_branch=true\n")
        cfg = cli.parse_experiment_config(text, base_dir="/base")
        assert cfg.model == os.path.normpath("/base/m.cfg")
        assert cfg.dataset == os.path.normpath("/base/data.bin")
        assert cfg.image_index == 3 and cfg.seed == 9
        assert cfg.tv_weight == 0.2 and cfg.max_iters == 100
        assert cfg.flip_pullback_branch is True
        assert cfg.raw["tv_weight"] == "0.2"
        opts = cfg.solver_options()
        assert opts.max_iters == 100 and opts.flip_pullback_branch

    @pytest.mark.parametrize("value,expected", [
        ("true", True), ("1", True), ("on", True), ("yes", True),
        ("false", False), ("0", False), ("off", False), ("no", False),
    ])
    def test_bool_spellings(self, value, expected):
        cfg = cli.parse_experiment_config(f"flip_pullback_branch={value}\n")
        assert cfg.flip_pullback_branch is expected

    @pytest.mark.parametrize("text,needle", [
        ("model=m\nwhatever=1\n", "line 2"),
        ("just a line\n", "key=value"),
        ("seed=abc\n", "bad value"),
        ("tv_weight=-1\n", "tv_weight"),
        ("max_iters=0\n", "solver"),
        ("flip_pullback_branch=maybe\n", "boolean"),
    ])
    def test_rejects_malformed(self, text, needle):
        with pytest.raises(ConfigError, match=needle):
            cli.parse_experiment_config(text)

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            cli.load_experiment_config(tmp_path / "nope.cfg")


class TestGradientFile:
    def make_capture(self, tmp_path, label=4):
        model = net.load_model_config(write_tiny_model(tmp_path))
        weights = net.init_weights(model.spec, 1)
        image = smooth_image(7, shape=(3, 8, 8))
        _, capture, _ = net.loss_and_gradients(model.spec, weights, image,
                                               label)
        return capture

    def test_round_trip_bit_exact(self, tmp_path):
        capture = self.make_capture(tmp_path)
        path = tmp_path / "g.glk"
        cli.write_gradient_file(path, capture)
        back = cli.read_gradient_file(path)
        assert back.label == capture.label == 4
        for a, b in zip(back.kernels, capture.kernels):
            npt.assert_array_equal(a, b)
        npt.assert_array_equal(back.fc_weight, capture.fc_weight)
        npt.assert_array_equal(back.fc_bias, capture.fc_bias)

    def test_binary_layout(self, tmp_path):
        capture = self.make_capture(tmp_path)
        path = tmp_path / "g.glk"
        cli.write_gradient_file(path, capture)
        raw = path.read_bytes()
        assert raw[:4] == b"GLK1"
        count, label = struct.unpack("<Ii", raw[4:12])
        assert count == 4 and label == 4       # 2 conv blocks + fc W + fc b
        ndim, = struct.unpack("<I", raw[12:16])
        assert ndim == 4
        dims = struct.unpack("<4I", raw[16:32])
        assert dims == capture.kernels[0].shape == (3, 3, 3, 3)
        first = np.frombuffer(raw[32:32 + 81 * 8], dtype="<f8")
        npt.assert_array_equal(first.reshape(3, 3, 3, 3), capture.kernels[0])

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "g.glk"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(ConfigError, match="magic|gradient"):
            cli.read_gradient_file(path)

    def test_rejects_truncation(self, tmp_path):
        capture = self.make_capture(tmp_path)
        path = tmp_path / "g.glk"
        cli.write_gradient_file(path, capture)
        (tmp_path / "cut.glk").write_bytes(path.read_bytes()[:50])
        with pytest.raises(ConfigError, match="truncated|gradient"):
            cli.read_gradient_file(tmp_path / "cut.glk")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            cli.read_gradient_file(tmp_path / "absent.glk")


class TestCmdGradients:
    def test_writes_deterministic_file(self, tiny_setup):
        tmp_path, cfg = tiny_setup
        assert cli.main(["gradients", "--config", str(cfg)]) == 0
        assert cli.main(["gradients", "--config", str(cfg),
                         "--out", str(tmp_path / "out2")]) == 0
        a = (tmp_path / "out" / "gradients.glk").read_bytes()
        b = (tmp_path / "out2" / "gradients.glk").read_bytes()
        assert a == b

    def test_seed_override_changes_gradients(self, tiny_setup):
        tmp_path, cfg = tiny_setup
        cli.main(["gradients", "--config", str(cfg)])
        cli.main(["gradients", "--config", str(cfg), "--seed", "2",
                  "--out", str(tmp_path / "seeded")])
        assert ((tmp_path / "out" / "gradients.glk").read_bytes()
                != (tmp_path / "seeded" / "gradients.glk").read_bytes())

    def test_missing_image_exits_1(self, tmp_path):
        write_tiny_model(tmp_path)
        cfg = write_experiment(tmp_path, ["model=model.cfg",
                                          "image=gone.ppm", "label=1"])
        assert cli.main(["gradients", "--config", str(cfg)]) == 1

    def test_ppm_without_label_exits_1(self, tmp_path, capsys):
        write_tiny_model(tmp_path)
        write_probe_image(tmp_path)
        cfg = write_experiment(tmp_path, ["model=model.cfg",
                                          "image=probe.ppm"])
        assert cli.main(["gradients", "--config", str(cfg)]) == 1
        assert "label" in capsys.readouterr().err

    def test_shape_mismatch_exits_1(self, tmp_path, batch_file):
        batch_path, _, _ = batch_file
        write_tiny_model(tmp_path)
        cfg = write_experiment(tmp_path, ["model=model.cfg",
                                          f"dataset={batch_path}"])
        assert cli.main(["gradients", "--config", str(cfg)]) == 1


class TestCmdAttack:
    def run_gradients(self, cfg, out):
        assert cli.main(["gradients", "--config", str(cfg),
                         "--out", str(out)]) == 0
        return out / "gradients.glk"

    def test_full_pipeline_with_override(self, tiny_setup):
        tmp_path, cfg = tiny_setup
        glk = self.run_gradients(cfg, tmp_path / "out")
        assert cli.main(["attack", "--config", str(cfg), "--grads", str(glk),
                         "--out", str(tmp_path / "att")]) == 0
        out = tmp_path / "att"
        assert (out / "reconstruction_raw.ppm").exists()
        assert (out / "reconstruction_denoised.ppm").exists()
        report = json.loads((out / "report.json").read_text())
        assert report["label"] == {"value": 4, "source": "override"}
        assert set(report) >= {"config", "seed", "image", "label", "fc",
                               "layers", "metric", "quality", "timings"}
        assert len(report["layers"]) == 2
        assert report["quality"]["raw"]["mse"] >= 0.0
        assert report["metric"]["total"] <= 0.0
        raw = imaging.load_image(out / "reconstruction_raw.ppm")
        assert raw.shape == (3, 8, 8)

    def test_label_inferred_with_sigmoid_head(self, tmp_path):
        write_tiny_model(tmp_path)
        write_probe_image(tmp_path)
        gen_cfg = write_experiment(tmp_path, ["model=model.cfg",
                                              "image=probe.ppm", "label=6",
                                              "out=out"], name="gen.cfg")
        glk = self.run_gradients(gen_cfg, tmp_path / "out")
        # attack config carries no label; the sigmoid head lets the
        # attacker read it off the gradient signs
        att_cfg = write_experiment(tmp_path, ["model=model.cfg",
                                              "image=probe.ppm",
                                              "out=att"], name="att.cfg")
        assert cli.main(["attack", "--config", str(att_cfg),
                         "--grads", str(glk)]) == 0
        report = json.loads((tmp_path / "att" / "report.json").read_text())
        assert report["label"] == {"value": 6, "source": "inferred"}

    def test_label_from_file_with_tanh_head(self, tmp_path):
        model = net.load_model_config(write_tiny_model(tmp_path,
                                                       head="tanh"))
        weights = net.init_weights(model.spec, 1)
        image = smooth_image(7, shape=(3, 8, 8))
        _, capture, _ = net.loss_and_gradients(model.spec, weights, image, 2)
        cfg = cli.parse_experiment_config("tv_weight=0.1\n")
        report = cli.run_attack_pipeline(cfg, model.spec, weights, capture,
                                         image, "probe", 1, str(tmp_path))
        assert report["label"] == {"value": 2, "source": "file"}

    def test_mismatched_gradients_exit_1(self, tiny_setup, capsys):
        tmp_path, cfg = tiny_setup
        glk = self.run_gradients(cfg, tmp_path / "out")
        write_tiny_model(tmp_path, name="other.cfg")
        (tmp_path / "other.cfg").write_text(
            "input=3x8x8\nconv k=3 ch=5 s=1 act=tanh\n"
            "conv k=3 ch=2 s=2 act=sigmoid\nfc out=10\nseed=1\n")
        other = write_experiment(tmp_path, ["model=other.cfg",
                                            "image=probe.ppm", "label=4"],
                                 name="other_run.cfg")
        assert cli.main(["attack", "--config", str(other),
                         "--grads", str(glk)]) == 1
        assert "does not match" in capsys.readouterr().err

    def test_degenerate_gradients_exit_2(self, tiny_setup, capsys):
        tmp_path, cfg = tiny_setup
        glk = self.run_gradients(cfg, tmp_path / "out")
        capture = cli.read_gradient_file(glk)
        dead = net.GradientCapture(
            kernels=capture.kernels,
            fc_weight=np.zeros_like(capture.fc_weight),
            fc_bias=np.zeros_like(capture.fc_bias), label=capture.label)
        cli.write_gradient_file(glk, dead)
        assert cli.main(["attack", "--config", str(cfg),
                         "--grads", str(glk)]) == 2
        assert "numerical failure" in capsys.readouterr().err


class TestCmdMetric:
    def test_probe_mode(self, tiny_setup):
        tmp_path, cfg = tiny_setup
        assert cli.main(["metric", "--config", str(cfg)]) == 0
        data = json.loads((tmp_path / "out" / "metric.json").read_text())
        assert data["mode"] == "probe"
        assert data["probe"]["label"] == 4
        assert data["total"] == sum(l["contribution"] for l in data["layers"])

    def test_upper_bound_mode_needs_no_image(self, tmp_path):
        model = tmp_path / "v1.cfg"
        model.write_text("conv k=3 ch=6 s=1 act=tanh\n"
                         "conv k=4 ch=3 s=2 act=tanh\n"
                         "fc out=10\n")
        cfg = write_experiment(tmp_path, ["model=v1.cfg", "out=out"])
        assert cli.main(["metric", "--config", str(cfg),
                         "--upper-bound"]) == 0
        data = json.loads((tmp_path / "out" / "metric.json").read_text())
        assert data["mode"] == "upper-bound"
        assert data["total"] == -2262.0


class TestMainErrors:
    def test_unknown_subcommand_exits_1(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["demolish", "--config", "x"])
        assert err.value.code == 1

    def test_missing_required_flag_exits_1(self):
        with pytest.raises(SystemExit) as err:
            cli.main(["attack", "--config", "x"])   # no --grads
        assert err.value.code == 1

    def test_bad_variants_exit_1(self, tiny_setup, capsys):
        _, cfg = tiny_setup
        assert cli.main(["suite", "--config", str(cfg),
                         "--variants", "1,5"]) == 1
        assert "1..4" in capsys.readouterr().err
        assert cli.main(["suite", "--config", str(cfg),
                         "--variants", "one"]) == 1

    def test_bad_threads_exit_1(self, tiny_setup):
        _, cfg = tiny_setup
        assert cli.main(["suite", "--config", str(cfg), "--threads", "0"]) == 1

    def test_suite_rejects_small_images(self, tiny_setup, capsys):
        _, cfg = tiny_setup
        assert cli.main(["suite", "--config", str(cfg)]) == 1
        assert "3x32x32" in capsys.readouterr().err


class TestLogging:
    def test_env_var_enables_info_logging(self, tiny_setup):
        tmp_path, cfg = tiny_setup
        env = dict(os.environ, GRADLEAK_LOG="info")
        proc = subprocess.run(
            [sys.executable, "-m", "gradleak.cli", "gradients",
             "--config", str(cfg)],
            capture_output=True, text=True, env=env, cwd=str(tmp_path))
        assert proc.returncode == 0
        assert "INFO gradleak" in proc.stderr
