import json
import shutil

import numpy as np
import pytest
from PIL import Image

import mitoseg.cli as cli
from mitoseg.data_pipeline import load_stack, make_synthetic_fixture, save_stack
from mitoseg.metrics import REPORT_KEYS, evaluate
from mitoseg.runconfig import RunConfig, load_config
from mitoseg.unet_model import ConfigError, PredictionVolume, UNetConfig, build, load, predict_volume, save

TINY = ["--set", "filters=2,4,8,16,32", "--set", "input_size=64", "--set", "batch_size=2", "--set", "lr=1e-3"]


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("fx")
    save_stack(root, make_synthetic_fixture(4, (80, 96), blobs=3, seed=1))
    return root


@pytest.fixture(scope="module")
def trained(fixture_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--data", str(fixture_dir), "--out", str(out), *TINY, "--set", "steps=4"]) == 0
    return out


class TestRunConfig:
    def test_file_and_overrides(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\nsteps = 10\nlr = 0.01  # inline\nfilters = 4,8,16,32,64\n")
        cfg = load_config(p, ["steps=20"])
        assert (cfg.steps, cfg.lr, cfg.filters) == (20, 0.01, (4, 8, 16, 32, 64))

    def test_unknown_key_named(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("steps = 1\nlearning_rate = 3\n")
        with pytest.raises(ConfigError, match="learning_rate"):
            load_config(p)

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="steps"):
            load_config(None, ["steps=many"])

    @pytest.mark.parametrize("kv", ["filters=16,32,64,128,250", "batch_size=0", "min_coverage=0", "dropout=1"])
    def test_invalid_values_rejected(self, kv):
        with pytest.raises(ConfigError):
            load_config(None, [kv])

    def test_text_round_trip(self, tmp_path):
        cfg = load_config(None, ["steps=7", "lr=0.003", "filters=2,4,8,16,32"])
        p = tmp_path / "c.cfg"
        p.write_text(cfg.to_text())
        assert load_config(p) == cfg

    def test_defaults(self):
        cfg = RunConfig()
        assert cfg.model_config() == UNetConfig()
        assert (cfg.batch_size, cfg.steps, cfg.lr) == (4, 100_000, 1e-4)


class TestErrors:
    def test_usage_is_one_line(self, capsys):
        code, _, err = run(capsys, "frobnicate")
        assert code == 2 and err.count("\n") == 1 and err.startswith("mitoseg: error[usage]:")

    def test_bad_config_key(self, capsys, fixture_dir, tmp_path):
        code, _, err = run(capsys, "train", "--data", fixture_dir, "--out", tmp_path, "--set", "widht=3")
        assert code == 3 and "error[config]" in err and "widht" in err

    def test_missing_masks(self, capsys, tmp_path):
        st = make_synthetic_fixture(2, (32, 32), seed=0)
        save_stack(tmp_path / "d", type(st)(st.images))
        code, _, err = run(capsys, "train", "--data", tmp_path / "d", "--out", tmp_path / "o", *TINY)
        assert code == 4 and "error[data]" in err

    def test_checkpoint_version_mismatch(self, capsys, fixture_dir, tmp_path):
        path = save(tmp_path / "m.msg", build(UNetConfig(filters=(2, 4, 8, 16, 32), input_size=64)))
        path.write_bytes(path.read_bytes().replace(b'"format_version": 1', b'"format_version": 2'))
        code, _, err = run(capsys, "predict", path, "--data", fixture_dir, "--out", tmp_path / "p")
        assert code == 5 and "error[checkpoint]" in err and "version 2" in err


class TestTrain:
    def test_outputs(self, trained):
        names = sorted(p.name for p in trained.iterdir())
        assert names == ["config.txt", "final.msg", "loss.log"]
        assert len((trained / "loss.log").read_text().splitlines()) == 4
        assert load(trained / "final.msg").config.filters == (2, 4, 8, 16, 32)

    def test_rerun_byte_identical_log(self, trained, fixture_dir, tmp_path):
        assert cli.main(["train", "--data", str(fixture_dir), "--out", str(tmp_path), *TINY, "--set", "steps=4"]) == 0
        assert (tmp_path / "loss.log").read_bytes() == (trained / "loss.log").read_bytes()

    def test_resume_continues_exactly(self, fixture_dir, tmp_path):
        straight, half, resumed = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        assert cli.main(["train", "--data", str(fixture_dir), "--out", str(straight), *TINY, "--set", "steps=6"]) == 0
        assert cli.main(["train", "--data", str(fixture_dir), "--out", str(half), *TINY, "--set", "steps=3"]) == 0
        assert cli.main(["train", "--data", str(fixture_dir), "--out", str(resumed), *TINY, "--set", "steps=6",
                         "--resume", str(half / "final.msg")]) == 0
        assert (resumed / "loss.log").read_bytes() == (straight / "loss.log").read_bytes()


class TestPredict:
    def test_mask_files_mirror_inputs(self, capsys, trained, fixture_dir, tmp_path):
        code, _, _ = run(capsys, "predict", trained / "final.msg", "--data", fixture_dir, "--out", tmp_path)
        assert code == 0
        inputs = sorted(p.name for p in (fixture_dir / "images").iterdir())
        assert sorted(p.name for p in (tmp_path / "masks").iterdir()) == inputs
        assert sorted(p.name for p in (tmp_path / "probs").iterdir()) == inputs
        mask = np.asarray(Image.open(tmp_path / "masks" / inputs[0]))
        assert set(np.unique(mask)) <= {0, 255}

    def test_zfilter_depth_one_is_identity(self, capsys, trained, fixture_dir, tmp_path):
        run(capsys, "predict", trained / "final.msg", "--data", fixture_dir, "--out", tmp_path / "a")
        run(capsys, "predict", trained / "final.msg", "--data", fixture_dir, "--out", tmp_path / "b",
            "--zfilter-depth", 1)
        for sub in ("masks", "probs"):
            for f in (tmp_path / "a" / sub).iterdir():
                assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()

    @pytest.mark.parametrize("mode", ["binary", "prob"])
    def test_spurious_slice_removed(self, capsys, trained, tmp_path, monkeypatch, mode):
        root = tmp_path / "stack"
        save_stack(root, make_synthetic_fixture(10, (40, 40), blobs=0, seed=0))
        probs = np.zeros((10, 40, 40), np.float32)
        probs[2:7, 5:15, 5:15] = 0.9  # persists over five slices
        probs[8, 25:35, 25:35] = 0.9  # one slice only
        monkeypatch.setattr(cli, "predict_volume", lambda *a, **k: PredictionVolume(probs.copy()))
        code, _, _ = run(capsys, "predict", trained / "final.msg", "--data", root, "--out", tmp_path / "p",
                         "--zfilter-depth", 3, "--zfilter-mode", mode)
        assert code == 0
        masks = np.stack([np.asarray(Image.open(f)) for f in sorted((tmp_path / "p" / "masks").iterdir())]) // 255
        assert masks[8].sum() == 0
        assert np.array_equal(masks[:8], (probs[:8] >= 0.5).astype(np.uint8))

    def test_float32_exact(self, capsys, trained, fixture_dir, tmp_path):
        run(capsys, "predict", trained / "final.msg", "--data", fixture_dir, "--out", tmp_path, "--float32")
        model, stack = load(trained / "final.msg"), load_stack(fixture_dir)
        probs = predict_volume(model, stack).probs
        stored = np.stack([np.asarray(Image.open(f)) for f in sorted((tmp_path / "probs_f32").iterdir())])
        assert stored.dtype == np.float32 and np.array_equal(stored, probs)


class TestEval:
    def test_perfect(self, capsys, fixture_dir, tmp_path):
        shutil.copytree(fixture_dir / "masks", tmp_path / "masks")
        code, out, _ = run(capsys, "eval", "--pred", tmp_path, "--gt", fixture_dir)
        assert code == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert tuple(rep) == REPORT_KEYS
        for k in ("accuracy", "precision", "recall", "fg_iou", "bg_iou", "overall_iou"):
            assert rep[k] == 1.0
        assert rep["pr_auc"] is None and "pr_auc=undefined" in out

    def test_shape_mismatch_prints_both(self, capsys, fixture_dir, tmp_path):
        (tmp_path / "masks").mkdir()
        for f in (fixture_dir / "masks").iterdir():
            Image.fromarray(np.zeros((10, 10), np.uint8)).save(tmp_path / "masks" / f.name)
        code, _, err = run(capsys, "eval", "--pred", tmp_path, "--gt", fixture_dir)
        assert code != 0 and "(4, 10, 10)" in err and "(4, 80, 96)" in err

    @pytest.mark.parametrize("float32", [False, True])
    def test_round_trip_matches_in_process(self, capsys, trained, fixture_dir, tmp_path, float32):
        extra = ["--float32"] if float32 else []
        run(capsys, "predict", trained / "final.msg", "--data", fixture_dir, "--out", tmp_path, *extra)
        run(capsys, "eval", "--pred", tmp_path, "--gt", fixture_dir)
        disk = json.loads((tmp_path / "report.json").read_text())
        stack = load_stack(fixture_dir)
        pv = predict_volume(load(trained / "final.msg"), stack)
        mem = evaluate(pv.threshold(0.5), stack.labels, pv.probs, 0.5).to_dict()
        keys = REPORT_KEYS if float32 else [k for k in REPORT_KEYS if k != "pr_auc"]
        for k in keys:
            assert disk[k] == pytest.approx(mem[k], abs=1e-6), k


class TestBench:
    @pytest.mark.parametrize("flags", [["--runs", 2], ["--warmup", 0]])
    def test_rejects_bad_plan(self, capsys, flags):
        code, _, err = run(capsys, "bench", *flags)
        assert code == 2 and "error[usage]" in err

    def test_report(self, capsys, trained, tmp_path):
        code, out, _ = run(capsys, "bench", "--checkpoint", trained / "final.msg", "--slices", 3, "--size", "100x70",
                           "--out", tmp_path / "bench")
        assert code == 0
        rep = json.loads((tmp_path / "bench.json").read_text())
        assert rep["pixels"] == 3 * 70 * 100 and rep["runs"] == 3 and rep["warmup"] == 1
        assert rep["throughput_mps"] == pytest.approx(rep["pixels"] / rep["stack_seconds_mean"] / 1e6, rel=1e-3)
        assert "real-time reference 11 MP/s" in out


class TestInspect:
    def test_default_encoder_line(self, capsys, tmp_path):
        save(tmp_path / "d.msg", build())
        code, out, _ = run(capsys, "inspect", tmp_path / "d.msg")
        assert code == 0 and "encoder_params=1178480" in out.splitlines()

    def test_all_positive_bias_full_utilization(self, capsys, fixture_dir, tmp_path):
        m = build(UNetConfig(filters=(2, 4, 8, 16, 32), input_size=64))
        for conv in m.conv_layers():
            conv.weight.data[:] = 0
            conv.bias.data[:] = 1
        save(tmp_path / "m.msg", m)
        code, out, _ = run(capsys, "inspect", tmp_path / "m.msg", "--probe", fixture_dir, "--json", tmp_path / "i.json")
        assert code == 0 and "utilization=100.0%" in out
        assert json.loads((tmp_path / "i.json").read_text())["utilization"] == 1.0

    def test_trained_utilization_formatted(self, capsys, trained, fixture_dir):
        code, out, _ = run(capsys, "inspect", trained / "final.msg", "--probe", fixture_dir)
        line = next(l for l in out.splitlines() if l.startswith("utilization="))
        pct = float(line.split("=")[1].split("%")[0])
        assert 0 < pct <= 100 and line.split("=")[1].split("%")[0].count(".") == 1
        assert len(line.split("=")[1].split("%")[0].split(".")[1]) == 1


class TestSynth:
    def test_writes_k_slices(self, capsys, tmp_path):
        code, _, _ = run(capsys, "synth", "--out", tmp_path, "--slices", 5, "--size", "48x32", "--seed", 3)
        assert code == 0
        st = load_stack(tmp_path)
        assert st.shape == (5, 32, 48) and st.has_labels
