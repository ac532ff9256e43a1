import itertools
import json
from pathlib import Path

import numpy as np
import pytest

from helpers import toy_config
from lindit.blocks import build_model, load_checkpoint, read_manifest
from lindit.errors import ConfigError, DataError, DivergenceError
from lindit.harness import commands
from lindit.harness.artifacts import SCHEMAS, read_pgm, validate_csv, write_pgm
from lindit.harness.cli import main
from lindit.harness.commands import run
from lindit.harness.config import RunConfig, load_config
from lindit.harness.datasets import ToyDataset, bright_square_16, checkerboard2d, eight_gaussians2d
from lindit.harness.metrics import energy_distance
from lindit.harness.optim import Adam, grad_norm
from lindit.numerics import Tensor
from lindit.quant import load_quantized

ROOT = Path(__file__).resolve().parents[1]


def csv_rows(path):
    return validate_csv(path)


def validate_outputs(out: Path):
    """Every CSV with a registered schema parses against it."""
    seen = 0
    for p in out.rglob("*.csv"):
        if p.name in SCHEMAS:
            validate_csv(p)
            seen += 1
    assert (out / "run_config.json").exists()
    return seen


class TestConfig:
    def test_round_trip(self):
        cfg = RunConfig()
        assert RunConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_keys(self):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"optimiser": {}})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"optimizer": {"learning_rate": 1}})
        with pytest.raises(ConfigError):
            RunConfig.from_dict({"model": {"width": 7, "heads": 2}})

    def test_digest_ignores_output_dir(self):
        a = RunConfig.from_dict({"out": "a"})
        assert a.digest() == RunConfig.from_dict({"out": "b"}).digest()
        assert a.digest() != RunConfig.from_dict({"seed": 1}).digest()

    def test_shipped_configs_match_schema(self):
        jsonschema = pytest.importorskip("jsonschema")
        schema = json.loads((ROOT / "docs" / "run_config.schema.json").read_text())
        jsonschema.Draft202012Validator.check_schema(schema)
        jsonschema.validate(RunConfig().to_dict(), schema)
        for path in (ROOT / "configs").glob("*.json"):
            jsonschema.validate(json.loads(path.read_text()), schema)
            load_config(path)

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "none.json")


class TestDatasets:
    @pytest.mark.parametrize("name", ["checkerboard2d", "eight_gaussians2d", "bright_square_16"])
    def test_deterministic_stream(self, name):
        a, b = ToyDataset(name, seed=4), ToyDataset(name, seed=4)
        np.testing.assert_array_equal(a.sample(50), b.sample(50))
        np.testing.assert_array_equal(a.sample(7), b.sample(7))
        assert not np.array_equal(ToyDataset(name, seed=5).sample(50), ToyDataset(name, seed=4).sample(50))

    def test_checkerboard_cells(self):
        x = checkerboard2d(np.random.default_rng(0), 5000)
        cells = np.floor((x + 2.0) / 1.0).astype(int)
        assert np.all((cells >= 0) & (cells < 4))
        assert np.all(cells.sum(axis=1) % 2 == 0)

    def test_eight_gaussians_modes(self):
        x = eight_gaussians2d(np.random.default_rng(0), 8000)
        ang = np.arctan2(x[:, 1], x[:, 0])
        mode = np.rint(ang / (np.pi / 4)).astype(int) % 8
        assert np.all(np.bincount(mode, minlength=8) > 800)
        assert abs(np.linalg.norm(x, axis=1).mean() - 2.0) < 0.01

    def test_bright_square(self):
        imgs = bright_square_16(np.random.default_rng(0), 200)
        assert imgs.shape == (200, 1, 16, 16)
        assert set(np.unique(imgs)) <= {0.0, 1.0}
        for img in imgs[:, 0]:
            rows, cols = np.nonzero(img)
            h, w = np.ptp(rows) + 1, np.ptp(cols) + 1
            assert h == w and 3 <= h <= 8
            assert img[rows.min():rows.max() + 1, cols.min():cols.max() + 1].all()
            assert img.sum() == h * w

    def test_latent_round_trip(self):
        ds = ToyDataset("bright_square_16")
        x = ds.sample(3)
        assert ds.latents(3).min() >= -1
        np.testing.assert_array_equal(ds.from_latent(ds.to_latent(x)), x)

    def test_bad_params(self):
        with pytest.raises(ConfigError):
            ToyDataset("spirals")
        with pytest.raises(ConfigError):
            ToyDataset("eight_gaussians2d", {"radius": 1, "width": 2})


def energy_bruteforce(x, y):
    d = lambda a, b: float(np.linalg.norm(a - b))  # noqa: E731
    xy = np.mean([d(a, b) for a, b in itertools.product(x, y)])
    xx = np.mean([d(a, b) for i, a in enumerate(x) for j, b in enumerate(x) if i != j])
    yy = np.mean([d(a, b) for i, a in enumerate(y) for j, b in enumerate(y) if i != j])
    return 2 * xy - xx - yy


class TestEnergyDistance:
    def test_matches_bruteforce(self):
        rng = np.random.default_rng(0)
        x, y = rng.standard_normal((13, 3)), rng.standard_normal((9, 3)) + 0.5
        assert energy_distance(x, y) == pytest.approx(energy_bruteforce(x, y), rel=1e-12)

    def test_symmetric_and_signal(self):
        rng = np.random.default_rng(1)
        x, y = rng.standard_normal((400, 2)), rng.standard_normal((400, 2))
        assert energy_distance(x, y) == pytest.approx(energy_distance(y, x), rel=1e-12)
        assert abs(energy_distance(x, y)) < 0.02
        assert energy_distance(x, y + 1.0) > 0.3

    def test_one_dimensional_closed_form(self):
        # point masses at 0 and a: 2|a| - 0 - 0
        assert energy_distance(np.zeros((5, 1)), np.full((4, 1), 3.0)) == pytest.approx(6.0)

    def test_shape_errors(self):
        from lindit.errors import DimensionError
        with pytest.raises(DimensionError):
            energy_distance(np.zeros((3, 2)), np.zeros((3, 3)))
        with pytest.raises(DimensionError):
            energy_distance(np.zeros((1, 2)), np.zeros((3, 2)))


class TestAdam:
    def test_matches_torch(self):
        torch = pytest.importorskip("torch")
        rng = np.random.default_rng(0)
        w0 = rng.standard_normal((4, 3))
        p = Tensor(w0.copy(), requires_grad=True)
        tp = torch.tensor(w0.copy(), requires_grad=True)
        opt, topt = Adam([p], lr=1e-2), torch.optim.Adam([tp], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
        for k in range(25):
            g = rng.standard_normal((4, 3)) * (k + 1)
            p.grad = g.copy()
            tp.grad = torch.tensor(g.copy())
            opt.step()
            topt.step()
        np.testing.assert_allclose(p.data, tp.detach().numpy(), rtol=1e-12, atol=1e-14)

    def test_skips_missing_grads_and_bad_hparams(self):
        p = Tensor(np.ones(2), requires_grad=True)
        Adam([p]).step()
        np.testing.assert_array_equal(p.data, [1, 1])
        with pytest.raises(ConfigError):
            Adam([p], lr=0)
        p.grad = np.array([3.0, 4.0])
        assert grad_norm([p]) == 5.0


def small_train(out, seed=0, iters=5, **opt):
    return RunConfig.from_dict({"task": "train", "seed": seed, "out": str(out),
                                "optimizer": {"iters": iters, "batch": 32, "checkpoint_every": 2, **opt}})


class TestTrain:
    def test_zero_iterations_is_init(self, tmp_path):
        run(small_train(tmp_path, seed=3, iters=0))
        m, ref = load_checkpoint(tmp_path / "checkpoint"), build_model(small_train(tmp_path).model_config(),
                                                                          small_train(tmp_path).latent_geometry(), 3)
        for k in ref.params:
            np.testing.assert_array_equal(m.params[k].data, ref.params[k].data)
        assert csv_rows(tmp_path / "train_log.csv") == []

    def test_log_and_checkpoints(self, tmp_path):
        run(small_train(tmp_path, iters=5))
        rows = csv_rows(tmp_path / "train_log.csv")
        assert [int(r["iter"]) for r in rows] == [1, 2, 3, 4, 5]
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["iter_000002", "iter_000004"]
        man = read_manifest(tmp_path / "checkpoint")
        assert man["extra"]["iter"] == 5
        assert man["extra"]["run_config_hash"] == json.loads((tmp_path / "run_config.json").read_text())["config_hash"]

    def test_resumable_prefix(self, tmp_path):
        run(small_train(tmp_path / "a", iters=4))
        run(small_train(tmp_path / "b", iters=2))
        a = read_manifest(tmp_path / "a" / "checkpoints" / "iter_000002")
        assert (tmp_path / "a" / "checkpoints" / "iter_000002" / "tensors.bin").read_bytes() == \
            (tmp_path / "b" / "checkpoint" / "tensors.bin").read_bytes()
        assert a["extra"]["iter"] == 2

    def test_divergence_keeps_last_good(self, tmp_path, monkeypatch):
        real = commands.objective_loss

        def flaky(model, batch, sched, step=None):
            if step == 4:
                raise DivergenceError("non-finite training loss", step=step)
            return real(model, batch, sched, step)

        monkeypatch.setattr(commands, "objective_loss", flaky)
        with pytest.raises(DivergenceError, match="step 4"):
            run(small_train(tmp_path / "bad", iters=10))
        monkeypatch.setattr(commands, "objective_loss", real)
        run(small_train(tmp_path / "ok", iters=3))
        assert (tmp_path / "bad" / "checkpoint" / "tensors.bin").read_bytes() == \
            (tmp_path / "ok" / "checkpoint" / "tensors.bin").read_bytes()
        diag = json.loads((tmp_path / "bad" / "divergence.json").read_text())
        assert diag["iter"] == 4 and diag["last_good_iter"] == 3
        assert len(csv_rows(tmp_path / "bad" / "train_log.csv")) == 3

    def test_nan_loss_exit_code(self, tmp_path, monkeypatch):
        monkeypatch.setattr(commands, "grad_norm", lambda params: float("nan"))
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"optimizer": {"iters": 3, "batch": 8}}))
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 4
        assert read_manifest(tmp_path / "o" / "checkpoint")["extra"]["diverged_at"] == 1

    def test_geometry_must_fit_dataset(self, tmp_path):
        cfg = RunConfig.from_dict({"out": str(tmp_path), "dataset": {"name": "bright_square_16"}})
        with pytest.raises(ConfigError):
            run(cfg)

    def test_image_training_and_pgm(self, tmp_path):
        cfg = load_config(ROOT / "configs" / "train_bright_square.json")
        cfg = RunConfig.from_dict({**cfg.to_dict(), "out": str(tmp_path / "t"),
                                   "optimizer": {"iters": 3, "batch": 4, "checkpoint_every": 0},
                                   "sample": {"draws": 3, "eval_draws": 4, "max_images": 2},
                                   "schedule": {"objective": "fm", "steps": [2], "samplers": ["dpm"]}})
        run(cfg)
        scfg = RunConfig.from_dict({**cfg.to_dict(), "task": "sample", "out": str(tmp_path / "s")})
        run(scfg, checkpoint=tmp_path / "t" / "checkpoint")
        pgms = sorted((tmp_path / "s" / "images" / "dpm_2").glob("*.pgm"))
        assert len(pgms) == 2
        for p in pgms:
            img, maxval = read_pgm(p)
            assert img.shape == (16, 16) and maxval == 255
            assert p.read_text().startswith("P2\n16 16\n255\n")
        validate_outputs(tmp_path / "s")


class TestTrainedToy:
    def test_loss_decreases(self, trained_runs):
        rows = csv_rows(trained_runs.get("fm", 0) / "train_log.csv")
        loss = np.array([float(r["loss"]) for r in rows])
        assert len(loss) == 2000
        assert loss[-200:].mean() < loss[:200].mean()

    def test_more_steps_better(self, trained_runs, tmp_path):
        cfg = toy_config("fm", 0, tmp_path, task="sample", steps=(1, 50))
        rows = run(cfg, checkpoint=trained_runs.get("fm", 0) / "checkpoint")["rows"]
        ed = {r["steps"]: r["metric_value"] for r in rows}
        assert ed[50] < ed[1]
        assert len(np.loadtxt(tmp_path / "samples_dpm_50.csv", delimiter=",", skiprows=1)) == 2048
        validate_outputs(tmp_path)

    def test_quantize_trained(self, trained_runs, tmp_path):
        ckpt = trained_runs.get("fm", 0) / "checkpoint"
        res = run(RunConfig.from_dict({"task": "quantize", "out": str(tmp_path)}), checkpoint=ckpt)
        rows = csv_rows(tmp_path / "fidelity.csv")
        assert rows[-1]["layer"] == "end_to_end" and float(rows[-1]["cos_sim"]) >= 0.99
        meta = json.loads((tmp_path / "fidelity_meta.json").read_text())
        assert meta["source_checkpoint"]["config_hash"] == read_manifest(ckpt)["config_hash"]
        assert meta["source_checkpoint"]["run_config_hash"] == read_manifest(ckpt)["extra"]["run_config_hash"]
        # the stored int8 model reproduces the in-memory one bitwise
        q = load_quantized(tmp_path / "qcheckpoint")
        x = Tensor(np.random.default_rng(0).standard_normal((5, 2, 1, 1)).astype(np.float32))
        ctx = commands.null_context(q)
        np.testing.assert_array_equal(q(x, 0.3, ctx).data, res["qmodel"](x, 0.3, ctx).data)

    def test_exempt_all(self, trained_runs, tmp_path):
        from lindit.quant import KNOWN_ROLES
        cfg = RunConfig.from_dict({"task": "quantize", "out": str(tmp_path), "quant": {"exempt": sorted(KNOWN_ROLES)}})
        run(cfg, checkpoint=trained_runs.get("fm", 0) / "checkpoint")
        rows = csv_rows(tmp_path / "fidelity.csv")
        assert all(float(r["cos_sim"]) == 1.0 for r in rows)
        assert all(float(r["max_abs_err"]) == 0.0 for r in rows)


class TestSampleOracle:
    def test_gaussian_oracle_mean(self, tmp_path):
        cfg = RunConfig.from_dict({"task": "sample", "out": str(tmp_path),
                                   "sample": {"draws": 10_000, "oracle": {"kind": "gaussian"}}})
        rows = run(cfg)["rows"]
        m = {r["metric_name"]: r["metric_value"] for r in rows}
        assert abs(m["sample_mean"] - 2.0) <= 0.02 * 2.0
        assert 0.45 < m["sample_std"] < 0.56  # see the solver tests for the 5% spread check
        validate_outputs(tmp_path)

    def test_missing_checkpoint_is_usage_error(self, tmp_path):
        assert main(["sample", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "nope")]) == 2
        assert main(["quantize", "--out", str(tmp_path)]) == 2

    def test_corrupt_checkpoint_is_data_error(self, tmp_path):
        (tmp_path / "ck").mkdir()
        (tmp_path / "ck" / "manifest.json").write_text("{")
        assert main(["sample", "--out", str(tmp_path / "o"), "--checkpoint", str(tmp_path / "ck")]) == 3

    def test_unknown_sampler(self, tmp_path):
        cfg = RunConfig.from_dict({"task": "sample", "out": str(tmp_path),
                                   "schedule": {"samplers": ["heun"]}, "sample": {"oracle": {"kind": "gaussian"}}})
        with pytest.raises(ConfigError):
            run(cfg)


def write_records(path, *score_lists):
    with open(path, "w") as fh:
        for i, scores in enumerate(score_lists):
            caps = [{"text": f"caption {j}", "clip_score": s} for j, s in enumerate(scores)]
            fh.write(json.dumps({"image_id": f"img{i}", "captions": caps}) + "\n")
    return path


class TestCaptionDemo:
    def cfg(self, tmp_path, path, tau, draws):
        return RunConfig.from_dict({"task": "caption-demo", "out": str(tmp_path / "o"),
                                    "captions": {"path": str(path), "temperature": tau, "draws": draws}})

    def test_hand_softmax(self, tmp_path):
        p = write_records(tmp_path / "c.ndjson", [0.2, 0.4])
        rows = run(self.cfg(tmp_path, p, 0.1, 100_000))["rows"]
        assert [round(r["probability"], 4) for r in rows] == [0.1192, 0.8808]
        assert all(abs(r["frequency"] - r["probability"]) <= 0.01 for r in rows)
        assert rows[0]["max_abs_diff"] <= 0.01
        validate_outputs(tmp_path / "o")

    def test_high_temperature(self, tmp_path):
        p = write_records(tmp_path / "c.ndjson", [0.1, 0.3, 0.9], [5.0, -5.0])
        rows = run(self.cfg(tmp_path, p, 1e6, 100_000))["rows"]
        for r in rows:
            n = 3 if r["image_id"] == "img0" else 2
            assert abs(r["frequency"] - 1 / n) <= 0.01

    def test_zero_draws(self, tmp_path):
        p = write_records(tmp_path / "c.ndjson", [0.2, 0.4])
        run(self.cfg(tmp_path, p, 0.1, 0))
        rows = csv_rows(tmp_path / "o" / "freq_report.csv")
        assert all(r["frequency"] == "" and r["max_abs_diff"] == "" for r in rows)
        assert rows[0]["probability"] != ""

    def test_argmax_mode(self, tmp_path):
        p = write_records(tmp_path / "c.ndjson", [1, 3, 2])
        rows = run(self.cfg(tmp_path, p, 0.0, 1000))["rows"]
        assert [r["frequency"] for r in rows] == [0.0, 1.0, 0.0]

    def test_cli_flags_and_data_error(self, tmp_path):
        p = write_records(tmp_path / "c.ndjson", [0.2, 0.4])
        assert main(["caption-demo", "--captions", str(p), "--temperature", "0.1", "--draws", "100",
                     "--out", str(tmp_path / "o")]) == 0
        assert json.loads((tmp_path / "o" / "run_config.json").read_text())["config"]["captions"]["draws"] == 100
        bad = tmp_path / "bad.ndjson"
        bad.write_text('{"image_id": "x", "captions": [{"text": "t"}]}\n')
        assert main(["caption-demo", "--captions", str(bad), "--out", str(tmp_path / "b")]) == 3
        assert main(["caption-demo", "--out", str(tmp_path / "n")]) == 2


class TestBenchAttn:
    def test_rows_and_checks(self, tmp_path):
        cfg = RunConfig.from_dict({"task": "bench-attn", "out": str(tmp_path),
                                   "bench": {"Ns": [64, 128], "variants": ["streaming", "softmax"], "d": 16}})
        run(cfg)
        rows = csv_rows(tmp_path / "attn_bench.csv")
        assert len(rows) == 4
        assert {(r["variant"], r["N"]) for r in rows} == {(v, n) for v in ("streaming", "softmax") for n in ("64", "128")}
        checks = csv_rows(tmp_path / "attn_checks.csv")
        assert len(checks) == 2 and all(float(c["streaming_vs_naive"]) < 1e-4 for c in checks)

    def test_unknown_variant_exit_code(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"bench": {"variants": ["flash"]}}))
        assert main(["bench-attn", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


class TestCli:
    def test_usage_errors(self, tmp_path):
        assert main([]) == 2
        assert main(["frobnicate"]) == 2
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["train", "--config", str(bad)]) == 2

    def test_seed_and_out_override(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 1, "out": "elsewhere", "optimizer": {"iters": 1, "batch": 4}}))
        assert main(["train", "--config", str(cfg), "--seed", "7", "--out", str(tmp_path / "o")]) == 0
        saved = json.loads((tmp_path / "o" / "run_config.json").read_text())["config"]
        assert saved["seed"] == 7 and saved["task"] == "train"


class TestArtifacts:
    def test_pgm_round_trip(self, tmp_path):
        img = np.linspace(0, 1, 12).reshape(3, 4)
        write_pgm(tmp_path / "a.pgm", img)
        q, maxval = read_pgm(tmp_path / "a.pgm")
        assert q.shape == (3, 4) and maxval == 255 and q[0, 0] == 0 and q[-1, -1] == 255

    def test_pgm_rejects_bad_files(self, tmp_path):
        (tmp_path / "b.pgm").write_text("P5\n1 1\n255\n0\n")
        with pytest.raises(DataError):
            read_pgm(tmp_path / "b.pgm")
        (tmp_path / "c.pgm").write_text("P2\n2 2\n255\n0 1 2\n")
        with pytest.raises(DataError):
            read_pgm(tmp_path / "c.pgm")

    def test_schema_mismatch(self, tmp_path):
        (tmp_path / "train_log.csv").write_text("iter,loss\n1,2\n")
        with pytest.raises(DataError):
            validate_csv(tmp_path / "train_log.csv")
