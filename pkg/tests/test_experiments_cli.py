import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from onestep import cli, experiments
from onestep.config import parse_config
from onestep.datasets import generate_mixture, write_idx
from onestep.errors import IntractableLOO, NoFlags
from onestep.models import LOGISTIC, ModelSpec, TrainOptions

SMALL = """
[experiment]
name = {name}
seed = 1
[data]
num_classes = 3
feature_dim = 6
pool_size = 240
test_size = 200
anchor_source_size = 60
noise_rate = {noise}
[anchor]
size = 30
[scoring]
top_k_loo = 40
{extra}
[train]
grad_norm_tol = 1e-6
"""


def small_cfg(name, noise=0.3, extra=""):
    return parse_config(SMALL.format(name=name, noise=noise, extra=extra))


def write_ini(tmp_path, name, noise=0.3, extra=""):
    path = tmp_path / f"{name}.ini"
    path.write_text(SMALL.format(name=name, noise=noise, extra=extra))
    return path


def csv_files(out):
    return sorted(Path(out).glob("*.csv"))


def assert_hash_lines(out, cfg):
    files = csv_files(out)
    assert files
    for f in files:
        first, second = f.read_text().splitlines()[:2]
        assert first == f"# config_sha256={cfg.hash()}"
        assert "," in second and not second.startswith("#")


class TestBuildData:
    def test_disjoint_and_corrupted(self):
        data = experiments.build_data(small_cfg("pipeline"))
        ids = [set(x.sample_ids.tolist()) for x in (data.pool, data.anchor.data, data.test)]
        assert not (ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])
        assert data.pool.corrupted.sum() == 72
        assert not data.anchor.data.corrupted.any() and not data.test.corrupted.any()

    def test_idx(self, tmp_path):
        rng = np.random.default_rng(0)
        from onestep.datasets import LabeledDataset

        imgs = LabeledDataset(rng.integers(0, 256, (120, 784)) / 255.0, np.arange(120) % 10, np.arange(120), 10)
        write_idx(imgs, tmp_path / "img", tmp_path / "lab")
        cfg = parse_config(
            f"[data]\nsource = idx\nnum_classes = 10\nimages = {tmp_path / 'img'}\nlabels = {tmp_path / 'lab'}\n"
            "limit = 80\nanchor_source_size = 40\ntest_size = 10\nnoise_rate = 0\n[anchor]\nsize = 20\n"
        )
        data = experiments.build_data(cfg)
        assert data.pool.sample_ids.tolist() == list(range(80))
        assert data.pool.corrupted is None and data.anchor.data.n == 20 and data.test.n == 10


def test_proxy_checkpoint():
    cfg = small_cfg("checkpoint_ablation")
    data = experiments.build_data(cfg)
    spec = ModelSpec(LOGISTIC, 3, 6, 0.01)
    opts = TrainOptions(1e-6)
    theta0, used0, _ = experiments.proxy_checkpoint(spec, data.pool, opts, 0.0)
    assert used0 == 0 and not theta0.any()
    full, used, total = experiments.proxy_checkpoint(spec, data.pool, opts, 1.0)
    part, k, total2 = experiments.proxy_checkpoint(spec, data.pool, opts, 0.5)
    assert used == total == total2 and k == round(0.5 * total)


class TestPipeline:
    def test_outputs(self, tmp_path):
        cfg = small_cfg("pipeline")
        res = experiments.run_pipeline(cfg, tmp_path)
        names = {p.name for p in tmp_path.iterdir()}
        assert {"scores.csv", "pipeline.csv", "result.json", "accuracy.svg", "selection_p0.2.json", "selection_p1.json"} <= names
        assert_hash_lines(tmp_path, cfg)
        row = res.rows[-1]
        assert row["p"] == 1.0 and row["ost_accuracy"] == res.full_accuracy == row["random_accuracy"]
        assert row["ost_anchor_loss"] == res.full_anchor_loss
        for r in res.rows:
            assert 0 <= r["ost_accuracy"] <= 1 and 0 <= r["random_accuracy"] <= 1
        blob = json.loads((tmp_path / "result.json").read_text())
        assert "timings" not in json.dumps(blob) and set(res.timings) >= {"scoring", "target_training"}

    def test_workers_independent(self, tmp_path):
        cfg = small_cfg("pipeline", extra="mode = both\nkey = delta")
        experiments.run_pipeline(cfg, tmp_path / "a", workers=1)
        experiments.run_pipeline(cfg, tmp_path / "b", workers=3)
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


class TestTriptych:
    def test_outputs(self, tmp_path):
        cfg = small_cfg("triptych", extra="[target]\nloss_family = squared_error_linear")
        res = experiments.run_triptych(cfg, tmp_path)
        for name in ("if_vs_loo.csv", "top_overlap.csv", "bottom_overlap.csv", "oracle.csv", "summary.json",
                     "if_vs_loo.svg", "top_overlap.svg", "bottom_overlap.svg"):
            assert (tmp_path / name).exists()
        assert_hash_lines(tmp_path, cfg)
        assert res.top_overlap.overlap[-1] == 1.0 and res.bottom_overlap.overlap[-1] == 1.0
        assert res.pearson > 0.9 and res.loo_method == "exact retraining"
        header = (tmp_path / "top_overlap.csv").read_text().splitlines()[1]
        assert header == "p,overlap,baseline"

    def test_closed_form_above_cap(self, tmp_path):
        cfg = small_cfg("triptych", extra="max_exact_loo = 100\n[target]\nloss_family = squared_error_linear")
        assert experiments.run_triptych(cfg, tmp_path).loo_method == "closed-form ridge"

    def test_intractable(self, tmp_path):
        cfg = small_cfg("triptych", extra="max_exact_loo = 100")
        with pytest.raises(IntractableLOO):
            experiments.run_triptych(cfg, tmp_path)


class TestProxyTransfer:
    def test_identity_proxy(self, tmp_path):
        cfg = small_cfg("proxy_transfer", extra="[proxy]\nprojection = identity\nfeature_dim = 6")
        res = experiments.run_proxy_transfer(cfg, tmp_path)
        assert res.proxy.rank_corr == pytest.approx(1.0) and res.proxy_overlap == 1.0
        assert res.proxy.slope == pytest.approx(1.0) and res.proxy.epsilon_hat < 1e-12

    def test_outputs(self, tmp_path):
        cfg = small_cfg("proxy_transfer")
        experiments.run_proxy_transfer(cfg, tmp_path)
        assert_hash_lines(tmp_path, cfg)
        P = np.loadtxt(tmp_path / "projection.csv", delimiter=",", skiprows=2)
        assert P.shape == (6, 3)
        blob = json.loads((tmp_path / "alignment.json").read_text())
        assert set(blob) >= {"proxy", "anti_proxy", "top20_baseline"}


def test_checkpoint_ablation(tmp_path):
    cfg = small_cfg("checkpoint_ablation")
    rows = experiments.run_checkpoint_ablation(cfg, tmp_path)
    assert [r["fraction"] for r in rows] == [0.0, 0.05, 0.25, 1.0]
    assert rows[0]["proxy_iterations"] == 0
    assert "analogue" in json.loads((tmp_path / "ablation.json").read_text())["note"]
    assert_hash_lines(tmp_path, cfg)


class TestNoiseRejection:
    def test_outputs(self, tmp_path):
        cfg = small_cfg("noise_rejection")
        res = experiments.run_noise_rejection(cfg, tmp_path)
        assert res.mean_s_flipped < res.mean_s_clean
        assert_hash_lines(tmp_path, cfg)
        assert (tmp_path / "histogram_clean.csv").read_text().splitlines()[1] == "bin_lo,bin_hi,count"
        total = sum(int(l.split(",")[2]) for l in (tmp_path / "histogram.csv").read_text().splitlines()[2:])
        assert total == 240

    def test_no_noise_recall_not_applicable(self, tmp_path):
        res = experiments.run_noise_rejection(small_cfg("noise_rejection", noise=0.0), tmp_path)
        assert all(r["recall"] is None for r in res.rows)
        assert "not-applicable" in (tmp_path / "detection.csv").read_text()

    def test_no_flags(self, tmp_path):
        from onestep.datasets import LabeledDataset

        rng = np.random.default_rng(0)
        imgs = LabeledDataset(rng.integers(0, 256, (120, 784)) / 255.0, np.arange(120) % 10, np.arange(120), 10)
        write_idx(imgs, tmp_path / "img", tmp_path / "lab")
        cfg = parse_config(
            f"[data]\nsource = idx\nnum_classes = 10\nimages = {tmp_path / 'img'}\nlabels = {tmp_path / 'lab'}\n"
            "limit = 80\nanchor_source_size = 40\ntest_size = 10\nnoise_rate = 0\n[anchor]\nsize = 20\n"
        )
        with pytest.raises(NoFlags):
            experiments.run_noise_rejection(cfg, tmp_path / "out")


class TestCli:
    def test_success_and_out_flag(self, tmp_path):
        ini = write_ini(tmp_path, "noise_rejection")
        assert cli.main(["noise-rejection", "--config", str(ini), "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "detection.csv").exists()

    def test_env_output_dir(self, tmp_path, monkeypatch):
        ini = write_ini(tmp_path, "noise_rejection")
        monkeypatch.setenv("OST_OUTPUT_DIR", str(tmp_path / "env"))
        assert cli.main(["noise-rejection", "--config", str(ini)]) == 0
        assert (tmp_path / "env" / "noise.json").exists()
        # --out wins over the environment
        assert cli.main(["noise-rejection", "--config", str(ini), "--out", str(tmp_path / "flag")]) == 0
        assert (tmp_path / "flag" / "noise.json").exists()

    def test_seed_override(self, tmp_path):
        ini = write_ini(tmp_path, "noise_rejection")
        cli.main(["noise-rejection", "--config", str(ini), "--out", str(tmp_path / "a"), "--seed", "1"])
        cli.main(["noise-rejection", "--config", str(ini), "--out", str(tmp_path / "b"), "--seed", "2"])
        a = (tmp_path / "a" / "detection.csv").read_text().splitlines()[0]
        b = (tmp_path / "b" / "detection.csv").read_text().splitlines()[0]
        assert a != b

    def test_config_error(self, tmp_path):
        bad = tmp_path / "bad.ini"
        bad.write_text("[scoring]\np_values = 2.0\n")
        assert cli.main(["pipeline", "--config", str(bad), "--out", str(tmp_path)]) == 2
        assert cli.main(["pipeline", "--config", str(tmp_path / "missing.ini")]) == 2
        ini = write_ini(tmp_path, "pipeline")
        assert cli.main(["pipeline", "--config", str(ini), "--workers", "0", "--out", str(tmp_path)]) == 2

    def test_numeric_failure(self, tmp_path):
        ini = tmp_path / "x.ini"
        # a one-iteration budget cannot reach the tolerance: DidNotConverge
        ini.write_text(SMALL.format(name="pipeline", noise=0.3, extra="").replace("grad_norm_tol = 1e-6", "grad_norm_tol = 1e-12\nmax_iters = 1"))
        assert cli.main(["pipeline", "--config", str(ini), "--out", str(tmp_path / "o")]) == 3

    def test_module_entry_point(self, tmp_path):
        ini = write_ini(tmp_path, "noise_rejection")
        proc = subprocess.run(
            [sys.executable, "-m", "onestep", "noise-rejection", "--config", str(ini), "--out", str(tmp_path / "m")],
            capture_output=True,
            text=True,
        )
        assert proc.returncode == 0, proc.stderr
        bad = subprocess.run([sys.executable, "-m", "onestep", "pipeline", "--config", str(tmp_path / "nope")], capture_output=True)
        assert bad.returncode == 2
