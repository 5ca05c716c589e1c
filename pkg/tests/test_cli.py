import json
import os

import numpy as np
import pytest

from lidkit.bench_cli import main
from lidkit.manifolds import load_cloud


def run(args):
    return main([str(a) for a in args])


@pytest.fixture()
def affine_cloud(tmp_path):
    path = tmp_path / "affine.lidc"
    assert run(["gen", "--family", "affine_gaussian", "--d", 8, "--n", 32,
                "--N", 300, "--seed", 5, "--out", path]) == 0
    return path


class TestGen:
    def test_writes_and_reruns_identically(self, tmp_path):
        out = tmp_path / "s.lidc"
        args = ["gen", "--family", "hypersphere", "--d", 4, "--n", 16,
                "--N", 200, "--seed", 7, "--out", out]
        assert run(args) == 0
        first = out.read_bytes()
        cloud = load_cloud(out)
        assert cloud.n_points == 200 and cloud.ambient_dim == 16
        assert run(args) == 0
        assert out.read_bytes() == first

    def test_csv_output(self, tmp_path):
        out = tmp_path / "s.csv"
        assert run(["gen", "--family", "hyperball", "--d", 2, "--n", 4,
                    "--N", 20, "--seed", 1, "--out", out]) == 0
        assert out.read_text().startswith("x0,x1,x2,x3,true_lid")

    def test_bad_dimension_exits_2(self, tmp_path, capsys):
        code = run(["gen", "--family", "hypersphere", "--d", 20, "--n", 16,
                    "--N", 10, "--seed", 0, "--out", tmp_path / "x.lidc"])
        assert code == 2
        assert "d must satisfy family constraint" in capsys.readouterr().err


class TestTrain:
    def test_checkpoint_and_trace_deterministic(self, tmp_path):
        cloud = tmp_path / "c.lidc"
        run(["gen", "--family", "affine_gaussian", "--d", 2, "--n", 4,
             "--N", 64, "--seed", 2, "--out", cloud])
        args = ["train", "--cloud", cloud, "--out", tmp_path / "m.lidm",
                "--batches", 60, "--batch-size", 16, "--width", 16,
                "--depth", 2, "--seed", 3]
        assert run(args) == 0
        ck = (tmp_path / "m.lidm").read_bytes()
        trace = (tmp_path / "m.lidm.loss.csv").read_text()
        assert trace.startswith("batch,loss")
        assert len(trace.strip().split("\n")) == 61
        assert run(args) == 0
        assert (tmp_path / "m.lidm").read_bytes() == ck

    def test_final_loss_tracks_sigma_law_average(self, tmp_path):
        cloud = tmp_path / "c.lidc"
        run(["gen", "--family", "affine_gaussian", "--d", 4, "--n", 8,
             "--N", 500, "--seed", 1, "--out", cloud])
        out = tmp_path / "m.lidm"
        assert run(["train", "--cloud", cloud, "--out", out, "--batches", 2500,
                    "--batch-size", 100, "--width", 128, "--depth", 3,
                    "--seed", 0]) == 0
        losses = np.array([float(line.split(",")[1]) for line in
                           (tmp_path / "m.lidm.loss.csv").read_text()
                           .strip().split("\n")[1:]])
        # quadrature of the optimal loss d/(1+s^2) over the log-uniform law
        t = np.linspace(np.log(0.005), np.log(1.0), 20001)
        target = np.trapezoid(4.0 / (1.0 + np.exp(2 * t)), t) / (t[-1] - t[0])
        assert abs(np.mean(losses[-500:]) - target) <= 1.0

    def test_zero_batches_exits_2(self, tmp_path, affine_cloud):
        assert run(["train", "--cloud", affine_cloud, "--out",
                    tmp_path / "m.lidm", "--batches", 0]) == 2

    def test_divergence_exits_3(self, tmp_path):
        cloud = tmp_path / "c.lidc"
        run(["gen", "--family", "affine_gaussian", "--d", 2, "--n", 4,
             "--N", 32, "--seed", 2, "--out", cloud])
        assert run(["train", "--cloud", cloud, "--out", tmp_path / "m.lidm",
                    "--batches", 200, "--batch-size", 16, "--width", 16,
                    "--depth", 2, "--lr", 1e6, "--lr-min", 1e6]) == 3


class TestEstimate:
    def test_oracle_dsm_report(self, tmp_path, affine_cloud):
        out = tmp_path / "dsm"
        assert run(["estimate", "--cloud", affine_cloud, "--oracle", "affine",
                    "--d", 8, "--gen-seed", 5, "--estimator", "dsm",
                    "--sigma", 0.01, "--m", 256, "--seed", 9,
                    "--out", out]) == 0
        summary = json.loads((tmp_path / "dsm.json").read_text())
        assert summary["mae"] <= 0.3
        assert summary["score_evals"] == 300 * 256
        assert summary["runtime_ms"] == 0.0
        rows = (tmp_path / "dsm.csv").read_text().strip().split("\n")
        assert rows[0] == "point_index,estimate,true_lid,score_evals,jvp_evals"
        assert len(rows) == 301

    def test_oracle_flipd_report(self, tmp_path, affine_cloud):
        out = tmp_path / "flipd"
        assert run(["estimate", "--cloud", affine_cloud, "--oracle", "affine",
                    "--d", 8, "--gen-seed", 5, "--estimator", "flipd",
                    "--sigma", 0.05, "--out", out]) == 0
        summary = json.loads((tmp_path / "flipd.json").read_text())
        assert summary["mae"] <= 0.1
        assert summary["jvp_evals"] == 300 * 32

    def test_nonparametric_estimator(self, tmp_path, affine_cloud):
        out = tmp_path / "mle"
        assert run(["estimate", "--cloud", affine_cloud, "--estimator", "mle",
                    "--k", 20, "--out", out]) == 0
        summary = json.loads((tmp_path / "mle.json").read_text())
        assert abs(summary["mean"] - 8.0) < 2.0

    def test_esm_without_oracle_exits_4(self, tmp_path, affine_cloud):
        ck = tmp_path / "m.lidm"
        run(["train", "--cloud", affine_cloud, "--out", ck, "--batches", 30,
             "--batch-size", 8, "--width", 8, "--depth", 2])
        assert run(["estimate", "--cloud", affine_cloud, "--checkpoint", ck,
                    "--estimator", "esm", "--out", tmp_path / "e"]) == 4

    def test_esm_with_oracle_and_checkpoint(self, tmp_path, affine_cloud):
        ck = tmp_path / "m.lidm"
        run(["train", "--cloud", affine_cloud, "--out", ck, "--batches", 30,
             "--batch-size", 8, "--width", 8, "--depth", 2])
        assert run(["estimate", "--cloud", affine_cloud, "--checkpoint", ck,
                    "--oracle", "affine", "--d", 8, "--gen-seed", 5,
                    "--estimator", "esm", "--sigma", 0.05, "--m", 4,
                    "--out", tmp_path / "e"]) == 0
        summary = json.loads((tmp_path / "e.json").read_text())
        assert summary["mae"] is None
        assert summary["mean"] >= 0.0

    def test_unknown_estimator_exits_2(self, tmp_path, affine_cloud):
        assert run(["estimate", "--cloud", affine_cloud, "--oracle", "affine",
                    "--d", 8, "--estimator", "bogus",
                    "--out", tmp_path / "x"]) == 2

    def test_missing_field_source_exits_2(self, tmp_path, affine_cloud):
        assert run(["estimate", "--cloud", affine_cloud, "--estimator", "dsm",
                    "--out", tmp_path / "x"]) == 2


class TestSpectrum:
    def test_traces_match_dsm(self, tmp_path, affine_cloud, capsys):
        out = tmp_path / "spec.csv"
        assert run(["spectrum", "--cloud", affine_cloud, "--oracle", "affine",
                    "--d", 8, "--gen-seed", 5, "--point", 3,
                    "--m-list", "8,64", "--sigma", 0.05, "--seed", 2,
                    "--out", out]) == 0
        printed = capsys.readouterr().out
        assert printed.count(" ok") == 2
        assert "MISMATCH" not in printed
        rows = out.read_text().strip().split("\n")
        assert rows[0] == "m,rank,eigenvalue"
        assert len(rows) == 1 + 2 * 32  # n eigenvalues per m

    def test_point_mass_spectra_vanish(self, tmp_path):
        cloud = tmp_path / "pm.lidc"
        run(["gen", "--family", "point_mixture", "--d", 0, "--n", 6,
             "--N", 10, "--seed", 4, "--anchors", 1, "--anchor-scale", 0.0,
             "--out", cloud])
        out = tmp_path / "spec.csv"
        assert run(["spectrum", "--cloud", cloud, "--oracle", "mixture",
                    "--gen-seed", 4, "--anchors", 1, "--anchor-scale", 0.0,
                    "--point", 0, "--m-list", "8", "--out", out]) == 0
        eigs = [float(r.split(",")[2]) for r in
                out.read_text().strip().split("\n")[1:]]
        assert max(abs(e) for e in eigs) < 1e-12


class TestScaling:
    def test_counters_across_sizes(self, tmp_path):
        out = tmp_path / "scaling.csv"
        assert run(["scaling", "--d-list", "4,8,16", "--m", 8,
                    "--hutchinson-k", 32, "--points", 2, "--out", out]) == 0
        rows = [r.split(",") for r in out.read_text().strip().split("\n")[1:]]
        assert len(rows) == 9
        by_est = {}
        for d, n, est, m, score, jvp in rows:
            by_est.setdefault(est, []).append(
                (int(d), int(n), int(m), int(score), int(jvp)))
        # dsm: constant m score evals, zero jvps
        assert all(s == 8 and j == 0 for _, _, _, s, j in by_est["dsm"])
        # exact flipd: jvp count equals the ambient dimension
        assert [j for _, n, _, _, j in by_est["flipd_exact"]] == [8, 16, 32]
        assert all(j == n for _, n, _, _, j in by_est["flipd_exact"])
        # hutchinson flipd: constant probe count
        assert all(j == 32 for _, _, _, _, j in by_est["flipd_hutchinson"])


class TestBench:
    def write_config(self, tmp_path, **overrides):
        cfg = {
            "seed": 0,
            "manifolds": [
                {"family": "affine_gaussian", "d": 4, "n": 16, "N": 120,
                 "seed": 1},
                {"family": "affine_gaussian", "d": 2, "n": 8, "N": 120,
                 "seed": 2},
            ],
            "estimators": ["dsm", "mle"],
            "sigmas": [0.01, 0.05],
            "m": 8,
            "k": [10],
            "field": "oracle",
        }
        cfg.update(overrides)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(cfg))
        return path

    def test_grid_rows_and_average(self, tmp_path):
        cfg = self.write_config(tmp_path)
        out = tmp_path / "bench"
        assert run(["bench", "--config", cfg, "--out", out]) == 0
        rows = (out / "bench.csv").read_text().strip().split("\n")
        assert rows[0].startswith("manifold,d,n,estimator,sigma,m,mae")
        assert len(rows) == 1 + 2 * 2 + 2  # 2 manifolds x 2 sigmas + 2 mle rows
        table = (out / "table.txt").read_text()
        assert "Average" in table and "dsm s=0.01" in table
        first = (out / "bench.csv").read_bytes()
        assert run(["bench", "--config", cfg, "--out", out]) == 0
        assert (out / "bench.csv").read_bytes() == first

    def test_partial_failure_warns_but_succeeds(self, tmp_path, capsys):
        cfg = self.write_config(tmp_path, manifolds=[
            {"family": "affine_gaussian", "d": 2, "n": 8, "N": 60, "seed": 1},
            {"family": "hypersphere", "d": 2, "n": 8, "N": 60, "seed": 2},
        ], estimators=["dsm"])
        out = tmp_path / "bench"
        assert run(["bench", "--config", cfg, "--out", out]) == 0
        err = capsys.readouterr().err
        assert "warning" in err and "hypersphere" in err
        rows = (out / "bench.csv").read_text().strip().split("\n")[1:]
        assert len(rows) == 4  # failed rows still recorded
        assert sum(",,,,,," in r for r in rows) == 2

    def test_empty_grid_exits_2(self, tmp_path):
        cfg = self.write_config(tmp_path, estimators=[])
        assert run(["bench", "--config", cfg, "--out", tmp_path / "b"]) == 2


class TestThreadDeterminism:
    def test_outputs_identical_across_thread_counts(self, tmp_path,
                                                    affine_cloud):
        blobs = {}
        for threads in ("1", "8"):
            os.environ["LIDKIT_THREADS"] = threads
            try:
                out = tmp_path / f"r{threads}"
                assert run(["estimate", "--cloud", affine_cloud, "--oracle",
                            "affine", "--d", 8, "--gen-seed", 5,
                            "--estimator", "dsm", "--sigma", 0.02, "--m", 16,
                            "--seed", 3, "--out", out]) == 0
                blobs[threads] = ((tmp_path / f"r{threads}.csv").read_bytes(),
                                  (tmp_path / f"r{threads}.json").read_bytes())
            finally:
                os.environ.pop("LIDKIT_THREADS", None)
        assert blobs["1"] == blobs["8"]
