import argparse
import csv
import re

import numpy as np
import pytest
import torch

import runner
from slicematch import shapes
from slicematch.config import PipelineConfig
from slicematch.evaluation import Correspondence, LabelField
from slicematch.fmap import FunctionalMapPair
from slicematch.mesh import read_ply, write_off
from slicematch.refine import FeatureRefiner
from slicematch.spectral import FeatureMatrix, wks

SMALL = ["--k", "12", "--wks-dim", "16", "--n-projections", "16"]


@pytest.fixture
def sphere(tmp_path):
    path = str(tmp_path / "sphere.off")
    write_off(path, shapes.bumpy(shapes.icosphere(2), seed=3))
    return path


@pytest.fixture
def small_sphere(tmp_path):
    path = str(tmp_path / "small.off")
    write_off(path, shapes.bumpy(shapes.icosphere(1), seed=4))
    return path


@pytest.fixture
def bent_pair(tmp_path):
    base = shapes.tapered(shapes.grid(24, 12, width=2.0, height=1.0), 0.6)
    paths = str(tmp_path / "flat.off"), str(tmp_path / "bent.off")
    write_off(paths[0], base)
    write_off(paths[1], shapes.bend(shapes.stretched(base, (1.15, 1.0, 1.0)), 0.8))
    Correspondence(np.arange(base.n_vertices)).to_file(str(tmp_path / "identity.txt"))
    return paths


def read_lines(path):
    with open(path) as text_file:
        return text_file.read().splitlines()


# Preprocess tests
def test_preprocess_is_deterministic(tmp_path, sphere):
    first, second = tmp_path / "first", tmp_path / "second"
    assert runner.main(["preprocess", sphere, str(first)] + SMALL) == runner.EXIT_OK
    assert runner.main(["preprocess", sphere, str(second)] + SMALL) == runner.EXIT_OK
    for name in ("sphere.spec", "sphere.fmat"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    assert FeatureMatrix.from_file(str(first / "sphere.fmat")).dim == 16

def test_preprocess_rejects_large_k(tmp_path, small_sphere):
    assert runner.main(["preprocess", small_sphere, str(tmp_path / "cache"), "--k", "42"]) == runner.EXIT_DATA

def test_cache_is_recomputed_when_settings_change(tmp_path, small_sphere):
    cache = str(tmp_path / "cache")
    assert runner.main(["preprocess", small_sphere, cache, "--k", "10", "--wks-dim", "16"]) == runner.EXIT_OK
    assert read_lines(str(tmp_path / "cache" / "small.cfg")) == ["k = 10", "wks_dim = 16", "wks_variance = 7.0"]
    cached = FeatureMatrix.from_file(str(tmp_path / "cache" / "small.fmat"))

    same = runner.prepare_shape(small_sphere, PipelineConfig(k=10, wks_dim=16), cache)
    assert np.array_equal(same.descriptors.values, cached.values)

    other_dim = runner.prepare_shape(small_sphere, PipelineConfig(k=10, wks_dim=8), cache)
    assert other_dim.descriptors.dim == 8 and other_dim.basis.k == 10

    fewer = runner.prepare_shape(small_sphere, PipelineConfig(k=6, wks_dim=16), cache)
    assert fewer.basis.k == 6 and fewer.descriptors.dim == 16
    assert np.allclose(fewer.descriptors.values, wks(fewer.basis, 16))
    assert not np.allclose(fewer.descriptors.values, cached.values)

    more = runner.prepare_shape(small_sphere, PipelineConfig(k=12, wks_dim=16), cache)
    assert more.basis.k == 12

    out = tmp_path / "out"
    arguments = ["match", small_sphere, small_sphere, "--out", str(out), "--cache", cache, "--no-refine",
            "--k", "10", "--wks-dim", "8", "--n-projections", "8"]
    assert runner.main(arguments) == runner.EXIT_OK
    assert np.array_equal(Correspondence.from_file(str(out / "correspondence.txt")).indices, np.arange(42))

def test_missing_mesh_is_data_error(tmp_path):
    assert runner.main(["preprocess", str(tmp_path / "missing.off"), str(tmp_path)]) == runner.EXIT_DATA


# Match tests
def test_identical_pair_without_refinement(tmp_path, sphere):
    out = tmp_path / "out"
    assert runner.main(["match", sphere, sphere, "--out", str(out), "--no-refine"] + SMALL) == runner.EXIT_OK
    corr = Correspondence.from_file(str(out / "correspondence.txt"))
    assert np.array_equal(corr.indices, np.arange(len(corr)))
    assert FunctionalMapPair.from_file(str(out / "fmap.fmap")).k == 12
    trace = read_lines(str(out / "trace.csv"))
    assert trace[0] == "iter,l_fmap,l_ot,l_proper,total"
    assert len(trace) == 2

def test_identical_pair_with_refinement(tmp_path, sphere):
    out = tmp_path / "out"
    assert runner.main(["match", sphere, sphere, "--out", str(out), "--iterations", "2"] + SMALL) == runner.EXIT_OK
    corr = Correspondence.from_file(str(out / "correspondence.txt"))
    assert np.mean(corr.indices == np.arange(len(corr))) >= 0.99

    Correspondence(np.arange(len(corr))).to_file(str(tmp_path / "gt.txt"))
    report = str(tmp_path / "report.csv")
    assert runner.main(["eval", str(out / "correspondence.txt"), str(tmp_path / "gt.txt"), sphere,
            "--report", report]) == runner.EXIT_OK
    with open(report, newline="") as report_file:
        rows = list(csv.DictReader(report_file))
    assert float(rows[0]["geo_error_x100"]) < 0.1
    assert len(read_lines(str(out / "trace.csv"))) == 4

def test_every_ot_variant_is_accepted(tmp_path, small_sphere):
    for variant in ("biSW", "biEBSW", "uniSW", "uniEBSW", "MSE"):
        out = tmp_path / variant
        arguments = ["match", small_sphere, small_sphere, "--out", str(out), "--no-refine", "--ot-variant", variant]
        assert runner.main(arguments + ["--k", "8", "--wks-dim", "16", "--n-projections", "8"]) == runner.EXIT_OK
        assert (out / "correspondence.txt").exists()

def test_unknown_ot_variant_is_usage_error(small_sphere):
    assert runner.main(["match", small_sphere, small_sphere, "--ot-variant", "W2"]) == runner.EXIT_USAGE

def test_match_usage_errors(tmp_path, small_sphere):
    assert runner.main(["match", small_sphere]) == runner.EXIT_USAGE
    assert runner.main([]) == runner.EXIT_USAGE
    assert runner.main(["match", small_sphere, small_sphere, "--k", "ten"]) == runner.EXIT_USAGE

def test_match_pair_list_with_cache(tmp_path, small_sphere):
    cache = tmp_path / "cache"
    assert runner.main(["preprocess", small_sphere, str(cache), "--k", "10", "--wks-dim", "16"]) == runner.EXIT_OK
    pairs = tmp_path / "pairs.txt"
    pairs.write_text("# pairs\nsmall.off small.off first\nsmall.off small.off second\n")
    out = tmp_path / "out"
    arguments = ["match", "--pairs", str(pairs), "--out", str(out), "--cache", str(cache), "--no-refine",
            "--k", "8", "--n-projections", "8"]
    assert runner.main(arguments) == runner.EXIT_OK
    for name in ("first", "second"):
        corr = Correspondence.from_file(str(out / name / "correspondence.txt"))
        assert np.array_equal(corr.indices, np.arange(42))

def test_refinement_beats_nearest_neighbors_on_bent_pair(tmp_path, bent_pair):
    flags = ["--k", "12", "--wks-dim", "24"]
    errors = {}
    for name, extra in (("refined", []), ("unrefined", ["--no-refine"])):
        out = tmp_path / name
        assert runner.main(["match", bent_pair[0], bent_pair[1], "--out", str(out)] + flags + extra) == runner.EXIT_OK
        _, errors[name], _, _ = runner.cmd_eval(str(out / "correspondence.txt"), str(tmp_path / "identity.txt"),
                bent_pair[1])
    assert errors["refined"] < errors["unrefined"], errors
    assert len(read_lines(str(tmp_path / "refined" / "trace.csv"))) == 14

def test_parallel_jobs_match_sequential_run(tmp_path, small_sphere):
    write_off(str(tmp_path / "other.off"), shapes.bumpy(shapes.icosphere(1), seed=5))
    pairs = tmp_path / "pairs.txt"
    pairs.write_text("small.off other.off first\nother.off small.off second\nsmall.off small.off third\n")
    for jobs in ("1", "2"):
        arguments = ["match", "--pairs", str(pairs), "--out", str(tmp_path / jobs), "--jobs", jobs, "--iterations", "2",
                "--k", "8", "--wks-dim", "16", "--n-projections", "8"]
        assert runner.main(arguments) == runner.EXIT_OK
    for name in ("first", "second", "third"):
        sequential, parallel = tmp_path / "1" / name, tmp_path / "2" / name
        assert read_lines(str(sequential / "correspondence.txt")) == read_lines(str(parallel / "correspondence.txt"))
        first = FunctionalMapPair.from_file(str(sequential / "fmap.fmap"))
        second = FunctionalMapPair.from_file(str(parallel / "fmap.fmap"))
        assert torch.allclose(first.c_xy, second.c_xy, atol=1e-10)
        assert len(read_lines(str(parallel / "trace.csv"))) == 4

def test_match_with_external_features(tmp_path, small_sphere):
    features = np.random.default_rng(0).normal(size=(42, 5))
    FeatureMatrix(features).to_file(str(tmp_path / "x.fmat"))
    FeatureMatrix(features[::-1]).to_file(str(tmp_path / "y.fmat"))
    out = tmp_path / "out"
    arguments = ["match", small_sphere, small_sphere, "--out", str(out), "--no-refine", "--features",
            str(tmp_path / "x.fmat"), str(tmp_path / "y.fmat"), "--k", "4", "--n-projections", "8"]
    assert runner.main(arguments) == runner.EXIT_OK
    corr = Correspondence.from_file(str(out / "correspondence.txt"))
    assert np.array_equal(corr.indices, np.arange(41, -1, -1))

def test_match_with_config_file(tmp_path, small_sphere):
    config = tmp_path / "settings.cfg"
    config.write_text("# settings\nk = 8\nwks_dim = 16\nn_projections = 8\not_variant = MSE\n")
    out = tmp_path / "out"
    arguments = ["match", small_sphere, small_sphere, "--out", str(out), "--no-refine", "--config", str(config)]
    assert runner.main(arguments + ["--k", "6"]) == runner.EXIT_OK
    assert FunctionalMapPair.from_file(str(out / "fmap.fmap")).k == 6

    config.write_text("k = 8\nsmoothing = 3\n")
    assert runner.main(arguments) == runner.EXIT_DATA

def test_tuning_flags_state_default_and_provenance():
    parser = argparse.ArgumentParser()
    runner.add_config_flags(parser)
    defaults = PipelineConfig()
    numeric = [action for action in parser._actions if action.type in (int, float) and action.dest in runner.FLAG_KEYS]
    assert len(numeric) >= 15
    for action in numeric:
        if action.dest in ("seed", "jobs"):
            continue
        assert "published" in action.help, action.dest
        stated = re.search(r"default ([-+.0-9e]+)", action.help)
        assert stated is not None, action.dest
        assert float(stated.group(1)) == pytest.approx(float(defaults.get(action.dest))), action.dest


# Training tests
def test_train_then_match(tmp_path, small_sphere):
    pairs = tmp_path / "pairs.txt"
    pairs.write_text("small.off small.off\n")
    weights = str(tmp_path / "refiner.rfnw")
    arguments = ["train", str(pairs), weights, "--epochs", "2", "--k", "8", "--wks-dim", "16", "--n-projections", "8"]
    assert runner.main(arguments) == runner.EXIT_OK
    refiner = FeatureRefiner.from_file(weights)
    assert (refiner.in_dim, refiner.out_dim) == (16, 256)

    out = tmp_path / "out"
    arguments = ["match", small_sphere, small_sphere, "--out", str(out), "--no-refine", "--refiner", weights,
            "--k", "8", "--wks-dim", "16", "--n-projections", "8"]
    assert runner.main(arguments) == runner.EXIT_OK
    assert len(read_lines(str(out / "correspondence.txt"))) == 42


# Evaluation, transfer and export tests
def test_eval_perfect_match_reports_zero(tmp_path, small_sphere, capsys):
    path = str(tmp_path / "identity.txt")
    Correspondence(np.arange(42)).to_file(path)
    labels = str(tmp_path / "labels.txt")
    LabelField(np.arange(42) % 3).to_file(labels)
    report = str(tmp_path / "report.csv")
    arguments = ["eval", path, path, small_sphere, "--report", report, "--pair-id", "self",
            "--coarse-labels", labels, labels]
    assert runner.main(arguments) == runner.EXIT_OK
    assert "geodesic error x100 = 0.0000" in capsys.readouterr().out
    assert read_lines(report)[1] == "self,0.000000,100.000000,"

def test_eval_rejects_out_of_range(tmp_path, small_sphere):
    path = str(tmp_path / "bad.txt")
    Correspondence([0, 1, 99]).to_file(path)
    assert runner.main(["eval", path, path, small_sphere]) == runner.EXIT_DATA

def test_transfer(tmp_path):
    corr, labels, out = (str(tmp_path / name) for name in ("corr.txt", "labels.txt", "out.txt"))
    Correspondence([2, 2, 0]).to_file(corr)
    LabelField([0, 1, 2]).to_file(labels)
    assert runner.main(["transfer", corr, labels, out]) == runner.EXIT_OK
    assert read_lines(out) == ["2", "2", "0"]

def test_bench_csv(tmp_path):
    out = str(tmp_path / "bench.csv")
    assert runner.main(["bench", "--sizes", "50", "100", "--dims", "4", "--n-projections", "10", "--out", out]) == 0
    with open(out, newline="") as bench_file:
        rows = list(csv.DictReader(bench_file))
    assert [row["op"] for row in rows] == ["sw", "sinkhorn", "sw", "sinkhorn"]
    assert int(rows[3]["peak_bytes"]) == 4 * int(rows[1]["peak_bytes"])

def test_export_color(tmp_path, small_sphere):
    corr = str(tmp_path / "corr.txt")
    Correspondence(np.arange(42)[::-1]).to_file(corr)
    out_x, out_y = str(tmp_path / "x.ply"), str(tmp_path / "y.ply")
    assert runner.main(["export-color", corr, small_sphere, small_sphere, out_x, out_y]) == runner.EXIT_OK
    assert "property uchar red" in open(out_x).read()
    assert read_ply(out_x).n_vertices == 42
