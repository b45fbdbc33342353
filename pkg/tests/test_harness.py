import csv
import json
import os
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from isr import harness
from isr.benchmarks import SweepRecord
from isr.datamodel import Dataset
from isr.errors import DomainError, FeatureFileError
from isr.harness import (
    HeadMetrics,
    RunConfig,
    UsageError,
    atomic_write_text,
    build_parser,
    config_from_args,
    fit_pca,
    fmt,
    load_feature_file,
    main,
    make_planted_features,
    parse_int_range,
    parse_seeds,
    postprocess_features,
    sidecar_path,
    spurious_subspace,
    write_feature_file,
    write_results_csv,
)


def run_cli(*argv):
    return main([str(a) for a in argv])


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)


# -- argument parsing ---------------------------------------------------------------------


def test_parse_int_range_forms():
    assert parse_int_range("2..10") == list(range(2, 11))
    assert parse_int_range("3") == [3]
    assert parse_int_range("2,4,6") == [2, 4, 6]
    for bad in ("", "5..2", "a..b", "x"):
        with pytest.raises(UsageError):
            parse_int_range(bad)


def test_parse_seeds():
    assert parse_seeds(3, None) == [0, 1, 2]
    assert parse_seeds(None, "7,2") == [7, 2]
    assert parse_seeds(None, None) == [0]
    for count, listed in ((0, None), (None, ""), (None, "1,1"), (None, "-1"), (None, "a")):
        with pytest.raises(UsageError):
            parse_seeds(count, listed)


def test_fmt_six_significant_digits():
    assert fmt(0.123456789) == "0.123457"
    assert fmt(3) == "3" and fmt(np.int64(4)) == "4"
    assert fmt(float("nan")) == "nan"


def test_documented_sweep_has_expected_row_count():
    args = build_parser().parse_args(
        "run-benchmark --example 3p --scrambled --E 2..10 --seeds 50 "
        "--algos isr-mean,isr-cov,erm,oracle --out x.csv".split()
    )
    cfg = config_from_args(args)
    assert cfg.benchmark == "example3p" and cfg.scrambled
    assert len(cfg.E_values) * len(cfg.seeds) * len(cfg.algorithms) == 9 * 50 * 4


# -- run-benchmark ---------------------------------------------------------------------------


SMALL = ["run-benchmark", "--example", "3p", "--scrambled", "--E", "2..3", "--seeds", "2",
         "--algos", "isr-mean,isr-cov,erm,oracle", "--n-per-env", "300"]


def test_run_benchmark_writes_csv_and_sidecar(tmp_path):
    out = tmp_path / "sweep.csv"
    assert run_cli(*SMALL, "--out", out) == 0
    with open(out, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2 * 4
    keys = [(r["algorithm"], int(r["E"]), int(r["seed"])) for r in rows]
    assert keys == sorted(keys)
    assert "wall_time" not in rows[0]
    side = json.loads(sidecar_path(out).read_text())
    assert side["config"]["seeds"] == [0, 1] and side["config"]["E_values"] == [2, 3]
    assert side["rows"] == 16 and "version" in side


def test_run_benchmark_rerun_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run_cli(*SMALL, "--out", a) == 0
    assert run_cli(*SMALL, "--workers", "2", "--out", b) == 0
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("extra", [
    ["--seed-list", ""],
    ["--seeds", "0"],
    ["--algos", "isr-mean,magic"],
    ["--E", "1..3"],
    ["--env-label-fraction", "0"],
])
def test_run_benchmark_usage_errors(tmp_path, capsys, extra):
    argv = ["run-benchmark", "--example", "3p", "--out", tmp_path / "x.csv"] + extra
    assert run_cli(*argv) == 2
    line = error_line(capsys)
    assert line["status"] == "error" and line["kind"] == "usage" and line["exit_code"] == 2
    assert not (tmp_path / "x.csv").exists()


def test_unknown_benchmark_and_bad_output_dir(tmp_path, capsys):
    assert run_cli("run-benchmark", "--example", "7", "--out", tmp_path / "x.csv") == 2
    assert "unknown benchmark" in error_line(capsys)["message"]
    assert run_cli("run-benchmark", "--example", "2", "--out", tmp_path / "no" / "x.csv") == 2
    assert "does not exist" in error_line(capsys)["message"]


def test_failures_are_rows_not_aborts(tmp_path):
    out = tmp_path / "s.csv"
    argv = ["run-benchmark", "--example", "3", "--E", "2", "--seeds", "2",
            "--algos", "isr-cov,oracle", "--n-per-env", "200", "--out", out]
    assert run_cli(*argv) == 0
    rows = list(csv.DictReader(open(out, newline="")))
    cov = [r for r in rows if r["algorithm"] == "isr-cov"]
    assert len(cov) == 2 and all(r["failure"].startswith("DistinctnessError") for r in cov)
    assert all(r["mean_error"] == "nan" for r in cov)


def test_report_summarizes(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    assert run_cli(*SMALL, "--out", out) == 0
    capsys.readouterr()
    assert run_cli("report", out) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].startswith("algorithm,E,n_seeds,n_failed,mean_error")
    assert len(lines) == 1 + 4 * 2


# -- results CSV -------------------------------------------------------------------------------


def record(algo, E, seed, err=0.25):
    return SweepRecord(algo, E, seed, (err, err), err, 0.0)


def test_empty_results_header_only(tmp_path):
    p = tmp_path / "r.csv"
    write_results_csv([], p)
    assert p.read_text() == "algorithm,E,seed,mean_error,env_errors,failure\n"


def test_one_record_two_lines(tmp_path):
    p = tmp_path / "r.csv"
    write_results_csv([record("erm", 2, 0, 1 / 3)], p)
    lines = p.read_text().splitlines()
    assert len(lines) == 2
    assert lines[1] == "erm,2,0,0.333333,0.333333;0.333333,"


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_sort_invariance(tmp_path_factory, seed):
    d = tmp_path_factory.mktemp("sort")
    recs = [record(a, E, s, 0.1 * s) for a in ("oracle", "erm", "isr-mean") for E in (2, 10, 3) for s in (1, 0)]
    shuffled = recs[:]
    random.Random(seed).shuffle(shuffled)
    write_results_csv(sorted(recs, key=lambda r: (r.algorithm, r.E, r.seed)), d / "a.csv")
    write_results_csv(shuffled, d / "b.csv")
    assert (d / "a.csv").read_bytes() == (d / "b.csv").read_bytes()


def test_metrics_csv(tmp_path):
    p = tmp_path / "m.csv"
    write_results_csv([HeadMetrics("plain", 0.9, 0.5, {0: 0.5, 1: 1.0}, 10, 3, 0)], p)
    assert p.read_text().splitlines()[1] == "plain,0.9,0.5,0:0.5;1:1,10,3,0"
    with pytest.raises(DomainError):
        write_results_csv([record("erm", 2, 0), HeadMetrics("x", 1, 1, {}, 1, 1, 0)], p)


def test_atomic_write_leaves_no_partial_file(tmp_path, monkeypatch):
    p = tmp_path / "out.csv"
    p.write_text("old\n")

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(harness.os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write_text(p, "new contents\n")
    assert p.read_text() == "old\n"
    assert os.listdir(tmp_path) == ["out.csv"]


# -- feature files ------------------------------------------------------------------------------


def write(tmp_path, text, name="f.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_three_rows(tmp_path):
    p = write(tmp_path, "f0,f1,label,env\n1,2,1,0\n3,4,0,0\n5,6,1,1\n")
    data = load_feature_file(p)
    assert data.n == 3 and data.dim == 2
    np.testing.assert_array_equal(data.labels, [1, -1, 1])
    assert data.group_ids is None


@pytest.mark.parametrize("text,line,pattern", [
    ("f0,f1,label\n1,2,1\n", 1, "'env'"),
    ("f0,f1,env\n1,2,1\n", 1, "'label'"),
    ("f0,f2,label,env\n1,2,1,0\n", 1, "malformed header"),
    ("f0,f1,label,env\n1,2,1,0\n1,2,1\n", 3, "expected 4 fields"),
    ("f0,f1,label,env\n1,x,1,0\n", 2, "non-numeric"),
    ("f0,f1,label,env\n1,nan,1,0\n", 2, "NaN"),
    ("f0,f1,label,env\n1,2,1,0\n1,2,2,0\n", 3, "outside"),
    ("f0,f1,label,env\n1,2,1,-1\n", 2, "negative"),
    ("f0,label,env,group\n1,1,0,0.5\n", 2, "integer"),
])
def test_load_errors_carry_line_numbers(tmp_path, text, line, pattern):
    with pytest.raises(FeatureFileError, match=pattern) as info:
        load_feature_file(write(tmp_path, text))
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_load_rejects_mixed_conventions_and_empty(tmp_path):
    with pytest.raises(FeatureFileError, match="mix"):
        load_feature_file(write(tmp_path, "f0,label,env\n1,0,0\n1,-1,0\n"))
    with pytest.raises(FeatureFileError, match="empty"):
        load_feature_file(write(tmp_path, ""))
    with pytest.raises(FeatureFileError, match="no rows"):
        load_feature_file(write(tmp_path, "f0,label,env\n"))


def test_load_multiclass(tmp_path):
    p = write(tmp_path, "f0,label,env\n1,0,0\n2,2,0\n3,1,1\n")
    with pytest.raises(FeatureFileError):
        load_feature_file(p)
    np.testing.assert_array_equal(load_feature_file(p, multiclass=True).labels, [0, 2, 1])


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 30), d=st.integers(1, 6))
def test_feature_file_round_trip(tmp_path_factory, seed, n, d):
    rng = np.random.default_rng(seed)
    data = Dataset(rng.normal(size=(n, d)) * 10.0 ** rng.integers(-8, 8, size=d),
                   rng.choice([-1, 1], size=n), rng.integers(0, 3, size=n),
                   group_ids=rng.integers(0, 4, size=n))
    p = tmp_path_factory.mktemp("rt") / "f.csv"
    write_feature_file(p, data)
    back = load_feature_file(p)
    np.testing.assert_array_equal(back.features, data.features)
    np.testing.assert_array_equal(back.labels, data.labels)
    np.testing.assert_array_equal(back.env_ids, data.env_ids)
    np.testing.assert_array_equal(back.group_ids, data.group_ids)


# -- post-processing ---------------------------------------------------------------------------


def pp_config(**kw):
    return RunConfig(command="postprocess-features", **kw)


def test_planted_features_shape_and_groups():
    train, test = make_planted_features(n=400, d=8, seed=1)
    assert train.n == test.n == 400 and train.dim == 8
    assert set(train.environments.tolist()) == {0, 1}
    assert set(train.group_ids.tolist()) == {0, 1, 2, 3}
    assert not np.array_equal(train.features, test.features)


def test_fit_pca_rank():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 3)) @ rng.normal(size=(3, 10))
    assert fit_pca(x, 1.0).components.shape[0] == 3
    assert fit_pca(x, 0.5).components.shape[0] < 3


def test_single_environment_rejected():
    train, test = make_planted_features(n=200, d=6, seed=0)
    one = train.replace(env_ids=np.zeros(train.n, dtype=int))
    with pytest.raises(DomainError, match="single environment"):
        postprocess_features(one, test, pp_config())


def test_isr_mean_two_envs_gives_one_direction():
    train, _ = make_planted_features(n=1000, d=10, seed=2)
    assert spurious_subspace(train, "isr-mean", 5).k == 1
    assert spurious_subspace(train, "isr-mean", None).k == 1
    assert spurious_subspace(train, "isr-cov", 3).k == 3


def test_planted_direction_is_recovered():
    from isr.datamodel import random_orthonormal_transform

    train, _ = make_planted_features(n=4000, d=16, seed=3)
    R = random_orthonormal_transform(16, 3)
    basis = spurious_subspace(train, "isr-mean", None)
    assert abs(basis.rows[0] @ R[:, 1]) > 0.95


def test_shrink_one_and_skip_recovery_match_plain():
    train, test = make_planted_features(n=600, d=8, seed=4)
    for cfg in (pp_config(shrink=1.0), pp_config(skip_recovery=True)):
        metrics, _ = postprocess_features(train, test, cfg)
        plain, isr = metrics
        assert isr.average_accuracy == pytest.approx(plain.average_accuracy, abs=1e-9)
        assert isr.worst_group_accuracy == pytest.approx(plain.worst_group_accuracy, abs=1e-9)


def test_missing_group_column_warns():
    train, test = make_planted_features(n=400, d=6, seed=5)
    metrics, info = postprocess_features(train, test.replace(group_ids=None), pp_config())
    assert any("no group column" in w for w in info["warnings"])
    assert all(np.isnan(m.worst_group_accuracy) and 0 <= m.average_accuracy <= 1 for m in metrics)


def test_multiclass_postprocess():
    rng = np.random.default_rng(0)
    n, d = 900, 6
    y = rng.integers(0, 3, size=n)
    env = rng.integers(0, 2, size=n)
    x = rng.normal(size=(n, d))
    x[:, 0] += 3 * y
    x[:, 1] += 2 * np.where(rng.random(n) < np.where(env == 0, 0.9, 0.6), y, rng.integers(0, 3, size=n))
    data = Dataset(x, y, env, group_ids=3 * env + y)
    metrics, info = postprocess_features(data, data, pp_config())
    assert info["spurious_dim"] == 1
    assert all(m.average_accuracy > 0.6 for m in metrics)


def test_cli_postprocess_end_to_end(tmp_path, capsys):
    tr, te, out = tmp_path / "train.csv", tmp_path / "test.csv", tmp_path / "m.csv"
    assert run_cli("make-features", "--train-out", tr, "--test-out", te, "--n", 1000, "--d", 16) == 0
    assert run_cli("postprocess-features", "--train", tr, "--test", te, "--out", out) == 0
    rows = list(csv.DictReader(open(out, newline="")))
    assert [r["head"] for r in rows] == ["plain", "isr-mean"]
    assert rows[1]["spurious_dim"] == "1"
    side = json.loads(sidecar_path(out).read_text())
    assert side["config"]["shrink"] == 0.0 and side["config"]["pca_variance"] == 0.999


def test_cli_postprocess_errors(tmp_path, capsys):
    tr = write(tmp_path, "f0,label,env\n1,1,0\n2,0,0\n3,1,0\n4,0,0\n", "train.csv")
    out = tmp_path / "m.csv"
    assert run_cli("postprocess-features", "--train", tr, "--test", tr, "--no-pca", "--out", out) == 1
    line = error_line(capsys)
    assert line["kind"] == "runtime" and "single environment" in line["message"]
    assert not out.exists()
    assert run_cli("postprocess-features", "--train", tmp_path / "nope.csv", "--test", tr, "--out", out) == 2
    assert run_cli("postprocess-features", "--train", tr, "--test", tr, "--shrink", "2", "--out", out) == 2
    bad = write(tmp_path, "f0,label,env\n1,1,0\nx,0,1\n", "bad.csv")
    assert run_cli("postprocess-features", "--train", bad, "--test", bad, "--out", out) == 1
    assert "line 3" in error_line(capsys)["message"]
