import hashlib
import json
import os
import subprocess
import sys

import pytest

from graybo.cli import main
from graybo.core import load_space, save_space
from graybo.metalearn import MetaCheckpoint
from graybo.optimizer import RunTrace


def _gen_args(out, datasets=4, configs=6, epochs=6, models=3, seed=1, clusters=2):
    return [
        "gen",
        "--clusters",
        str(clusters),
        "--datasets",
        str(datasets),
        "--models",
        str(models),
        "--configs",
        str(configs),
        "--epochs",
        str(epochs),
        "--seed",
        str(seed),
        "--out",
        str(out),
    ]


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    assert main(_gen_args(out)) == 0
    return out


def _sha(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


# ---------------------------------------------------------------------------
# gen


def test_gen_deterministic_hashes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(_gen_args(a)) == 0
    assert main(_gen_args(b)) == 0
    for name in ("metadataset.jsonl", "metafeatures.jsonl", "space.json"):
        assert _sha(a / name) == _sha(b / name)


def test_gen_rejects_zero_datasets(tmp_path, capsys):
    code = main(_gen_args(tmp_path / "x", datasets=0))
    assert code == 2
    assert "--datasets" in capsys.readouterr().err


def test_gen_manifest_echoes_flags(bench_dir):
    manifest = json.load(open(bench_dir / "manifest.json"))
    assert manifest["datasets"] == 4
    assert manifest["configs"] == 6
    assert manifest["epochs"] == 6
    assert manifest["models"] == 3
    assert manifest["seed"] == 1
    assert manifest["clusters"] == 2
    assert manifest["out"] == str(bench_dir)


def test_gen_with_space_file(tmp_path, small_space):
    space_path = tmp_path / "space.json"
    save_space(small_space, space_path)
    out = tmp_path / "bench"
    args = _gen_args(out, models=3) + ["--space", str(space_path)]
    assert main(args) == 0
    written = load_space(out / "space.json")
    assert written == small_space


def test_gen_models_exceeding_hub_is_usage_error(tmp_path, small_space, capsys):
    space_path = tmp_path / "space.json"
    save_space(small_space, space_path)
    args = _gen_args(tmp_path / "bench", models=5) + ["--space", str(space_path)]
    assert main(args) == 2
    assert "--models" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# pareto


def test_pareto_round_trip(tmp_path):
    models = {
        "hub": [
            {"name": "beit_large", "param_count": 305.67, "upstream_accuracy": 90.691},
            {"name": "dla_tiny", "param_count": 1.07, "upstream_accuracy": 73.632},
            {"name": "dominated", "param_count": 400.0, "upstream_accuracy": 80.0},
        ]
    }
    src = tmp_path / "models.json"
    src.write_text(json.dumps(models))
    out = tmp_path / "front.json"
    assert main(["pareto", "--models", str(src), "--out", str(out)]) == 0
    front = json.load(open(out))
    assert {m["name"] for m in front["hub"]} == {"beit_large", "dla_tiny"}


def test_pareto_bad_input_shape(tmp_path, capsys):
    src = tmp_path / "models.json"
    src.write_text(json.dumps({"models": []}))
    assert main(["pareto", "--models", str(src), "--out", str(tmp_path / "o.json")]) == 2


def test_pareto_missing_file_is_io_error(tmp_path):
    code = main(["pareto", "--models", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o.json")])
    assert code == 3


# ---------------------------------------------------------------------------
# metatrain


def test_metatrain_zero_iters_and_round_trip(bench_dir, tmp_path):
    out = tmp_path / "ck.json"
    args = [
        "metatrain",
        "--bench",
        str(bench_dir),
        "--folds",
        "4",
        "--iters",
        "0",
        "--seed",
        "3",
        "--out",
        str(out),
    ]
    assert main(args) == 0
    ck = MetaCheckpoint.load(out)
    again = tmp_path / "ck2.json"
    ck.save(again)
    assert open(out, "rb").read() == open(again, "rb").read()


def test_metatrain_deterministic(bench_dir, tmp_path):
    outs = []
    for run in range(2):
        out = tmp_path / f"ck{run}.json"
        args = [
            "metatrain",
            "--bench",
            str(bench_dir),
            "--folds",
            "4",
            "--iters",
            "10",
            "--eval-every",
            "5",
            "--seed",
            "3",
            "--out",
            str(out),
        ]
        assert main(args) == 0
        outs.append(open(out, "rb").read())
    assert outs[0] == outs[1]


def test_metatrain_bad_val_fold(bench_dir, tmp_path, capsys):
    args = [
        "metatrain",
        "--bench",
        str(bench_dir),
        "--folds",
        "4",
        "--val-fold",
        "7",
        "--iters",
        "0",
        "--out",
        str(tmp_path / "x.json"),
    ]
    assert main(args) == 2
    assert "--val-fold" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# tune


def _tune_args(bench_dir, out, dataset="d00", seed="0", extra=()):
    return [
        "tune",
        "--bench",
        str(bench_dir),
        "--dataset",
        dataset,
        "--budget-seconds",
        "60",
        "--fit-steps",
        "4",
        "--seed",
        seed,
        "--out",
        str(out),
        *extra,
    ]


def test_tune_writes_valid_trace(bench_dir, tmp_path):
    out = tmp_path / "trace.json"
    assert main(_tune_args(bench_dir, out)) == 0
    trace = RunTrace.from_json(open(out).read())
    assert trace.method == "tune"
    assert trace.dataset == "d00"
    assert len(trace.steps) >= 1
    payload = json.loads(open(out).read())
    assert list(payload) == [
        "method",
        "dataset",
        "seed",
        "flags",
        "steps",
        "overhead_seconds",
        "exhausted",
    ]


def test_tune_unknown_dataset(bench_dir, tmp_path, capsys):
    code = main(_tune_args(bench_dir, tmp_path / "x.json", dataset="d99"))
    assert code == 2
    assert "--dataset" in capsys.readouterr().err


def test_tune_deterministic(bench_dir, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(_tune_args(bench_dir, a)) == 0
    assert main(_tune_args(bench_dir, b)) == 0
    assert open(a).read() == open(b).read()


def test_tune_ablate_no_meta_ignores_checkpoint(bench_dir, tmp_path):
    ck = tmp_path / "ck.json"
    assert (
        main(
            [
                "metatrain",
                "--bench",
                str(bench_dir),
                "--folds",
                "4",
                "--iters",
                "0",
                "--out",
                str(ck),
            ]
        )
        == 0
    )
    out = tmp_path / "trace.json"
    args = _tune_args(
        bench_dir, out, extra=["--checkpoint", str(ck), "--ablate", "no-meta", "no-cost"]
    )
    assert main(args) == 0
    trace = json.load(open(out))
    assert trace["flags"]["use_meta"] is False
    assert trace["flags"]["use_cost"] is False
    assert trace["flags"]["checkpoint"] is None


def test_tune_with_checkpoint_enables_meta(bench_dir, tmp_path):
    ck = tmp_path / "ck.json"
    main(
        [
            "metatrain",
            "--bench",
            str(bench_dir),
            "--folds",
            "4",
            "--iters",
            "0",
            "--out",
            str(ck),
        ]
    )
    out = tmp_path / "trace.json"
    assert main(_tune_args(bench_dir, out, extra=["--checkpoint", str(ck)])) == 0
    trace = json.load(open(out))
    assert trace["flags"]["use_meta"] is True


def test_tune_grid_writes_one_file_per_run(bench_dir, tmp_path):
    out = tmp_path / "runs"
    args = _tune_args(bench_dir, out, dataset="d00,d01", seed="0,1")
    assert main(args) == 0
    names = sorted(os.listdir(out))
    assert names == [
        "tune_d00_s0.json",
        "tune_d00_s1.json",
        "tune_d01_s0.json",
        "tune_d01_s1.json",
    ]


def test_tune_bad_ablation_flag(bench_dir, tmp_path):
    args = _tune_args(bench_dir, tmp_path / "x.json", extra=["--ablate", "nonsense"])
    assert main(args) == 2


# ---------------------------------------------------------------------------
# baseline


def _baseline_args(bench_dir, out, method="random", extra=()):
    return [
        "baseline",
        "--method",
        method,
        "--bench",
        str(bench_dir),
        "--dataset",
        "d00",
        "--budget-seconds",
        "60",
        "--seed",
        "0",
        "--out",
        str(out),
        *extra,
    ]


def test_baseline_unknown_method(bench_dir, tmp_path, capsys):
    code = main(_baseline_args(bench_dir, tmp_path / "x.json", method="annealing"))
    assert code == 2
    assert "--method" in capsys.readouterr().err


def test_baseline_random_deterministic(bench_dir, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert main(_baseline_args(bench_dir, a)) == 0
    assert main(_baseline_args(bench_dir, b)) == 0
    assert open(a).read() == open(b).read()


def test_baseline_sha_honors_eta(bench_dir, tmp_path):
    out = tmp_path / "sha.json"
    args = _baseline_args(bench_dir, out, method="sha", extra=["--eta", "2"])
    assert main(args) == 0
    trace = json.load(open(out))
    assert trace["flags"]["eta"] == 2
    # rung sizes follow eta=2: 4 configs at rung 1, 2 at rung 2, 1 at rung 4
    first_rung = [s for s in trace["steps"][:4]]
    assert len({s["pipeline"] for s in first_rung}) == 4


def test_baseline_gp_full(bench_dir, tmp_path):
    out = tmp_path / "gp.json"
    args = _baseline_args(bench_dir, out, method="gp-full", extra=["--fit-steps", "3"])
    assert main(args) == 0
    trace = json.load(open(out))
    assert all(s["epoch"] == 6 for s in trace["steps"])


# ---------------------------------------------------------------------------
# report


def test_report_empty_runs_dir(bench_dir, tmp_path, capsys):
    runs = tmp_path / "runs"
    runs.mkdir()
    code = main(
        ["report", "--runs", str(runs), "--bench", str(bench_dir), "--out", str(tmp_path / "rep")]
    )
    assert code == 4
    assert "no results" in capsys.readouterr().err


def test_report_end_to_end(bench_dir, tmp_path):
    runs = tmp_path / "runs"
    assert main(_tune_args(bench_dir, runs, dataset="d00,d01", seed="0")) == 0
    for method in ("random", "sha"):
        args = [
            "baseline",
            "--method",
            method,
            "--bench",
            str(bench_dir),
            "--dataset",
            "d00,d01",
            "--budget-seconds",
            "60",
            "--seed",
            "0",
            "--out",
            str(runs),
        ]
        assert main(args) == 0
    rep = tmp_path / "rep"
    assert main(["report", "--runs", str(runs), "--bench", str(bench_dir), "--out", str(rep)]) == 0
    lines = open(rep / "ranks.csv").read().splitlines()
    means = [float(l.split(",")[1]) for l in lines[1:]]
    assert len(means) == 3
    assert sum(means) / len(means) == pytest.approx((len(means) + 1) / 2)
    # rerun is byte-identical
    rep2 = tmp_path / "rep2"
    assert main(["report", "--runs", str(runs), "--bench", str(bench_dir), "--out", str(rep2)]) == 0
    for name in ("results.csv", "ranks.csv", "regret_curves.csv"):
        assert open(rep / name).read() == open(rep2 / name).read()


# ---------------------------------------------------------------------------
# process-level smoke


def test_module_entrypoint_smoke(tmp_path):
    env = dict(os.environ, PYTHONPATH="src")
    proc = subprocess.run(
        [sys.executable, "-m", "graybo", "--help"],
        capture_output=True,
        text=True,
        env=env,
        cwd=os.path.dirname(os.path.dirname(os.path.abspath(__file__))),
    )
    assert proc.returncode == 0
    assert "gen" in proc.stdout and "report" in proc.stdout


def test_usage_error_exit_code():
    assert main(["gen"]) == 2  # missing required --out
