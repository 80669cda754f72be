import csv
from pathlib import Path

import pytest

from sfrefine.cli import main

CONFIG = "steps = 2\nwidth = 4\nepochs = 1\nmax_disp = 8\npatch = 5\nflow_radius = 3\n"


def _files(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def run_pipeline(root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "run.cfg"
    cfg.write_text(CONFIG)
    c = ["--config", str(cfg)]
    assert main(["gen", "--out-dir", str(root / "data"), "--count", "3", "--seed", "7",
                 "--size", "16x20"] + c) == 0
    assert main(["init", "--clip", str(root / "data"), "--out-dir", str(root / "init")] + c) == 0
    assert main(["train", "--dataset-dir", str(root / "data"), "--init-dir", str(root / "init"),
                 "--out", str(root / "ref.bin"), "--limit", "2"] + c) == 0
    assert main(["refine", "--clip", str(root / "data"), "--init-dir", str(root / "init"),
                 "--out-dir", str(root / "learned"), "--params", str(root / "ref.bin"),
                 "--report", str(root / "learned.csv")] + c) == 0
    assert main(["refine", "--clip", str(root / "data"), "--init-dir", str(root / "init"),
                 "--out-dir", str(root / "descent"), "--strategy", "descent", "--lr", "100",
                 "--report", str(root / "descent.csv")] + c) == 0
    assert main(["eval", "--pred-dir", str(root / "learned"), "--gt-dir", str(root / "data"),
                 "--report", str(root / "eval.csv")] + c) == 0


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    a, b = tmp_path_factory.mktemp("run_a"), tmp_path_factory.mktemp("run_b")
    run_pipeline(a)
    run_pipeline(b)
    return a, b


def test_pipeline_is_byte_deterministic(two_runs):
    a, b = two_runs
    fa, fb = _files(a), _files(b)
    assert fa.keys() == fb.keys()
    for k in ("ref.bin", "learned.csv", "descent.csv", "eval.csv", "data/000/l1.pfm",
              "init/002/flow.flo", "learned/001/d1.pfm"):
        assert k in fa
    diff = [k for k in fa if fa[k] != fb[k]]
    assert not diff


def test_report_has_one_row_per_step(two_runs):
    rows = list(csv.DictReader(open(two_runs[0] / "descent.csv")))
    assert [int(r["step"]) for r in rows] == [0, 1, 2]


def test_zero_refiner_report_is_flat(two_runs, tmp_path):
    a = two_runs[0]
    rep = tmp_path / "zero.csv"
    assert main(["refine", "--clip", str(a / "data"), "--init-dir", str(a / "init"),
                 "--out-dir", str(tmp_path / "out"), "--params", "none", "--steps", "3",
                 "--report", str(rep)]) == 0
    rows = list(csv.DictReader(open(rep)))
    assert len(rows) == 4
    for r in rows[1:]:
        assert {k: v for k, v in r.items() if k != "step"} == \
               {k: v for k, v in rows[0].items() if k != "step"}
    # the refined state equals the initial one byte for byte
    assert (tmp_path / "out/000/d1.pfm").read_bytes() == (a / "init/000/d1.pfm").read_bytes()


def test_single_clip_and_four_image_init(two_runs, tmp_path):
    d = two_runs[0] / "data" / "001"
    assert main(["init", "--clip", str(d), "--out-dir", str(tmp_path / "one"),
                 "--config", str(two_runs[0] / "run.cfg")]) == 0
    imgs = [str(d / f"{n}.pfm") for n in ("l1", "r1", "l2", "r2")]
    assert main(["init", "--clip", *imgs, "--out-dir", str(tmp_path / "four"),
                 "--config", str(two_runs[0] / "run.cfg")]) == 0
    assert _files(tmp_path / "one") == _files(tmp_path / "four")
    assert _files(tmp_path / "one") == _files(two_runs[0] / "init" / "001")


def test_gt_init_reproduces_ground_truth(two_runs, tmp_path):
    d = two_runs[0] / "data"
    assert main(["init", "--clip", str(d), "--out-dir", str(tmp_path / "gt"), "--mode", "gt",
                 "--limit", "1"]) == 0
    assert main(["eval", "--pred-dir", str(tmp_path / "gt"), "--gt-dir", str(d), "--limit", "1",
                 "--report", str(tmp_path / "e.csv")]) == 0
    row = next(csv.DictReader(open(tmp_path / "e.csv")))
    assert float(row["sf"]) == 0.0 and float(row["epe_d1"]) == 0.0


@pytest.mark.parametrize("argv, needle", [
    (["eval", "--pred-dir", "/nonexistent/p", "--gt-dir", "/nonexistent/g"], "no such directory"),
    (["refine", "--clip", "/nonexistent", "--init-dir", "x", "--out-dir", "y"], "--params"),
    (["init", "--clip", "a", "b", "--out-dir", "y"], "four images"),
    (["init", "--clip", "/nonexistent", "--out-dir", "y", "--mode", "external"], "--external"),
])
def test_errors_exit_with_status_1(argv, needle, capsys):
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("sfrefine: error:") and needle in err


def test_bad_config_is_reported_with_line(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("steps = 2\nbogus = 1\n")
    assert main(["gen", "--out-dir", str(tmp_path / "d"), "--count", "1", "--config", str(cfg)]) == 1
    assert "bad.cfg:2: unknown key 'bogus'" in capsys.readouterr().err


def test_bad_size_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--out-dir", str(tmp_path), "--size", "large"])
    assert exc.value.code == 2
