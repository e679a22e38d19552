import csv
import io

import pytest
import yaml

from legomanip.cli import SERIES, main, plot_series
from legomanip.config import load_params
from legomanip.learn import Bounds

LEARN_CFG = {
    "seed": 3,
    "learn": {"kind": "1x2", "positions": 2, "epochs": 3},
    "evaluate": {"kinds": ["1x2"], "heights": [1, 2], "controllers": ["joint_jpc"], "trials": 1},
}

PARAMS = """assemble: {T: 3.5, theta: 3.3, d_x: 8.9, d_z: 0.8}
disassemble: {T: 4.2, theta: 12.0, d_x: 0.0, d_z: 9.6}
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(LEARN_CFG))
    return p


def test_learn_writes_params_and_reproducible_history(tmp_path, cfg):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["--config", str(cfg), "--out", str(out1), "learn", "--mode", "disassemble"]) == 0
    assert main(["--config", str(cfg), "--out", str(out2), "learn", "--mode", "disassemble"]) == 0
    params = load_params(out1 / "params_disassemble_joint_jpc.yaml")["disassemble"]
    assert set(params.to_dict()) == {"T", "theta", "d_x", "d_z"}
    assert Bounds().contains(params)
    h1 = (out1 / "history_disassemble_joint_jpc.csv").read_bytes()
    assert h1 == (out2 / "history_disassemble_joint_jpc.csv").read_bytes()


def test_plot_data_series(tmp_path, cfg, capsys):
    out = tmp_path / "o"
    main(["--config", str(cfg), "--out", str(out), "learn", "--mode", "assemble"])
    capsys.readouterr()
    assert main(["--out", str(out), "plot-data", str(out / "history_assemble_joint_jpc.csv")]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert {r["series"] for r in rows} == set(SERIES) == {"cost_best", "cost_mean", "T", "theta", "d_x", "d_z"}
    for name in SERIES:
        assert [int(r["generation"]) for r in rows if r["series"] == name] == [0, 1, 2]


def test_plot_data_rejects_empty_history(tmp_path):
    empty = tmp_path / "h.csv"
    empty.write_text("")
    assert main(["plot-data", str(empty)]) == 2
    with pytest.raises(Exception):
        plot_series("")


def test_missing_arm_file_exits_2(tmp_path, capsys):
    bad = tmp_path / "run.yaml"
    bad.write_text(yaml.safe_dump({"seed": 1, "files": {"arm": "nope/arm.yaml"}}))
    assert main(["--config", str(bad), "learn"]) == 2
    assert "nope/arm.yaml" in capsys.readouterr().err


def test_missing_seed_exits_2(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text("learn: {}\n")
    assert main(["--config", str(p), "learn"]) == 2


def test_evaluate_writes_table(tmp_path, cfg):
    params = tmp_path / "p.yaml"
    params.write_text(PARAMS)
    for out in ("e1", "e2"):
        assert main(["--config", str(cfg), "--out", str(tmp_path / out), "evaluate", "--params", str(params)]) == 0
    text = (tmp_path / "e1" / "success_table.csv").read_text()
    assert text == (tmp_path / "e2" / "success_table.csv").read_text()
    rows = list(csv.DictReader(io.StringIO(text)))
    assert rows and set(rows[0]) == {"brick", "height", "support", "controller", "mode", "successes", "trials", "rate"}
    assert main(["--config", str(cfg), "evaluate", "--params", str(tmp_path / "missing.yaml")]) == 2


def test_prototype_one_brick(tmp_path, cfg):
    layout = tmp_path / "one.txt"
    layout.write_text("name: one\n1 10 10 2x4 0 4 4\n")
    params = tmp_path / "p.yaml"
    params.write_text(PARAMS)
    out = tmp_path / "p"
    assert main(["--config", str(cfg), "--out", str(out), "prototype", str(layout), "--params", str(params)]) == 0
    lines = (out / "actions_one.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 4
    assert (out / "verdict_one.txt").read_text().strip() == "round-trip OK"


def test_prototype_floating_layout_exits_4(tmp_path, cfg):
    layout = tmp_path / "float.txt"
    layout.write_text("name: float\n1 10 10 1x2 0 4 4\n3 30 30 1x2 0 4 10\n")
    assert main(["--config", str(cfg), "prototype", str(layout)]) == 4


def test_prototype_shipped_chair(tmp_path, cfg):
    params = tmp_path / "p.yaml"
    params.write_text(PARAMS)
    out = tmp_path / "c"
    assert main(["--config", str(cfg), "--out", str(out), "prototype", "chair", "--params", str(params)]) == 0
    assert (out / "verdict_chair.txt").read_text().strip() == "round-trip OK"


def test_bad_layout_exits_2(tmp_path, cfg):
    layout = tmp_path / "bad.txt"
    layout.write_text("name: bad\n1 10 10\n")
    assert main(["--config", str(cfg), "prototype", str(layout)]) == 2
    assert main(["--config", str(cfg), "prototype", str(tmp_path / "nothing.txt")]) == 2
