import pytest

from rab2def.cli import main

CONFIG = """
n_clients = 6
clients_per_round = 6
rounds = 2
synth_classes = 3
synth_dims = 16
synth_train_per_class = 60
synth_test_per_class = 30
hidden = 8
defense = rab2def
attack = label_flip
n_adversarial = 1
n_poor = 1
lle_instances = 4
"""


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text(CONFIG)
    return p


def test_run_then_report(tmp_path, cfg_path, capsys):
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert {"rounds.csv", "weights.csv", "fairness.csv"} <= {p.name for p in out.iterdir()}
    assert main(["report", "--in", str(out)]) == 0
    text = capsys.readouterr().out
    assert "adversarial" in text and "poor client mean accuracy" in text


def test_explain_writes_pgms(tmp_path, cfg_path):
    out = tmp_path / "maps"
    assert main(["explain", "--config", str(cfg_path), "--round", "1", "--client", "2", "--out", str(out)]) == 0
    pgms = sorted(out.glob("*.pgm"))
    assert len(pgms) == 4 and all(p.read_bytes().startswith(b"P5\n4 4\n255\n") for p in pgms)


def test_errors_exit_nonzero(tmp_path, cfg_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert main(["explain", "--config", str(cfg_path), "--round", "9", "--client", "0", "--out", str(tmp_path)]) == 2
    assert main(["report", "--in", str(tmp_path / "missing")]) == 2
    assert "error:" in capsys.readouterr().err
