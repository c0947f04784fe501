import hashlib
import subprocess
import sys

import numpy as np
import pytest

from rnnica.cli import main, parse_indices
from rnnica.errors import ConfigError
from rnnica.io import MatrixBundle, read_bundle, read_checkpoint, write_bundle, write_csv

SIM = """n_sources = 4
n_states = 3
timepoints = 60
subjects_per_group = 3
seed = 5
"""

TRAIN = """n_components = 4
hidden_units = 5
mlp_units = 5
window = 10
batch_size = 40
epochs = {epochs}
checkpoint_every = 2
learning_rate = 0.001
"""


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_pipeline(root):
    root.mkdir(parents=True, exist_ok=True)
    (root / "sim.cfg").write_text(SIM)
    (root / "train.cfg").write_text(TRAIN.format(epochs=3))
    steps = [
        ["simulate", "--config", root / "sim.cfg", "--out", root / "cohort.rmb"],
        ["preprocess", "--data", root / "cohort.rmb", "--out", root / "prep.rmb", "--components", "4"],
        ["train", "--data", root / "prep.rmb", "--config", root / "train.cfg", "--out", root / "model.rcp"],
        ["extract", "--model", root / "model.rcp", "--data", root / "prep.rmb", "--out", root / "ex.rmb"],
        ["fnc", "--sources", root / "ex.rmb", "--out", root / "fnc.rmb"],
        ["jacobian", "--model", root / "model.rcp", "--data", root / "prep.rmb", "--out", root / "jac.rmb"],
        ["communities", "--jacobian", root / "jac.rmb", "--out", root / "comm.rmb"],
        ["report", "--out-dir", root / "report", "--fnc", root / "fnc.rmb", "--jacobian", root / "jac.rmb",
         "--communities", root / "comm.rmb", "--extracted", root / "ex.rmb", "--q", "0.05"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv
    return root


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run"))


def test_pipeline_outputs(pipeline):
    cohort = read_bundle(pipeline / "cohort.rmb")
    assert len(cohort.series("x/")) == 6 and cohort["labels"].tolist() == [0, 0, 0, 1, 1, 1]
    ex = read_bundle(pipeline / "ex.rmb")
    assert {n.split("/")[0] for n in ex.names()} >= {"sources", "mu", "sigma", "hidden", "states"}
    report = {p.name for p in (pipeline / "report").iterdir()}
    assert {"fnc.csv", "fnc.svg", "jacobian.csv", "connectivity.dot",
            "group_differences.csv", "MANIFEST.txt"} <= report
    assert (pipeline / "report" / "connectivity.dot").read_text().startswith("digraph rica {\n")
    assert read_checkpoint(pipeline / "model.rcp").state.epoch == 3


def test_pipeline_is_byte_identical(pipeline, tmp_path):
    again = run_pipeline(tmp_path / "again")
    for name in ("cohort.rmb", "prep.rmb", "model.rcp", "ex.rmb", "fnc.rmb", "jac.rmb", "comm.rmb"):
        assert digest(pipeline / name) == digest(again / name), name
    for f in (pipeline / "report").iterdir():
        assert digest(f) == digest(again / "report" / f.name), f.name


def test_report_does_not_mutate_inputs(pipeline, tmp_path):
    inputs = [pipeline / n for n in ("fnc.rmb", "jac.rmb", "comm.rmb", "ex.rmb")]
    before = [(digest(p), p.stat().st_mtime_ns) for p in inputs]
    assert main(["report", "--out-dir", str(tmp_path / "r"), "--fnc", str(inputs[0]),
                 "--jacobian", str(inputs[1]), "--communities", str(inputs[2]),
                 "--extracted", str(inputs[3])]) == 0
    assert [(digest(p), p.stat().st_mtime_ns) for p in inputs] == before


def test_progress_goes_to_stderr(pipeline, tmp_path, capsys):
    (tmp_path / "t.cfg").write_text(TRAIN.format(epochs=2))
    assert main(["train", "--data", str(pipeline / "prep.rmb"), "--config", str(tmp_path / "t.cfg"),
                 "--out", str(tmp_path / "m.rcp")]) == 0
    out, err = capsys.readouterr()
    assert out == ""
    assert "epoch 1 nll" in err and "epoch 2 nll" in err


def test_resume_matches_uninterrupted(pipeline, tmp_path):
    (tmp_path / "t3.cfg").write_text(TRAIN.format(epochs=3))
    ckdir = tmp_path / "ck"
    assert main(["train", "--data", str(pipeline / "prep.rmb"), "--config", str(tmp_path / "t3.cfg"),
                 "--out", str(tmp_path / "full.rcp"), "--checkpoint-dir", str(ckdir)]) == 0
    assert main(["train", "--data", str(pipeline / "prep.rmb"), "--config", str(tmp_path / "t3.cfg"),
                 "--out", str(tmp_path / "resumed.rcp"), "--resume", str(ckdir / "epoch_00002.rcp")]) == 0
    assert digest(tmp_path / "full.rcp") == digest(tmp_path / "resumed.rcp")


def test_missing_config_is_usage_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "d.rmb")]) == 2
    assert "--config" in capsys.readouterr().err


def test_unknown_flag_and_no_subcommand(capsys):
    assert main(["fnc", "--sources", "a", "--out", "b", "--bogus"]) == 2
    assert main([]) == 2


def test_singular_training_exit_code(tmp_path, capsys):
    b = MatrixBundle()
    for i in range(2):
        b.add(f"x/{i:04d}", np.zeros((30, 4)))
    write_bundle(tmp_path / "zero.rmb", b)
    (tmp_path / "t.cfg").write_text(TRAIN.format(epochs=3))
    code = main(["train", "--data", str(tmp_path / "zero.rmb"), "--config", str(tmp_path / "t.cfg"),
                 "--out", str(tmp_path / "z.rcp")])
    err = capsys.readouterr().err
    assert code == 4
    assert "SingularUnmixing" in err and str(tmp_path / "z.rcp") in err


def test_bad_data_file_exit_code(tmp_path, capsys):
    (tmp_path / "bad.rmb").write_bytes(b"not a bundle")
    assert main(["fnc", "--sources", str(tmp_path / "bad.rmb"), "--out", str(tmp_path / "o")]) == 3
    assert "BadMagic" in capsys.readouterr().err
    assert main(["fnc", "--sources", str(tmp_path / "missing.rmb"), "--out", str(tmp_path / "o")]) == 3


def test_bad_config_names_key(tmp_path, capsys):
    (tmp_path / "sim.cfg").write_text("n_sources = four\n")
    assert main(["simulate", "--config", str(tmp_path / "sim.cfg"), "--out", str(tmp_path / "c")]) == 2
    assert "n_sources" in capsys.readouterr().err


def test_thread_env_validation(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("RICA_THREADS", "0")
    assert main(["fnc", "--sources", str(pipeline / "ex.rmb"), "--out", str(tmp_path / "f")]) == 2
    monkeypatch.setenv("RICA_THREADS", "3")
    assert main(["jacobian", "--model", str(pipeline / "model.rcp"), "--data", str(pipeline / "prep.rmb"),
                 "--out", str(tmp_path / "j.rmb")]) == 0
    assert digest(tmp_path / "j.rmb") == digest(pipeline / "jac.rmb")


def test_stats_subcommands(tmp_path, capsys):
    r = np.random.default_rng(0)
    write_csv(tmp_path / "a.csv", r.standard_normal((10, 2)))
    write_csv(tmp_path / "b.csv", r.standard_normal((12, 2)) + 1)
    x = np.arange(10.0)
    write_csv(tmp_path / "y.csv", 1 + 2 * x)
    write_csv(tmp_path / "x.csv", x)
    write_csv(tmp_path / "p.csv", np.array([0.01, 0.02, 0.9]))
    for argv in (["ttest1", "--input", "a.csv"], ["ttest2", "--a", "a.csv", "--b", "b.csv"],
                 ["anova", "--groups", "a.csv", "b.csv"], ["regress", "--y", "y.csv", "--design", "x.csv",
                                                            "--intercept"],
                 ["fdr", "--pvals", "p.csv", "--q", "0.05"]):
        argv = [a if not a.endswith(".csv") else str(tmp_path / a) for a in argv]
        assert main(["stats", *argv, "--out", str(tmp_path / "out.csv")]) == 0, argv
        assert (tmp_path / "out.csv").read_text().count("\n") >= 2
    assert (tmp_path / "out.csv").read_text() == "pvalue,reject\n0.01,1\n0.02,1\n0.90000000000000002,0\n"
    assert main(["stats", "regress", "--y", str(tmp_path / "y.csv"), "--design", str(tmp_path / "x.csv"),
                 "--intercept"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "y0" and abs(float(out[1]) - 1) < 1e-10 and abs(float(out[2]) - 2) < 1e-10


def test_stats_statecorr(pipeline, tmp_path):
    assert main(["stats", "statecorr", "--traces", str(pipeline / "ex.rmb"), "--states",
                 str(pipeline / "cohort.rmb"), "--kind", "sigma", "--out", str(tmp_path / "r.csv")]) == 0
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert len(rows) == 6 and len(rows[0].split(",")) == 4


def test_parse_indices():
    assert parse_indices("0:3,7", 10) == [0, 1, 2, 7]
    assert parse_indices(None, 3) == [0, 1, 2]
    with pytest.raises(ConfigError):
        parse_indices("a", 3)
    with pytest.raises(ConfigError):
        parse_indices("5", 3)


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "rnnica.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("simulate", "preprocess", "train", "extract", "fnc", "jacobian", "communities",
                "stats", "report"):
        assert sub in res.stdout
