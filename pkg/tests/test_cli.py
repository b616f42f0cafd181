"""Command-line harness: config files, commands, registry and exit codes."""
import os

import numpy as np
import pandas as pd
import pytest

from app import main, models
from app.errors import ConfigError
from app.numgrad import Tensor
from app.trainer import METRICS_FILE


def read_bytes(path):
    with open(path, "rb") as f:
        return f.read()


# --- config files ---

def test_parse_config_text():
    values = main.parse_config_text("# comment\nsuite = blobs3\nvariant = IDL  # inline\n\nlambda = 0.5\n")
    assert values == {"suite": "blobs3", "variant": "IDL", "lambda": "0.5"}


def test_unknown_and_duplicate_keys():
    with pytest.raises(ConfigError, match="unknown config key 'gamma'"):
        main.parse_config_text("gamma = 1")
    with pytest.raises(ConfigError, match="duplicate"):
        main.parse_config_text("tau = 0.1\ntau = 0.2")
    with pytest.raises(ConfigError, match="key = value"):
        main.parse_config_text("just words")


def test_missing_key_is_named():
    with pytest.raises(ConfigError, match="'variant'"):
        main.build_config({"suite": "blobs3"})


def test_invalid_value_is_a_config_error():
    with pytest.raises(ConfigError, match="rho"):
        main.build_config({"suite": "blobs3", "variant": "TCL", "rho": "1.5"})
    with pytest.raises(ConfigError, match="flip_prob"):
        main.build_config({"suite": "digits5", "variant": "TCL", "flip_prob": "1.5"})
    assert main.build_config({"suite": "digits5", "variant": "TCL", "flip_prob": "none"}).flip_prob is None


def test_shipped_configs_parse():
    root = os.path.join(os.path.dirname(__file__), "..", "configs")
    for name in ("blobs3.conf", "digits5.conf"):
        config = main.build_config(main.read_config_file(os.path.join(root, name)))
        assert config.variant.value == "TCL"


def test_lambda_flag_equals_config_value(tiny_config_file):
    args = main.build_parser().parse_args(["train", "--config", tiny_config_file, "--lambda", "0"])
    from_flag = main.config_from_args(args)
    values = main.read_config_file(tiny_config_file)
    values["lambda"] = "0"
    assert from_flag.snapshot() == main.build_config(values).snapshot()


def test_set_overrides_any_key(tiny_config_file):
    args = main.build_parser().parse_args(["train", "--config", tiny_config_file, "--set", "tau=0.2",
                                           "--set", "hidden=8,4"])
    config = main.config_from_args(args)
    assert config.tau == 0.2 and config.hidden == [8, 4]


# --- commands ---

def test_gen_data_writes_one_file_per_domain(tmp_path):
    assert main.main(["gen-data", "--suite", "blobs3", "--n", "20", "--out", str(tmp_path / "b")]) == 0
    assert sorted(os.listdir(tmp_path / "b")) == ["plain.tclds", "tilted.tclds", "warped.tclds"]

    out = tmp_path / "d"
    assert main.main(["gen-data", "--suite", "digits5", "--n", "10", "--csv", "--preview", "--out", str(out)]) == 0
    assert len([f for f in os.listdir(out) if f.endswith(".tclds")]) == 5
    assert len([f for f in os.listdir(out) if f.endswith(".csv")]) == 5
    assert (out / "preview.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_gen_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        main.main(["gen-data", "--suite", "blobs3", "--n", "20", "--seed", "3", "--out", str(tmp_path / name)])
    assert read_bytes(tmp_path / "a" / "warped.tclds") == read_bytes(tmp_path / "b" / "warped.tclds")


def test_train_records_and_reuses_runs(tiny_config_file, tmp_path, db, capsys):
    out = str(tmp_path / "run")
    assert main.main(["train", "--config", tiny_config_file, "--out", out]) == 0
    assert os.path.exists(os.path.join(out, METRICS_FILE))
    runs = db.query(models.Run).all()
    assert len(runs) == 1
    assert runs[0].status == "done" and 0.0 <= runs[0].target_accuracy <= 1.0
    assert f"target accuracy {runs[0].target_accuracy:.4f} ({out})" in capsys.readouterr().out
    assert runs[0].slug == "tcl-seed-0"

    assert main.main(["train", "--config", tiny_config_file, "--out", out]) == 0
    db.expire_all()
    assert db.query(models.Run).count() == 1


def test_eval_reports_both_encoders(tiny_config_file, tmp_path):
    out = str(tmp_path / "run")
    main.main(["train", "--config", tiny_config_file, "--out", out])
    report = str(tmp_path / "eval.csv")
    assert main.main(["eval", "--run", out, "--csv", report]) == 0
    frame = pd.read_csv(report)
    assert frame["encoder"].tolist() == ["query", "key"]
    assert frame["accuracy"].between(0, 1).all()


def test_ablate_table_and_zero_lambda_reproducibility(tiny_config_file, tmp_path, db):
    out = str(tmp_path / "harness")
    assert main.main(["ablate", "--config", tiny_config_file, "--seeds", "0,1", "--out", out]) == 0
    table = pd.read_csv(os.path.join(out, "ablate.csv"))
    assert len(table) == 5 * 2 + 5
    assert table["cell"].unique().tolist() == list(main.ABLATION_CELLS)

    standalone = str(tmp_path / "lam0")
    assert main.main(["train", "--config", tiny_config_file, "--lambda", "0", "--out", standalone]) == 0
    cell = db.query(models.Run).filter(models.Run.cell == "w/o L_tcl", models.Run.seed == 0).one()
    assert read_bytes(os.path.join(cell.out_dir, METRICS_FILE)) == read_bytes(os.path.join(standalone, METRICS_FILE))


def test_sweep_reuses_the_ablation_zero_lambda_run(tiny_config_file, tmp_path, db):
    out = str(tmp_path / "harness")
    main.main(["ablate", "--config", tiny_config_file, "--seeds", "0", "--out", out])
    assert main.main(["sweep-lambda", "--config", tiny_config_file, "--seeds", "0", "--grid", "0.5,0",
                      "--out", out]) == 0
    frame = pd.read_csv(os.path.join(out, "sweep_lambda.csv"))
    assert frame["lambda"].tolist() == [0.0, 0.5]
    db.expire_all()
    assert db.query(models.Run).count() == 5 + 1


def test_summarize_adds_mean_rows():
    runs = [models.Run(cell=c, seed=s, variant="TCL", target_accuracy=a)
            for c, s, a in (("A", 0, 0.5), ("A", 1, 0.7), ("B", 0, 0.9))]
    table = main.summarize(runs)
    means = table[table["seed"] == "mean"]
    assert means["cell"].tolist() == ["A", "B"]
    assert means["tgt_acc"].tolist() == pytest.approx([0.6, 0.9])


def test_inspect_memory_matches_banks(tiny_config_file, tiny_config, tmp_path):
    out = str(tmp_path / "run")
    main.main(["train", "--config", tiny_config_file, "--out", out])
    path = str(tmp_path / "memory.csv")
    assert main.main(["inspect-memory", "--run", out, "--csv", path]) == 0
    frame = pd.read_csv(path)
    assert list(frame.columns[:3]) == ["step", "domain", "label"]
    assert frame.groupby("domain").size().tolist() == [tiny_config.memory_size] * 3
    keys = frame[[f"k_{j}" for j in range(tiny_config.proj_dim)]].to_numpy()
    assert np.allclose(np.linalg.norm(keys, axis=1), 1.0, atol=1e-6)


def test_gate_trend_uses_epoch_end_rows():
    metrics = pd.DataFrame({
        "epoch": [0, 0, 1, 1, 2, 2],
        "gated_fraction": [0.9, 0.0, 0.9, 0.1, 0.9, 0.2],
        "tgt_acc": [np.nan, 0.3, np.nan, 0.4, np.nan, 0.5],
    })
    assert main.gate_trend(metrics) == pytest.approx(0.1)
    assert main.gate_trend(metrics.head(2)) == 0.0


def acceptance_frame(tcl):
    n = len(tcl)
    return pd.DataFrame({"Source Only": [0.5] * n, "TCL": tcl, "w/o L_tar": [0.7] * n, "w/o L_tcl": [0.75] * n,
                         "IDL": [0.6] * n, "ICDL": [0.7] * n, "TCL-SourceCombine": [0.7] * n})


def test_acceptance_checks_allow_one_losing_seed():
    checks = main.acceptance_checks(acceptance_frame([0.8, 0.8, 0.8, 0.8, 0.6]), [0.1, 0.0, -0.1, 0.2, 0.05])
    assert len(checks) == 6
    assert checks["holds"].all(), checks.to_string()


def test_acceptance_checks_report_failures():
    checks = main.acceptance_checks(acceptance_frame([0.8, 0.8, 0.8, 0.6, 0.6]), [-0.1, -0.2, 0.1, 0.1, 0.1])
    holds = dict(zip(checks["check"], checks["holds"]))
    assert holds["TCL beats Source Only"]
    assert not holds["TCL >= w/o L_tar"]
    assert not holds["gated fraction rises"]


def test_acceptance_command_writes_both_tables(tiny_config_file, tmp_path, db):
    out = str(tmp_path / "harness")
    assert main.main(["acceptance", "--config", tiny_config_file, "--seeds", "0", "--out", out]) == 0
    table = pd.read_csv(os.path.join(out, "acceptance.csv"))
    assert table["cell"].unique().tolist() == list(main.ACCEPTANCE_CELLS)
    checks = pd.read_csv(os.path.join(out, "acceptance_checks.csv"))
    assert checks.columns.tolist() == ["check", "holds", "detail"]
    assert len(checks) == 6
    db.expire_all()
    assert db.query(models.Run).count() == len(main.ACCEPTANCE_CELLS)


@pytest.mark.slow
def test_digits5_acceptance_orderings(tmp_path):
    config = os.path.join(os.path.dirname(__file__), "..", "configs", "digits5.conf")
    out = str(tmp_path / "acceptance")
    assert main.main(["acceptance", "--config", config, "--out", out, "--threads", str(os.cpu_count() or 1)]) == 0
    checks = pd.read_csv(os.path.join(out, "acceptance_checks.csv"))
    failed = checks[~checks["holds"].astype(bool)]
    assert failed.empty, failed.to_string(index=False)


def test_gradcheck_command_passes():
    assert main.main(["gradcheck", "--instances", "2"]) == 0


# --- exit codes ---

def test_usage_errors_exit_with_one(tmp_path):
    assert main.main(["bogus"]) == 1
    assert main.main(["train", "--config", str(tmp_path / "missing.conf")]) == 1
    bad = tmp_path / "bad.conf"
    bad.write_text("suite = blobs3\n")
    assert main.main(["train", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1


def test_data_errors_exit_with_two(tmp_path):
    assert main.main(["eval", "--run", str(tmp_path)]) == 2
    assert main.main(["inspect-memory", "--run", str(tmp_path)]) == 2


def test_failed_gradient_check_exits_with_three(monkeypatch):
    def broken(rng, tau):
        x = Tensor(np.array([[0.3, -0.7]]), requires_grad=True, name="x")

        def fn(g):
            doubled = g._apply("double", (x,), lambda v: 2.0 * v, lambda grad, ins, out: (-2.0 * grad,))
            return g.sum(doubled)
        return fn, [x]

    monkeypatch.setattr(main, "GRADCHECK_CASES", {"broken": broken})
    assert main.main(["gradcheck", "--instances", "1"]) == 3
