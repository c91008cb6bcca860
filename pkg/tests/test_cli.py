import json
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest
import yaml

from confound_audit.cli import build_parser, main
from confound_audit.errors import ConfigError, DataError


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "syn"
    assert main(["synth", "--preset", "leak-only", "--n-rows", "2400", "--seed", "3", "--out", str(out)]) == 0
    return out


def _data_args(synth):
    return ["--data", str(synth / "data.csv"), "--schema", str(synth / "schema.yaml")]


def test_parser_lists_subcommands():
    text = build_parser().format_help()
    for name in ("synth", "audit", "match", "fit", "screen", "roc", "report", "features"):
        assert name in text


def test_synth_from_spec_file(tmp_path, synth):
    spec = yaml.safe_load((synth / "spec.yaml").read_text())
    spec["n_patients"] = 100
    path = tmp_path / "spec.yaml"
    path.write_text(yaml.safe_dump(spec))
    assert main(["synth", "--spec", str(path), "--out", str(tmp_path / "o")]) == 0
    data = pd.read_csv(tmp_path / "o" / "data.csv")
    assert data["patient_id"].nunique() == 100


def test_synth_needs_a_source(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path)]) == ConfigError.exit_code
    assert "error:" in capsys.readouterr().err


def test_match_writes_cohort_and_balance(tmp_path, synth):
    assert main(["match", *_data_args(synth), "--level", "pthp", "--seed", "1", "--out", str(tmp_path)]) == 0
    cohort = pd.read_csv(tmp_path / "cohort.csv")
    assert cohort["control_id"].dropna().is_unique
    balance = pd.read_csv(tmp_path / "balance.csv")
    assert set(balance["covariate"]) == {"age", "gender", "scanner"}
    assert not balance["significant_after"].any()


def test_match_random_level(tmp_path, synth):
    assert main(["match", *_data_args(synth), "--level", "random", "--out", str(tmp_path)]) == 0
    assert (pd.read_csv(tmp_path / "cohort.csv")["pair"] >= 0).all()


def test_fit_writes_reloadable_artifact(tmp_path, synth):
    from confound_audit.dataset import impute, load_schema, load_table
    from confound_audit.models import DesignEncoder, LogisticModel, predict_proba

    out = tmp_path / "m.json"
    assert main(["fit", *_data_args(synth), "--predictors", "img,pt", "--k", "4", "--folds", "3",
                 "--boot", "100", "--out", str(out)]) == 0
    art = json.loads(out.read_text())
    assert art["predictors"] == "imgPt"
    assert 0.5 < art["test_auc"] <= 1.0
    enc = DesignEncoder.from_dict(art["encoder"])
    assert enc.columns == art["encoder"]["columns"]
    assert len(art["model"]["coefficients"]) == len(enc.columns)
    assert json.loads(json.dumps(enc.to_dict())) == art["encoder"]
    model = LogisticModel.from_dict(art["model"])
    assert model.to_dict()["coefficients"] == art["model"]["coefficients"]
    ds = impute(load_table(synth / "data.csv", load_schema(synth / "schema.yaml")), [])
    p = predict_proba(model, enc.transform(ds))
    assert p.shape == (len(ds),) and np.all((p > 0) & (p < 1))


def test_fit_rejects_target_among_predictors(tmp_path, synth):
    assert main(["fit", *_data_args(synth), "--predictors", "hp", "--target", "scanner",
                 "--out", str(tmp_path / "m.json")]) == ConfigError.exit_code


def test_screen_binary_and_continuous(tmp_path, synth):
    out = tmp_path / "s.csv"
    assert main(["screen", *_data_args(synth), "--kind", "binary", "--boot", "100", "--out", str(out)]) == 0
    table = pd.read_csv(out)
    assert table.set_index("target").loc["scanner", "auc"] > 0.9
    assert main(["screen", *_data_args(synth), "--kind", "continuous", "--out", str(out)]) == 0
    assert list(pd.read_csv(out)["target"]) == ["age"]


def test_roc_command(tmp_path):
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 200)
    s = rng.normal(size=200) + y
    np.savetxt(tmp_path / "s.txt", s)
    pd.DataFrame({"row_id": range(200), "label": y}).to_csv(tmp_path / "l.csv", index=False)
    out = tmp_path / "roc"
    assert main(["roc", "--scores", str(tmp_path / "s.txt"), "--labels", str(tmp_path / "l.csv"),
                 "--boot", "200", "--seed", "2", "--out", str(out)]) == 0
    payload = json.loads((out / "roc.json").read_text())
    for key in ("auc", "ci_low", "ci_high", "auprc", "threshold", "sensitivity", "specificity", "tp", "fp"):
        assert key in payload
    assert payload["tp"] + payload["fn"] == int(y.sum())
    assert (out / "roc_curve.csv").is_file() and (out / "prc_curve.csv").is_file()


def test_roc_length_mismatch(tmp_path):
    np.savetxt(tmp_path / "s.txt", np.zeros(5))
    np.savetxt(tmp_path / "l.txt", np.zeros(4))
    assert main(["roc", "--scores", str(tmp_path / "s.txt"), "--labels", str(tmp_path / "l.txt"),
                 "--out", str(tmp_path / "o")]) == DataError.exit_code


def test_missing_data_file_is_data_error(tmp_path, synth):
    assert main(["match", "--data", str(tmp_path / "nope.csv"), "--schema", str(synth / "schema.yaml"),
                 "--level", "pt", "--out", str(tmp_path)]) == DataError.exit_code


def test_audit_and_report_commands(tmp_path, synth):
    cfg = tmp_path / "audit.yaml"
    cfg.write_text(yaml.safe_dump({"data": str(synth / "data.csv"), "schema": str(synth / "schema.yaml"),
                                   "output": "out", "bootstrap": 100, "n_folds": 3, "pca": {"k": 4}}))
    assert main(["audit", "--config", str(cfg), "--plots", "fig3"]) == 0
    assert (tmp_path / "out" / "plots" / "fig3_summary.csv").is_file()
    assert main(["report", "--report", str(tmp_path / "out" / "report.json"), "--figure", "fig4", "fig2a",
                 "--out", str(tmp_path / "plots")]) == 0
    assert (tmp_path / "plots" / "fig4_summary.csv").is_file()
    assert (tmp_path / "plots" / "fig2a_predictability.csv").is_file()


def test_audit_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("data: [unclosed\n")
    assert main(["audit", "--config", str(cfg)]) == ConfigError.exit_code
    cfg.write_text(yaml.safe_dump({"data": "x.csv", "schema": "y.yaml"}))
    assert main(["audit", "--config", str(cfg)]) == ConfigError.exit_code


def test_features_pca_and_tsne(tmp_path, synth):
    out = tmp_path / "pca.csv"
    assert main(["features", "pca", *_data_args(synth), "--k", "3", "--out", str(out)]) == 0
    assert list(pd.read_csv(out).columns) == ["row_id", "pc1", "pc2", "pc3"]
    rng = np.random.default_rng(0)
    pd.DataFrame(rng.normal(size=(60, 5)), index=[f"x{i}" for i in range(60)]).to_csv(tmp_path / "m.csv")
    out = tmp_path / "t.tsv"
    assert main(["features", "tsne", "--matrix", str(tmp_path / "m.csv"), "--perplexity", "10", "--iters", "250",
                 "--delimiter", "\t", "--out", str(out)]) == 0
    emb = pd.read_csv(out, sep="\t")
    assert emb.shape == (60, 3)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "confound_audit", "--version"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "confound-audit" in res.stdout
