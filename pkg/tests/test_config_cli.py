import json

import numpy as np
import pytest
import yaml

from mmsn.checkpoint import read_meta
from mmsn.cli import main
from mmsn.config import RunConfig, build_config, json_schema, load_config
from mmsn.data import load_manifest
from mmsn.errors import ConfigError

TINY = {
    "data": {"n_patients": 8, "images_per_patient": 2, "image_size": 96, "fractions": [0.5, 0.25, 0.25]},
    "view": {"image_size": 96, "focal_size": 32, "n_anchor_views": 3, "n_random_masked": 1, "n_focal": 2},
    "model": {"backbone": "vit-test", "head_hidden": [32, 32], "n_proj": 16},
    "loss": {"n_prototypes": 8},
    "pretrain": {"batch_size": 4, "max_steps": 3},
    "eval": {"max_epochs": 1, "batch_size": 8, "n_bootstrap": 100},
    "seed": 0,
}


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def only_dir(root, prefix):
    dirs = sorted(p for p in root.iterdir() if p.name.startswith(prefix))
    assert len(dirs) == 1, dirs
    return dirs[0]


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    assert main(["synth-data", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert main(["pretrain", "--config", str(cfg), "--train", str(root / "data/train.csv"),
                 "--features", "icu", "--out", str(root / "runs")]) == 0
    return root, cfg


# -- config ----------------------------------------------------------------


def test_config_defaults_and_seed_propagation():
    cfg = build_config({"seed": 5})
    assert cfg.pretrain.seed == cfg.eval.seed == cfg.effective_seed == 5
    assert build_config({}).effective_seed == 0
    assert cfg.data.n_patients == 50 and cfg.pretrain.batch_size == 64


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError):
        build_config({"bogus": 1})
    with pytest.raises(ConfigError):
        build_config({"pretrain": {"lr": 1e-3}})


def test_overrides_win_and_deep_merge():
    cfg = build_config({"pretrain": {"batch_size": 8, "max_steps": 5}}, {"pretrain": {"max_steps": 9}})
    assert (cfg.pretrain.batch_size, cfg.pretrain.max_steps) == (8, 9)


def test_env_seed_fallback(monkeypatch):
    monkeypatch.setenv("MMSN_SEED", "7")
    assert build_config({}).effective_seed == 7
    assert build_config({"seed": 3}).effective_seed == 3
    monkeypatch.setenv("MMSN_SEED", "x")
    with pytest.raises(ConfigError):
        build_config({})


def test_digest_and_yaml_round_trip(tmp_path):
    cfg = build_config(TINY)
    path = tmp_path / "c.yaml"
    path.write_text(cfg.to_yaml())
    again = load_config(path)
    assert again == cfg and again.digest() == cfg.digest()
    assert build_config({**TINY, "seed": 1}).digest() != cfg.digest()


def test_schema_published():
    schema = json_schema()
    assert set(schema["properties"]) == {"data", "view", "model", "loss", "pretrain", "eval", "seed"}
    assert schema.get("additionalProperties") is False


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.yaml")


# -- commands --------------------------------------------------------------


def test_synth_data_counts_and_determinism(tmp_path, capsys):
    argv = ["synth-data", "--patients", 50, "--per-patient", 4, "--seed", 1, "--image-size", 96]
    assert run(argv + ["--out", tmp_path / "a"], capsys)[0] == 0
    assert run(argv + ["--out", tmp_path / "b"], capsys)[0] == 0
    csvs = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    assert csvs == ["test.csv", "train.csv", "val.csv"]
    assert sum(len(load_manifest(tmp_path / "a" / c)) for c in csvs) == 200
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_synth_data_invalid_size(tmp_path, capsys):
    code, _, err = run(["synth-data", "--image-size", 64, "--out", tmp_path], capsys)
    assert code == 2 and err.startswith("error: InvalidSize:")


def test_unknown_config_key_exits(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("data:\n  n_patient: 3\n")
    code, _, err = run(["synth-data", "--config", bad, "--out", tmp_path], capsys)
    assert code == 2 and err.startswith("error: ConfigError:")


def test_pretrain_bogus_features(workspace, capsys):
    root, cfg = workspace
    code, _, err = run(["pretrain", "--config", cfg, "--train", root / "data/train.csv",
                        "--features", "bogus", "--out", root / "bogus"], capsys)
    assert code == 2 and err.startswith("error: UnknownFeatureGroup:")
    assert not (root / "bogus").exists()


def test_pretrain_outputs(workspace):
    root, _ = workspace
    run_dir = only_dir(root / "runs", "pretrain-")
    assert run_dir.name.endswith("-s0")
    rows = [json.loads(x) for x in (run_dir / "train_log.jsonl").read_text().splitlines()]
    assert len(rows) == 3
    meta = read_meta(run_dir / "checkpoint.mmsn")
    assert meta["feature_group"] == "icu" and meta["step"] == 3
    assert load_config(run_dir / "config.yaml").pretrain.feature_group == "icu"


def test_pretrain_feature_dims(workspace, capsys):
    root, cfg = workspace
    out = root / "dims"
    for group, dim in [("D+SM+SI", 13), ("none", None)]:
        assert run(["pretrain", "--config", cfg, "--train", root / "data/train.csv", "--features", group,
                    "--max-steps", 1, "--out", out / group.replace("+", "_")], capsys)[0] == 0
        meta = read_meta(only_dir(out / group.replace("+", "_"), "pretrain-") / "checkpoint.mmsn")
        assert meta["n_ehr"] == dim


def test_env_seed_names_run_dir(workspace, capsys, monkeypatch):
    root, _ = workspace
    tree = {k: v for k, v in TINY.items() if k != "seed"}
    cfg = root / "noseed.yaml"
    cfg.write_text(yaml.safe_dump(tree))
    monkeypatch.setenv("MMSN_SEED", "7")
    assert run(["pretrain", "--config", cfg, "--train", root / "data/train.csv", "--max-steps", 1,
                "--out", root / "envseed"], capsys)[0] == 0
    assert only_dir(root / "envseed", "pretrain-").name.endswith("-s7")


def _eval_args(root, cfg, out, *extra):
    ck = only_dir(root / "runs", "pretrain-") / "checkpoint.mmsn"
    d = root / "data"
    return ["--config", cfg, "--checkpoint", ck, "--train", d / "train.csv", "--val", d / "val.csv",
            "--test", d / "test.csv", "--out", out, *extra]


def test_linear_eval_report(workspace, capsys):
    root, cfg = workspace
    code, out, _ = run(["linear-eval", *_eval_args(root, cfg, root / "lin")], capsys)
    assert code == 0 and "linear: 5 runs" in out
    d = only_dir(root / "lin", "eval-")
    report = json.loads((d / "report_linear.json").read_text())
    assert len(report["per_label_auroc"]) == len(report["per_label_auprc"]) == 14
    protocol = json.loads((d / "protocol_linear.json").read_text())
    assert len(protocol["runs"]) == 5 and protocol["n_test_evaluations"] == 1
    assert "| Model |" in (d / "report_linear.md").read_text()
    assert not (d / "report_finetune.json").exists()


def test_eval_defaults_to_both_grids(workspace, capsys):
    root, cfg = workspace
    code, out, _ = run(["eval", *_eval_args(root, cfg, root / "both")], capsys)
    assert code == 0
    d = only_dir(root / "both", "eval-")
    runs = [json.loads((d / f"protocol_{m}.json").read_text())["runs"] for m in ("linear", "finetune")]
    assert [len(r) for r in runs] == [5, 5]


def test_low_data_runs(workspace, capsys):
    root, cfg = workspace
    code, out, _ = run(["finetune", *_eval_args(root, cfg, root / "low", "--low-data", "0.01,0.05,0.10")], capsys)
    assert code == 0
    low = json.loads((only_dir(root / "low", "eval-") / "low_data.json").read_text())
    assert len(low["runs"]) == 15
    for f in (0.01, 0.05, 0.10):
        block = [r for r in low["runs"] if r["fraction"] == f]
        assert len(block) == 5 and sum(r["selected"] for r in block) == 1


def test_compare_adds_p_value(workspace, capsys):
    root, cfg = workspace
    run(["linear-eval", *_eval_args(root, cfg, root / "cmp0")], capsys)
    base = only_dir(root / "cmp0", "eval-") / "report_linear.json"
    assert json.loads(base.read_text())["p_value_vs_reference"] is None
    assert run(["linear-eval", *_eval_args(root, cfg, root / "cmp1", "--compare", base)], capsys)[0] == 0
    d = only_dir(root / "cmp1", "eval-")
    rep = json.loads((d / "report_linear.json").read_text())
    # same checkpoint, same probe: identical scores give p = 1
    assert rep["p_value_vs_reference"] == 1.0
    assert "reference" in (d / "report_linear.md").read_text()


def test_report_command(workspace, capsys, tmp_path):
    root, cfg = workspace
    run(["linear-eval", *_eval_args(root, cfg, root / "rep")], capsys)
    rep = only_dir(root / "rep", "eval-") / "report_linear.json"
    out_md = tmp_path / "t.md"
    code, out, _ = run(["report", f"a={rep}", f"b={rep}", "--reference", "a", "--out", out_md], capsys)
    assert code == 0 and out == out_md.read_text()
    assert "| b |" in out and " - " in out
    code, _, err = run(["report", f"a={rep}", "--reference", "zzz"], capsys)
    assert code == 2 and "ConfigError" in err


def test_embed_with_tsne(workspace, capsys):
    root, cfg = workspace
    assert run(["synth-data", "--config", cfg, "--patients", 30, "--out", root / "data30"], capsys)[0] == 0
    ck = only_dir(root / "runs", "pretrain-") / "checkpoint.mmsn"
    manifest = root / "data30/train.csv"
    Y = load_manifest(manifest).labels()
    n_single = int((Y.sum(1) == 1).sum())
    assert n_single >= 3
    code, _, _ = run(["embed", "--config", cfg, "--checkpoint", ck, "--manifest", manifest, "--tsne",
                      "--out", root / "emb"], capsys)
    assert code == 0
    d = only_dir(root / "emb", "embed-")
    assert np.load(d / "embeddings.npy").shape == (n_single, 32)
    assert len((d / "sample_ids.txt").read_text().split()) == n_single
    assert np.loadtxt(d / "tsne.csv", delimiter=",").shape == (n_single, 2)
    panels = json.loads((d / "panels.json").read_text())["panels"]
    assert len(panels) == 3 and (d / "tsne.png").exists()


def test_embed_without_single_label_samples(workspace, capsys, tmp_path):
    root, cfg = workspace
    m = load_manifest(root / "data/train.csv")
    lines = (root / "data/train.csv").read_text().splitlines()
    header = lines[0].split(",")
    label_cols = [i for i, h in enumerate(header) if h in {"l0", "l1"}]
    assert len(label_cols) == 2
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        for i in label_cols:
            cells[i] = "1"
        rows.append(",".join(cells))
    bad = root / "data/multi.csv"
    bad.write_text("\n".join([lines[0], *rows]) + "\n")
    assert len(load_manifest(bad)) == len(m)
    ck = only_dir(root / "runs", "pretrain-") / "checkpoint.mmsn"
    code, _, err = run(["embed", "--config", cfg, "--checkpoint", ck, "--manifest", bad, "--tsne",
                        "--out", tmp_path], capsys)
    assert code == 2 and err.startswith("error: TooFewSamples:")


def test_schema_command(capsys):
    code, out, _ = run(["schema"], capsys)
    assert code == 0 and json.loads(out) == json.loads(json.dumps(json_schema()))


def test_missing_input_is_io_error(tmp_path, capsys):
    code, _, err = run(["pretrain", "--train", tmp_path / "nope.csv", "--out", tmp_path], capsys)
    assert code == 2 and err.startswith("error:")
