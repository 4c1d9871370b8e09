import json

import pytest

from debias.cli import main


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["generate-data", "--n-per-class", "6", "--seed", "2", "--out", str(out), "--force"]) == 0
    return out


@pytest.fixture(scope="module")
def fast_config(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "fast.toml"
    p.write_text('[train]\narch = "toy3"\ndim = 8\nepochs = 2\nlr = 1e-3\n\n[explain]\nn_samples = 80\n')
    return p


def test_generate_data_writes_pngs(tmp_path):
    out = tmp_path / "d"
    assert main(["generate-data", "--n-per-class", "50", "--image-size", "32", "--out", str(out)]) == 0
    pngs = [p for p in out.rglob("*.png") if p.parent.name != "masks"]
    assert len(pngs) == 250
    man = json.loads((out / "manifest.json").read_text())
    assert len(man["samples"]) == 250
    assert json.loads((out / "run.json").read_text())["tool"] == "debias"


def test_train_requires_data(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--mode", "baseline", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_refuses_to_overwrite(data_dir, capsys):
    assert main(["generate-data", "--n-per-class", "3", "--out", str(data_dir)]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "not empty" in err["message"]


def test_missing_checkpoint_is_reported(tmp_path, data_dir, capsys):
    code = main(["evaluate", "--model", str(tmp_path / "none.ckpt"), "--data", str(data_dir),
                 "--out", str(tmp_path / "e")])
    assert code == 1
    assert json.loads(capsys.readouterr().err.strip())["command"] == "evaluate"


def test_full_pipeline(tmp_path, data_dir, fast_config):
    runs = tmp_path / "runs"
    for mode in ("baseline", "unlearn"):
        out = runs / mode
        assert main(["train", "--config", str(fast_config), "--mode", mode, "--data", str(data_dir),
                     "--out", str(out), "--seed", "1"]) == 0
        for name in ("history.json", "best.ckpt", "final.ckpt", "sanity.json", "run.json"):
            assert (out / name).exists()
        assert main(["evaluate", "--model", str(out / "best.ckpt"), "--data", str(data_dir), "--swap"]) == 0
        rep = json.loads((out / "eval_test" / "report.json").read_text())
        assert {"report", "confusion", "background_swap"} <= set(rep)
        assert (out / "eval_test" / "pca2.csv").read_text().startswith("sample_id,label,pc_1,pc_2")
    assert main(["unlearn", "--config", str(fast_config), "--data", str(data_dir), "--out",
                 str(tmp_path / "alias"), "--epochs", "1"]) == 0
    assert json.loads((tmp_path / "alias" / "history.json").read_text())["mode"] == "unlearn"

    png = next((data_dir / "ship").glob("*.png"))
    assert main(["explain", "--config", str(fast_config), "--model", str(runs / "baseline" / "best.ckpt"),
                 "--image", str(png), "--out", str(tmp_path / "ex"), "--top-k", "4"]) == 0
    w = json.loads((tmp_path / "ex" / "weights.json").read_text())
    assert len(w["weights"]) == 64 and len(w["top_segments"]) <= 4

    diff = runs / "uesf"
    assert main(["diff", "--config", str(fast_config), "--baseline", str(runs / "baseline" / "best.ckpt"),
                 "--unlearned", str(runs / "unlearn" / "best.ckpt"), "--images", str(data_dir),
                 "--limit", "3", "--out", str(diff)]) == 0
    bias = json.loads((diff / "bias_report.json").read_text())
    assert bias["n_images"] == 3
    assert len([p for p in diff.iterdir() if (p / "E_final.png").exists()]) == 3

    assert main(["report", "--run-dir", str(runs)]) == 0
    summary = json.loads((runs / "summary.json").read_text())
    assert set(summary["classification"]) == {"baseline/eval_test", "unlearn/eval_test"}
    assert "uesf" in summary["bias"]
    assert "| **accuracy** |" in (runs / "summary.md").read_text()


def test_bad_config_key(tmp_path, data_dir):
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"learning_rate": 0.1}}')
    assert main(["train", "--config", str(bad), "--mode", "baseline", "--data", str(data_dir),
                 "--out", str(tmp_path / "o")]) == 1
