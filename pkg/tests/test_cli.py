import hashlib
import json

import numpy as np
import pytest

from phyloproto import checkpoint as ckpt
from phyloproto.cli import main
from phyloproto.pnm import read_pgm_bytes

TINY_MODEL = {
    "beta": 2,
    "extractor": [{"kernel": 3, "stride": 4, "channels": 4}],
    "pretrain_epochs": 1,
    "main_epochs": 1,
    "mask_epochs": 1,
    "batch_size": 16,
}


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _config(path, data, holdout=(), **model):
    path.write_text(json.dumps({"data": str(data), "model": {**TINY_MODEL, **model}, "holdout": list(holdout)}))
    return path


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--tree", "default", "--out", str(out), "--per-leaf", "4", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    root = tmp_path_factory.mktemp("run")
    cfg = _config(root / "cfg.json", dataset, holdout=["H"])
    assert main(["train", "--config", str(cfg), "--out", str(root / "a")]) == 0
    return root


def test_gen_data_deterministic(tmp_path, dataset):
    out = tmp_path / "again"
    assert main(["gen-data", "--tree", "default", "--out", str(out), "--per-leaf", "4", "--seed", "3"]) == 0
    assert _tree_digest(out) == _tree_digest(dataset)
    assert len(list((out / "images").glob("*.ppm"))) == 32


def test_gen_data_omission_recorded(tmp_path):
    out = tmp_path / "d"
    assert main(["gen-data", "--tree", "default", "--out", str(out), "--per-leaf", "1", "--no-common-at", "node2"]) == 0
    raw = json.loads((out / "manifest.json").read_text())
    assert raw["omitted"] == ["node2"] and "node2" not in raw["traits"]


def test_gen_data_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--out", str(tmp_path / "x")])
    assert exc.value.code == 2
    assert main(["gen-data", "--tree", "default", "--out", str(tmp_path / "y"), "--no-common-at", "Z"]) == 2
    assert main(["gen-data", "--tree", str(tmp_path / "none.nwk"), "--out", str(tmp_path / "z")]) == 3


def test_train_outputs(trained):
    out = trained / "a"
    for name in ("config.json", "losses.jsonl", "metrics.json", "checkpoint.ppck"):
        assert (out / name).exists(), name
    lines = (out / "losses.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [1, 2, 3]
    metrics = json.loads((out / "metrics.json").read_text())
    assert 0.0 <= metrics["accuracy"] <= 1.0


def test_zero_epochs_train(tmp_path, dataset):
    cfg = _config(tmp_path / "cfg.json", dataset, pretrain_epochs=0, main_epochs=0, mask_epochs=0)
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "losses.jsonl").read_text() == ""
    _, meta = ckpt.load_model(tmp_path / "o" / "checkpoint.ppck")
    assert meta["epoch"] == 0


def test_train_rejects_bad_config(tmp_path, dataset):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"data": str(dataset), "model": {"betta": 1}}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["train", "--config", str(_config(tmp_path / "h.json", dataset, holdout=["Q"])), "--out", str(tmp_path / "p")]) == 2


def test_identical_runs_identical_metrics(trained, dataset):
    assert main(["train", "--config", str(trained / "cfg.json"), "--out", str(trained / "b")]) == 0
    for name in ("metrics.json", "losses.jsonl", "checkpoint.ppck"):
        assert (trained / "a" / name).read_bytes() == (trained / "b" / name).read_bytes(), name


def test_resume_finishes_like_uninterrupted(trained, dataset):
    short = _config(trained / "short.json", dataset, holdout=["H"], mask_epochs=0)
    out = trained / "c"
    assert main(["train", "--config", str(short), "--out", str(out)]) == 0
    # the epoch counts are part of the config, so a resumed run must use the full one
    assert main(["train", "--config", str(short), "--out", str(out), "--resume"]) == 0
    assert main(["train", "--config", str(trained / "cfg.json"), "--out", str(out), "--resume"]) == 5


def test_eval_and_holdout(trained, dataset):
    ck = str(trained / "a" / "checkpoint.ppck")
    out = trained / "ev"
    assert main(["eval", "--checkpoint", ck, "--data", str(dataset), "--out", str(out)]) == 0
    assert "accuracy" in json.loads((out / "metrics.json").read_text())
    assert main(["eval", "--checkpoint", ck, "--data", str(dataset), "--out", str(out), "--holdout", "H"]) == 0
    unseen = json.loads((out / "metrics.json").read_text())
    assert unseen["true_parent"] == "node12" and 0.0 <= unseen["unseen_accuracy"] <= 1.0
    assert main(["eval", "--checkpoint", ck, "--data", str(dataset), "--out", str(out), "--holdout", "A"]) == 5
    assert main(["eval", "--checkpoint", ck, "--data", str(dataset), "--out", str(out), "--holdout", "Q"]) == 2


def test_tree_mismatch(tmp_path, trained):
    nwk = tmp_path / "t.nwk"
    nwk.write_text("((A,B),(C,D));")
    other = tmp_path / "other"
    assert main(["gen-data", "--tree", str(nwk), "--out", str(other), "--per-leaf", "2"]) == 0
    ck = str(trained / "a" / "checkpoint.ppck")
    for cmd in ("eval", "purity", "mask-report"):
        assert main([cmd, "--checkpoint", ck, "--data", str(other), "--out", str(tmp_path / "o")]) == 5


def test_purity_and_mask_report(trained, dataset):
    ck = str(trained / "a" / "checkpoint.ppck")
    out = trained / "pr"
    assert main(["purity", "--checkpoint", ck, "--data", str(dataset), "--out", str(out), "--top-k", "1"]) == 0
    rep = json.loads((out / "purity.json").read_text())
    assert rep["prototypes"] and all("child_label" in r for r in rep["prototypes"])
    assert main(["mask-report", "--checkpoint", ck, "--data", str(dataset), "--out", str(out), "--top-k", "1"]) == 0
    rows = (out / "mask.csv").read_text().splitlines()
    assert rows[0] == "node_id,prototype_id,child_name,O_score,M_value,masked"
    assert len(rows) == 1 + 2 * 2 * 7


def test_viz_uniform_map_is_constant(tmp_path, trained, dataset):
    model, meta = ckpt.load_model(trained / "a" / "checkpoint.ppck")
    head = model.heads[model.tree.root]
    head.prototypes.data[:] = head.prototypes.data[0]
    flat = tmp_path / "flat.ppck"
    ckpt.save_model(flat, model, meta)
    image = sorted((dataset / "images").glob("*.ppm"))[0]
    assert main(["viz", "--checkpoint", str(flat), "--image", str(image), "--node", "0", "--proto", "1"]) == 0
    pgm = read_pgm_bytes(tmp_path / "heatmaps" / "node0_proto1_img0.pgm")
    assert pgm.shape == (52, 52) and np.unique(pgm).size == 1


def test_viz_usage_errors(tmp_path, trained, dataset):
    ck = str(trained / "a" / "checkpoint.ppck")
    image = str(sorted((dataset / "images").glob("*.ppm"))[0])
    base = ["viz", "--checkpoint", ck, "--image", image, "--out", str(tmp_path)]
    assert main(base + ["--node", "A", "--proto", "0"]) == 2
    assert main(base + ["--node", "0", "--proto", "4"]) == 2
    assert main(base[:4] + [str(tmp_path / "none.ppm"), "--out", str(tmp_path), "--node", "0", "--proto", "0"]) == 3
