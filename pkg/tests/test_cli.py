import json

import pytest

from cpm import data as skel
from cpm.cli import dispatch, parse_overrides
from cpm.evaluation import read_embeddings
from cpm.trainer import ConfigError

TINY = ["--set", "epochs=3", "--set", "stage_switch_epoch=2", "--set", "batch_size=6", "--set", "queue_size=20",
        "--set", "k=3", "--set", "warmup_epochs=1", "--set", "precision=64", "--set", "checkpoint_every=1",
        "--set", "augment.output_length=16", "--set", "encoder.widths=[4,6]",
        "--set", "encoder.projector_hidden=8", "--set", "encoder.projector_out=5"]


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert dispatch(["synth", "--classes", "3", "--per-class", "8", "--frames", "16", "--seed", "1",
                     "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def pretrained(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert dispatch(["pretrain", "--data", str(dataset_dir / "manifest.json"), "--out", str(out)] + TINY) == 0
    return out


def test_synth_writes_loadable_dataset(dataset_dir):
    ds = skel.load_dataset(dataset_dir / "manifest.json")
    assert len(ds.sequences) == 24 and ds.num_classes == 3
    echo = json.loads((dataset_dir / "command.json").read_text())
    assert echo["verb"] == "synth" and echo["generator"]["num_frames"] == 16


def test_parse_overrides():
    assert parse_overrides(["k=4", "name=abc", "widths=[1,2]"]) == {"k": 4, "name": "abc", "widths": [1, 2]}
    with pytest.raises(ConfigError):
        parse_overrides(["novalue"])


def test_unknown_verb_and_key_exit_2(tmp_path, capsys):
    assert dispatch(["frobnicate"]) == 2
    assert dispatch(["pretrain", "--out", str(tmp_path), "--set", "not_a_key=1"]) == 2
    assert dispatch(["eval-linear", "--out", str(tmp_path), "--set", "eval.bogus=1"]) == 2
    assert dispatch(["pretrain", "--out", str(tmp_path), "--set", "stage_switch_epoch=999"]) == 2


def test_missing_file_exits_1(tmp_path):
    assert dispatch(["eval-linear", "--data", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 1


def test_pretrain_outputs(pretrained):
    names = {p.name for p in pretrained.iterdir()}
    assert {"config.json", "command.json", "metrics.jsonl", "metrics.csv", "loss.png", "final.cpmp"} <= names
    echo = json.loads((pretrained / "command.json").read_text())
    assert echo["config"]["k"] == 3 and echo["config"]["encoder"]["widths"] == [4, 6]
    rows = (pretrained / "metrics.csv").read_text().splitlines()
    assert rows[0].startswith("step,epoch,stage") and len(rows) > 1


def test_eval_and_export(pretrained, dataset_dir, tmp_path):
    data = ["--data", str(dataset_dir / "manifest.json")]
    ck = ["--checkpoint", str(pretrained / "final.cpmp")]
    assert dispatch(["eval-linear", *data, *ck, "--epochs", "3", "--out", str(tmp_path / "lin")]) == 0
    rep = json.loads((tmp_path / "lin" / "report.json").read_text())
    assert rep["protocol"] == "linear" and rep["config"]["epochs"] == 3
    assert (tmp_path / "lin" / "per_class.csv").exists()
    assert dispatch(["eval-finetune", *data, *ck, "--epochs", "1", "--out", str(tmp_path / "ft")]) == 0
    assert dispatch(["export-embeddings", *data, *ck, "--split", "test", "--out", str(tmp_path / "e.embd")]) == 0
    ids, _, vecs = read_embeddings(tmp_path / "e.embd")
    assert len(ids) == 6 and vecs.shape[1] == 6


def test_mine_precision_over_run(pretrained, dataset_dir, tmp_path):
    assert dispatch(["mine-precision", "--data", str(dataset_dir / "manifest.json"), "--run-dir", str(pretrained),
                     "-k", "2", "--queue-size", "12", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "precision.csv").read_text().splitlines()
    assert len(rows) == 1 + 3
    assert (tmp_path / "precision.png").exists()


def test_ablate_small(dataset_dir, tmp_path):
    args = ["ablate", "--data", str(dataset_dir / "manifest.json"), "--param", "K", "--values", "1,2",
            "--seeds", "0", "--set", "eval.epochs=2", "--out", str(tmp_path)] + TINY
    assert dispatch(args) == 0
    rows = (tmp_path / "summary.csv").read_text().splitlines()
    assert len(rows) == 3 and (tmp_path / "sweep.png").exists()


def test_gradcheck_exit_0(capsys):
    assert dispatch(["gradcheck", "--points", "2"]) == 0
    assert "FAIL" not in capsys.readouterr().out
