import json

import pytest

from drprobe import toy
from drprobe.cli import build_parser, main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-toy", "--out", str(root), "--queries", "40", "--dev-queries", "20",
                 "--hidden", "16", "--layers", "2", "--zero-negative-every", "10"]) == 0
    assert main(["build-dataset", "--input", str(root / "corpus/train.json"),
                 "--test-input", str(root / "corpus/dev.json"), "--ratio", "0.8", "--out", str(root / "data")]) == 0
    return root


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["--help"])
    out = capsys.readouterr().out
    for cmd in ("build-dataset", "embed", "train-probe", "significance", "attribute", "report"):
        assert cmd in out


def test_build_manifest(workspace):
    m = json.loads((workspace / "data/build_manifest.json").read_text())
    assert m["removed_count"] == 4 and m["train"] + m["validation"] == 36 and m["test"] == 20


def test_bad_corpus_reports_error(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps([{"question": "q"}]))
    rc = main(["build-dataset", "--input", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")])
    assert rc != 0
    assert "positive_ctxs" in capsys.readouterr().err


def test_embed_train_attribute(workspace, tmp_path):
    model = str(workspace / "models/backbone")
    assert main(["embed", "--model", model, "--model-id", "b", "--pooling", "mean", "--layers", "2",
                 "--input", str(workspace / "data/instances.jsonl"), "--cache", str(tmp_path / "cache")]) == 0
    manifest = json.loads(next((tmp_path / "cache").glob("*.manifest.json")).read_text())
    assert manifest["layers"] == [2]
    assert main(["train-probe", "--query-cache", str(tmp_path / "cache"), "--passage-cache", str(tmp_path / "cache"),
                 "--variants", str(workspace / "data"), "--N", "2", "--out", str(tmp_path / "res"),
                 "--lr", "1e-2", "--batch-size", "16", "--max-epochs", "3"]) == 0
    assert (tmp_path / "res/results.csv").read_text().count("\n") == 2
    args = ["attribute", "--model", model, "--model-id", "b", "--pooling", "mean",
            "--input", str(workspace / "data/instances.jsonl"), "--field", "query", "--split", "test",
            "--limit", "3", "--n-steps", "2", "--out", str(tmp_path / "att")]
    assert main(args) == 0
    assert main(args[:-4] + ["--limit", "5", "--out", str(tmp_path / "att")]) == 0  # resumes
    meta = json.loads((tmp_path / "att/manifest.json").read_text())
    assert meta["examples"] == 5


def test_first_token_on_decoder_rejected(tmp_path, capsys):
    records = toy.synthetic_dpr_corpus(5, 0)
    toy.save_toy_pair(tmp_path / "m", records, "decoder_only", hidden=16, layers=1)
    (tmp_path / "t.jsonl").write_text(json.dumps({"text": records[0]["question"]}) + "\n")
    rc = main(["embed", "--model", str(tmp_path / "m/backbone"), "--pooling", "first_token",
               "--input", str(tmp_path / "t.jsonl"), "--cache", str(tmp_path / "c")])
    assert rc != 0
    assert "decoder" in capsys.readouterr().err
