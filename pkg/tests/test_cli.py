# tests/test_cli.py
import json

import pytest

from app.cli import EXIT_DATA, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE, cli_main
from app.services.utils.schema import save_schema
from conftest import fast_config


@pytest.fixture
def workspace(tmp_path, tiny_schema):
    schema = tmp_path / "schema.json"
    save_schema(tiny_schema, schema)
    config = tmp_path / "config.json"
    config.write_text(fast_config().model_dump_json(), encoding="utf-8")
    return tmp_path, str(schema), str(config)


def test_gen_synth(workspace):
    tmp, schema, _ = workspace
    out = tmp / "synth"
    assert cli_main(["gen-synth", "--seed", "3", "--sizes", "4,2,1", "--out-dir", str(out), "--schema", schema]) == 0
    assert len((out / "train.jsonl").read_text().splitlines()) == 4
    assert (out / "schema.json").exists()


@pytest.mark.parametrize("sizes", ["4,2", "a,b,c", "4,-1,1"])
def test_gen_synth_bad_sizes(workspace, sizes):
    tmp, schema, _ = workspace
    code = cli_main(["gen-synth", "--sizes", sizes, "--out-dir", str(tmp / "x"), "--schema", schema])
    assert code == EXIT_USAGE


def test_unknown_command():
    assert cli_main(["fly"]) == EXIT_USAGE


def test_train_predict_evaluate_trace(workspace):
    tmp, schema, config = workspace
    synth = tmp / "synth"
    assert cli_main(["gen-synth", "--seed", "7", "--sizes", "10,3,2", "--out-dir", str(synth),
                     "--schema", schema]) == EXIT_OK
    bundle = tmp / "bundle.json"
    assert cli_main(["train", "--corpus", str(synth / "train.jsonl"), "--schema", schema,
                     "--config", config, "--out", str(bundle)]) == EXIT_OK
    assert json.loads(bundle.read_text())["format"] == "joint-ie-bundle"

    pred = tmp / "pred.jsonl"
    assert cli_main(["predict", "--bundle", str(bundle), "--corpus", str(synth / "dev.jsonl"),
                     "--out", str(pred), "--mode", "joint_no_pairs"]) == EXIT_OK
    assert len(pred.read_text().splitlines()) == 3
    pred_again = tmp / "pred_again.jsonl"
    assert cli_main(["predict", "--bundle", str(bundle), "--corpus", str(synth / "dev.jsonl"),
                     "--out", str(pred_again), "--mode", "joint_no_pairs"]) == EXIT_OK
    assert pred_again.read_bytes() == pred.read_bytes()
    status = (tmp / "pred.jsonl.status.tsv").read_text().splitlines()
    assert status[0].split("\t")[:3] == ["doc_id", "mode", "status"]
    assert len(status) == 4

    report = tmp / "report.json"
    assert cli_main(["evaluate", "--gold", str(synth / "dev.jsonl"), "--pred", str(pred),
                     "--report", str(report), "--schema", schema]) == EXIT_OK
    data = json.loads(report.read_text())
    assert set(data["tasks"]) == {"trigger_identification", "trigger_classification", "argument_identification",
                                  "argument_classification", "entity"}

    trace = tmp / "trace.tsv"
    assert cli_main(["decode-trace", "--bundle", str(bundle), "--doc", str(synth / "dev.jsonl"),
                     "--doc-id", "dev-0001", "--out", str(trace)]) == EXIT_OK
    assert trace.read_text().splitlines()[0].startswith("iteration\tdual")
    assert cli_main(["decode-trace", "--bundle", str(bundle), "--doc", str(synth / "dev.jsonl"),
                     "--doc-id", "nope"]) == EXIT_USAGE


def test_train_on_bad_corpus(workspace):
    tmp, schema, config = workspace
    corpus = tmp / "bad.jsonl"
    corpus.write_text('{"doc_id": "a", "sentences": []}\nnot json\n', encoding="utf-8")
    code = cli_main(["train", "--corpus", str(corpus), "--schema", schema, "--config", config,
                     "--out", str(tmp / "b.json")])
    assert code == EXIT_DATA


def test_bad_config_is_a_data_error(workspace):
    tmp, schema, _ = workspace
    config = tmp / "bad_config.json"
    config.write_text('{"decode_mode": "greedy"}', encoding="utf-8")
    code = cli_main(["train", "--corpus", str(tmp / "missing.jsonl"), "--schema", schema, "--config", str(config),
                     "--out", str(tmp / "b.json")])
    assert code == EXIT_DATA


def test_predict_with_missing_bundle(workspace):
    tmp, _, _ = workspace
    code = cli_main(["predict", "--bundle", str(tmp / "none.json"), "--corpus", str(tmp / "c.jsonl"),
                     "--out", str(tmp / "p.jsonl")])
    assert code == EXIT_DATA


def test_check_gradients(workspace):
    _, schema, config = workspace
    assert cli_main(["check-gradients", "--model", "pair", "--schema", schema, "--config", config]) == EXIT_OK
    code = cli_main(["check-gradients", "--model", "crf", "--schema", schema, "--config", config,
                     "--tolerance", "0"])
    assert code == EXIT_NUMERICAL
