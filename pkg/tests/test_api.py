# tests/test_api.py
from app.services.utils.corpus import document_to_dict


def test_root(client):
    resp = client.get("/")
    assert resp.status_code == 200
    assert resp.json()["docs"] == "/docs"


def test_schema(client, ace_schema):
    resp = client.get("/schema")
    assert resp.status_code == 200
    data = resp.json()
    assert data["event_types"][0] == "NONE"
    assert len(data["event_types"]) == ace_schema.n_events
    assert len(data["fingerprint"]) == 64


def test_schema_missing_file(client, monkeypatch, tmp_path):
    import app.api.endpoints.schema as endpoint

    monkeypatch.setattr(endpoint.settings, "SCHEMA_PATH", str(tmp_path / "nope.json"))
    resp = client.get("/schema")
    assert resp.status_code == 500


def test_extract_happy_path(client, patch_bundle, synth_corpus):
    docs = [document_to_dict(d) for d in synth_corpus["dev"][:2]]
    resp = client.post("/extract", json={"documents": docs, "mode": "joint"})
    assert resp.status_code == 200
    data = resp.json()
    assert [d["doc_id"] for d in data["documents"]] == ["dev-0000", "dev-0001"]
    assert {row["mode"] for row in data["status"]} == {"joint"}


def test_extract_default_mode(client, patch_bundle, attack_doc):
    resp = client.post("/extract", json={"documents": [document_to_dict(attack_doc)]})
    assert resp.status_code == 200
    assert resp.json()["status"][0]["mode"] == patch_bundle.config.decode_mode


def test_extract_bad_document(client, patch_bundle):
    resp = client.post("/extract", json={"documents": [{"doc_id": "x", "sentences": [[{"surface": "a"}]],
                                                        "gold_entities": [{"type": "PER", "span": {"sentence": 0,
                                                                      "start": 0, "end": 5}}]}]})
    assert resp.status_code == 422


def test_extract_unknown_mode(client, patch_bundle, attack_doc):
    resp = client.post("/extract", json={"documents": [document_to_dict(attack_doc)], "mode": "greedy"})
    assert resp.status_code == 422
    assert "greedy" in resp.json()["detail"]


def test_extract_missing_body(client, patch_bundle):
    assert client.post("/extract", json={}).status_code == 422


def test_extract_bundle_failure_raises_500(client, monkeypatch):
    import app.api.endpoints.extract as extract

    def boom(path):
        raise RuntimeError("kaboom")

    monkeypatch.setattr(extract.bundle_cache, "get", boom)
    resp = client.post("/extract", json={"documents": []})
    assert resp.status_code == 500
    assert "kaboom" in resp.json()["detail"]


def test_evaluate(client, attack_doc):
    doc = document_to_dict(attack_doc)
    resp = client.post("/evaluate", json={"gold": [doc], "predicted": [doc]})
    assert resp.status_code == 200
    data = resp.json()
    assert data["tasks"]["argument_classification"]["f1"] == 1.0
    assert data["errors"]["entity"] == {"missing": 0, "spurious": 0, "misclassified": 0}


def test_evaluate_misaligned(client, attack_doc):
    doc = document_to_dict(attack_doc)
    other = {**doc, "doc_id": "other"}
    resp = client.post("/evaluate", json={"gold": [doc], "predicted": [other]})
    assert resp.status_code == 422
