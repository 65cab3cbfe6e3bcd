# tests/test_evaluation.py
import pytest

from app.core.errors import CorpusError
from app.services.evaluation_service import evaluate, score_entities, score_events
from app.services.utils.corpus import Argument, EntityMention, EventMention, Span
from conftest import make_doc

WORDS = (("The", "army", "attacked", "Baghdad", "and", "killed", "two", "soldiers", "and", "died", "."),)


def gold_doc():
    entities = (
        EntityMention(Span(0, 0, 2, 1), "ORG"),
        EntityMention(Span(0, 3, 4), "GPE"),
        EntityMention(Span(0, 6, 8, 7), "PER"),
        EntityMention(Span(0, 10, 11), "PER"),
    )
    events = (
        EventMention(Span(0, 2, 3), "ATTACK", (Argument(0, "ATTACKER"), Argument(1, "PLACE"))),
        EventMention(Span(0, 5, 6), "DIE", (Argument(2, "VICTIM"),)),
        EventMention(Span(0, 9, 10), "DIE"),
    )
    return make_doc("e1", WORDS, entities, events)


def predicted_doc():
    entities = (
        EntityMention(Span(0, 0, 2, 1), "ORG"),
        EntityMention(Span(0, 3, 4), "GPE"),
        EntityMention(Span(0, 7, 8), "PER"),  # same head as the gold "two soldiers"
        EntityMention(Span(0, 10, 11), "GPE"),  # right head, wrong type
        EntityMention(Span(0, 4, 5), "PER"),  # spurious
    )
    events = (
        EventMention(Span(0, 2, 3), "ATTACK", (Argument(0, "TARGET"), Argument(1, "PLACE"))),
        EventMention(Span(0, 5, 6), "ATTACK", (Argument(2, "TARGET"),)),
    )
    return make_doc("e1", WORDS, entities, events)


def test_trigger_scores():
    report = score_events([gold_doc()], [predicted_doc()])
    ident = report.tasks["trigger_identification"]
    cls = report.tasks["trigger_classification"]
    assert ident.precision == pytest.approx(1.0)
    assert ident.recall == pytest.approx(2 / 3)
    assert cls.precision == pytest.approx(0.5)
    assert cls.recall == pytest.approx(1 / 3)
    assert report.errors["trigger"].to_dict() == {"missing": 1, "spurious": 0, "misclassified": 1}


def test_argument_scores_need_matching_event_type():
    report = score_events([gold_doc()], [predicted_doc()])
    ident = report.tasks["argument_identification"]
    cls = report.tasks["argument_classification"]
    # the argument of the mistyped DIE trigger cannot match
    assert (ident.correct, ident.predicted, ident.gold) == (2, 3, 3)
    assert (cls.correct, cls.predicted, cls.gold) == (1, 3, 3)


def test_entity_scores_match_on_head():
    report = score_entities([gold_doc()], [predicted_doc()])
    ent = report.tasks["entity"]
    assert ent.precision == pytest.approx(0.6)
    assert ent.recall == pytest.approx(0.75)
    assert report.errors["entity"].to_dict() == {"missing": 0, "spurious": 1, "misclassified": 1}
    assert report.per_entity_type["GPE"].correct == 1
    assert report.per_entity_type["GPE"].predicted == 2


def test_perfect_prediction():
    report = evaluate([gold_doc()], [gold_doc()])
    for name in report.tasks:
        assert report.f1(name) == pytest.approx(1.0)


def test_empty_prediction_flags_undefined_precision(caplog):
    empty = make_doc("e1", WORDS)
    report = evaluate([gold_doc()], [empty])
    trig = report.tasks["trigger_identification"]
    assert trig.undefined_precision
    assert trig.precision == 0.0
    assert report.f1("entity") == 0.0
    assert "no predictions" in caplog.text


def test_report_frames_and_dict():
    report = evaluate([gold_doc()], [predicted_doc()])
    frame = report.summary_frame()
    assert frame["task"].tolist() == ["trigger_identification", "trigger_classification",
                                      "argument_identification", "argument_classification", "entity"]
    data = report.to_dict()
    assert data["n_documents"] == 1
    assert data["tasks"]["entity"]["precision"] == pytest.approx(0.6)
    breakdown = report.breakdown_frame()
    assert set(breakdown["group"]) == {"entity_type", "event_type"}


def test_documents_must_align():
    with pytest.raises(CorpusError):
        evaluate([gold_doc()], [make_doc("other", WORDS)])
    with pytest.raises(CorpusError):
        evaluate([gold_doc(), gold_doc()], [gold_doc(), gold_doc()])
