import json

import httpx
import pytest

from app.backend.judge import (
    CHEST_CATEGORIES,
    JudgeParseError,
    RuleBasedJudgeClient,
    build_client,
    build_judge_prompt,
    judge_evaluate,
    judge_many,
    parse_judgement,
)
from app.backend.llm_client import HttpLLMClient, LLMResponseError, StaticMockClient

REFERENCE = "There is a 8 mm nodule in the left upper region. No pleural effusion. No consolidation. No cardiomegaly."


def test_four_chest_categories():
    assert CHEST_CATEGORIES == ("Presence", "Location", "Severity", "Hallucination")


def test_prompt_contains_both_reports():
    prompt = build_judge_prompt("generated text", "reference text", "Presence")
    assert "generated text" in prompt.text and "reference text" in prompt.text
    assert "{generated}" not in prompt.text
    rectal = build_judge_prompt("g", "r", "t_stage")
    assert "T stage" in rectal.text
    with pytest.raises(ValueError):
        build_judge_prompt("g", "r", "Colour")


def test_parse_judgement_is_strict():
    assert parse_judgement(" 1\n") == 1
    assert parse_judgement("0") == 0
    with pytest.raises(JudgeParseError):
        parse_judgement("maybe")
    with pytest.raises(JudgeParseError):
        parse_judgement("1.")


def test_static_mock_scores():
    assert judge_evaluate("a", "b", "Presence", StaticMockClient("1")) == 1
    with pytest.raises(JudgeParseError):
        judge_evaluate("a", "b", "Presence", StaticMockClient("maybe"))


def test_http_client_round_trip():
    seen = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(json.loads(request.content))
        assert request.headers["Authorization"] == "Bearer secret"
        return httpx.Response(200, json={"text": "0"})

    client = HttpLLMClient("http://judge.test/complete", "secret", transport=httpx.MockTransport(handler))
    assert judge_evaluate("gen", REFERENCE, "Severity", client) == 0
    assert "Category: Severity." in seen[0]["prompt"]


def test_http_client_retries_twice_then_raises():
    calls = []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(request)
        return httpx.Response(503)

    client = HttpLLMClient("http://judge.test/complete", transport=httpx.MockTransport(handler))
    with pytest.raises(httpx.HTTPError):
        judge_evaluate("gen", REFERENCE, "Presence", client)
    assert len(calls) == 3


def test_http_client_recovers_after_one_failure():
    calls = []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(request)
        if len(calls) == 1:
            return httpx.Response(500)
        return httpx.Response(200, json={"text": "1"})

    client = HttpLLMClient("http://judge.test/complete", transport=httpx.MockTransport(handler))
    assert judge_evaluate("gen", REFERENCE, "Presence", client) == 1
    assert len(calls) == 2


def test_http_client_needs_endpoint():
    with pytest.raises(ValueError):
        HttpLLMClient("")
    with pytest.raises(ValueError):
        build_client("carrier-pigeon")


def test_judge_many_skips_and_counts_parse_errors():
    answers = iter(["1", "garbage", "0", "1"])
    client = StaticMockClient(responder=lambda prompt: next(answers))
    summary = judge_many([("g1", "r1"), ("g2", "r2")], ("Presence", "Location"), client, max_in_flight=1)
    assert summary.scores == [{"Presence": 1, "Location": None}, {"Presence": 0, "Location": 1}]
    assert summary.parse_errors == {"Presence": 0, "Location": 1}
    assert summary.averages == {"Presence": 0.5, "Location": 1.0}


@pytest.mark.parametrize("response", [
    httpx.Response(200, json={"answer": "1"}),
    httpx.Response(200, json={"text": 1}),
    httpx.Response(200, json=["1"]),
    httpx.Response(200, text="1"),
])
def test_malformed_http_bodies_are_skipped_and_counted(response):
    """A body without a text string fails that sample only; the other samples still score."""
    calls = []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(request)
        if len(calls) == 1:
            return response
        return httpx.Response(200, json={"text": "1"})

    client = HttpLLMClient("http://judge.test/complete", transport=httpx.MockTransport(handler))
    summary = judge_many([("g1", "r1"), ("g2", "r2")], ("Presence",), client, max_in_flight=1)
    assert summary.scores == [{"Presence": None}, {"Presence": 1}]
    assert summary.parse_errors == {"Presence": 1}
    assert summary.request_errors == {"Presence": 0}
    assert summary.averages == {"Presence": 1.0}
    assert len(calls) == 2


def test_malformed_http_body_surfaces_for_a_single_judgement():
    client = HttpLLMClient(
        "http://judge.test/complete",
        transport=httpx.MockTransport(lambda request: httpx.Response(200, text="not json")),
    )
    with pytest.raises(LLMResponseError):
        judge_evaluate("gen", REFERENCE, "Presence", client)


def test_rule_based_judge():
    """The deterministic judge accepts a faithful report and rejects a hallucinated finding."""
    client = RuleBasedJudgeClient()
    for category in CHEST_CATEGORIES:
        assert judge_evaluate(REFERENCE, REFERENCE, category, client) == 1
    hallucinated = REFERENCE.replace("No cardiomegaly.", "There is cardiomegaly with a 35 mm cardiac silhouette.")
    assert judge_evaluate(hallucinated, REFERENCE, "Hallucination", client) == 0
    assert judge_evaluate(hallucinated, REFERENCE, "Presence", client) == 0
    wrong_size = REFERENCE.replace("8 mm", "11 mm")
    assert judge_evaluate(wrong_size, REFERENCE, "Severity", client) == 0
    assert judge_evaluate(wrong_size, REFERENCE, "Presence", client) == 1
