"""Reference rewriter endpoint and the rewriter client's retry/fallback behaviour."""
import json

import httpx
import pytest
from fastapi.testclient import TestClient

from app.config import Settings
from app.data.text import prompt_align
from app.main import app
from app.services.rewrite_service import RewriteService

CONCEPTS = ["effusion", "edema", "fibrosis"]
REPORT = ["evidence of fibrosis", "lines and tubes are unchanged"]
ENDPOINT = "http://rewriter.test/rewrite"


@pytest.fixture
def client():
    with TestClient(app) as test_client:
        yield test_client


@pytest.fixture
def settings():
    return Settings(rewriter_retries=2, rewriter_backoff_s=0.5, rewriter_timeout_s=1.0)


def _service(handler, settings, sleeps=None, endpoint=ENDPOINT):
    sleeps = [] if sleeps is None else sleeps
    return RewriteService(
        CONCEPTS,
        endpoint=endpoint,
        client=httpx.Client(transport=httpx.MockTransport(handler)),
        settings=settings,
        sleep=sleeps.append,
    )


def test_health(client):
    assert client.get("/health").json() == {"status": "healthy"}
    assert client.get("/").json()["endpoints"]["rewrite"] == "/rewrite"


def test_rewrite_endpoint_appends_canonical_sentences(client):
    response = client.post(
        "/rewrite",
        json={"report": "\n".join(REPORT), "instruction": "align", "vocab": CONCEPTS},
    )
    assert response.status_code == 200
    assert response.json()["rewritten"].splitlines() == REPORT + ["there is fibrosis ."]


@pytest.mark.parametrize(
    "body",
    [
        {"report": "  \n ", "instruction": "align", "vocab": CONCEPTS},
        {"report": "", "instruction": "align", "vocab": CONCEPTS},
        {"report": "evidence of edema", "instruction": "align", "vocab": []},
        {"instruction": "align", "vocab": CONCEPTS},
    ],
)
def test_rewrite_endpoint_rejects_bad_bodies(client, body):
    assert client.post("/rewrite", json=body).status_code == 422


def test_unset_endpoint_falls_back_to_rule_based_alignment(settings):
    service = RewriteService(CONCEPTS, endpoint=None, settings=settings)
    assert not service.available
    assert service.rewrite(REPORT) == prompt_align(REPORT, CONCEPTS)
    assert service.stats["fallback"] == 1 and service.stats["attempts"] == 0


def test_echo_server_output_is_used_verbatim(settings):
    seen = []

    def echo(request: httpx.Request) -> httpx.Response:
        body = json.loads(request.content)
        seen.append(body)
        return httpx.Response(200, json={"rewritten": body["report"]})

    service = _service(echo, settings)
    assert service.rewrite(REPORT) == REPORT
    assert seen[0]["vocab"] == CONCEPTS and seen[0]["instruction"]
    assert service.stats["remote"] == 1


def test_fixture_rewrite_is_consumed(settings):
    fixture = "evidence of fibrosis\nthere is fibrosis .\nthere is edema ."
    service = _service(lambda request: httpx.Response(200, json={"rewritten": fixture}), settings)
    assert service.rewrite(REPORT) == fixture.splitlines()


def test_retries_with_exponential_backoff_then_falls_back(settings):
    calls = []
    sleeps = []

    def failing(request: httpx.Request) -> httpx.Response:
        calls.append(request)
        return httpx.Response(503, json={"detail": "busy"})

    service = _service(failing, settings, sleeps)
    assert service.rewrite(REPORT) == prompt_align(REPORT, CONCEPTS)
    assert len(calls) == 3
    assert sleeps == [0.5, 1.0]
    assert service.stats == {"remote": 0, "fallback": 1, "attempts": 3}


def test_recovers_when_a_retry_succeeds(settings):
    responses = iter([httpx.Response(500), httpx.Response(200, json={"rewritten": "evidence of fibrosis"})])
    service = _service(lambda request: next(responses), settings)
    assert service.rewrite(REPORT) == ["evidence of fibrosis"]
    assert service.stats["attempts"] == 2


@pytest.mark.parametrize("payload", [{"json": {"text": "wrong key"}}, {"content": b"not json"}])
def test_malformed_responses_fall_back(settings, payload):
    service = _service(lambda request: httpx.Response(200, **payload), settings)
    assert service.rewrite(REPORT) == prompt_align(REPORT, CONCEPTS)


def test_network_errors_fall_back(settings):
    def unreachable(request: httpx.Request) -> httpx.Response:
        raise httpx.ConnectError("connection refused", request=request)

    service = _service(unreachable, settings)
    assert service.rewrite(REPORT) == prompt_align(REPORT, CONCEPTS)


def test_endpoint_is_disabled_after_repeated_failures(settings):
    calls = []

    def failing(request):
        calls.append(request)
        return httpx.Response(500)

    service = _service(failing, settings)
    for _ in range(5):
        service.rewrite(REPORT)
    assert len(calls) == 3 * service.max_failures
    assert not service.available
    assert service.stats["fallback"] == 5
