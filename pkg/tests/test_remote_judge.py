from __future__ import annotations

from pathlib import Path

import pytest

from emoreason.errors import ConfigurationError, JudgeError
from emoreason.remote_judge import (
    FixtureTransport,
    RemoteJudge,
    RemoteJudgeConfig,
    chat_response,
    remote_emotion,
    remote_yes_no,
)
from emoreason.rewards import COHERENCE_PROMPT, CONSISTENCY_PROMPT, Verdict, judge_yes_no, reward_consistency
from emoreason.taxonomy import NO_MATCH

FIXTURES = Path(__file__).parent / "fixtures"
CFG = RemoteJudgeConfig(base_url="http://judge.invalid/v1", model_name="judge-model", backoff_s=0.0)


def ok(text):
    return {"response": {"status": 200, "json": chat_response(text)}}


def status(code):
    return {"response": {"status": code, "text": "error"}}


def judge_with(*fixtures, cfg=CFG):
    transport = FixtureTransport(list(fixtures))
    return RemoteJudge(cfg, transport=transport, sleep=lambda s: None), transport


def _texts(body):
    return [part["text"] for part in body["messages"][0]["content"] if part["type"] == "text"]


def test_yes_reply():
    judge, _ = judge_with(ok("Yes."))
    assert judge.remote_yes_no("A dog in a park.", "The scene shows a dog.") is Verdict.YES


def test_no_reply_with_explanation():
    judge, _ = judge_with(ok("No, the text mentions rain but the image is sunny."))
    assert judge.remote_yes_no("A sunny beach.", "The scene shows rain.") is Verdict.NO


def test_three_server_errors_exhaust_budget():
    judge, transport = judge_with(status(500), status(500), status(500), ok("Yes"))
    with pytest.raises(JudgeError):
        judge.remote_yes_no("caption", "s1")
    assert judge.requests_sent == 3
    assert len(transport.requests) == 3


def test_retry_then_success():
    judge, transport = judge_with(status(429), ok("Yes"))
    assert judge.remote_yes_no("caption", "s1") is Verdict.YES
    assert len(transport.requests) == 2


def test_client_error_is_not_retried():
    judge, transport = judge_with(status(401), ok("Yes"))
    with pytest.raises(JudgeError):
        judge.remote_yes_no("caption", "s1")
    assert len(transport.requests) == 1


def test_unusable_reply_consumes_retry_budget():
    judge, transport = judge_with(ok("maybe"), ok("hard to say"), ok("perhaps"))
    with pytest.raises(JudgeError):
        judge.remote_yes_no("caption", "s1")
    assert len(transport.requests) == 3


def test_malformed_body_is_retried():
    judge, _ = judge_with({"response": {"status": 200, "json": {"choices": []}}}, ok("No"))
    assert judge.remote_yes_no("caption", "s1") is Verdict.NO


def test_transport_errors_are_bounded():
    judge, transport = judge_with()  # every request raises ConnectError
    with pytest.raises(JudgeError):
        judge.remote_yes_no("caption", "s1")
    assert judge.requests_sent == 3


@pytest.mark.parametrize(
    "reply,label",
    [("awe", "awe"), ("I think it's Excitement!", "excitement"), ("nostalgia", NO_MATCH), ("Fear.", "fear")],
)
def test_emotion_replies(reply, label, emoset):
    judge, _ = judge_with(ok(reply))
    assert judge.remote_emotion("Step text", emoset) == label


def test_request_bodies_carry_exact_prompts(emoset):
    judge, transport = judge_with(ok("Yes"), ok("awe"))
    judge.remote_yes_no("A calm lake at dawn.", "The scene shows a calm lake.")
    judge.remote_emotion("The scene shows a calm lake.\nI feel at ease.", emoset)
    yes_body, emo_body = transport.requests
    for body in (yes_body, emo_body):
        assert body["temperature"] == 0
        assert body["model"] == "judge-model"
    assert _texts(yes_body) == [
        "Image description: A calm lake at dawn.",
        "The scene shows a calm lake.\n\n" + CONSISTENCY_PROMPT + " Answer Yes or No.",
    ]
    (emo_text,) = _texts(emo_body)
    assert emo_text.startswith("The scene shows a calm lake.\nI feel at ease.\n\n" + COHERENCE_PROMPT + " Options: ")
    assert all(label in emo_text for label in emoset.labels)


def test_image_url_mode():
    cfg = RemoteJudgeConfig(base_url="http://judge.invalid/v1", model_name="m", image_mode="image_url", backoff_s=0)
    judge, transport = judge_with(ok("Yes"), cfg=cfg)
    judge.remote_yes_no("https://example.org/img.jpg", "s1")
    part = transport.requests[0]["messages"][0]["content"][0]
    assert part == {"type": "image_url", "image_url": {"url": "https://example.org/img.jpg"}}


def test_recorded_fixture_file(emoset):
    transport = FixtureTransport.from_file(FIXTURES / "judge_exchanges.json")
    judge = RemoteJudge(CFG, transport=transport, sleep=lambda s: None)
    assert judge.remote_yes_no("A dog runs through a wet park.", "The scene shows a dog splashing in puddles.") is Verdict.YES
    assert judge.remote_yes_no("A sunny beach.", "The scene shows heavy rain.") is Verdict.NO
    assert judge.remote_emotion("The scene shows a vast canyon.\nI feel small before something immense.", emoset) == "awe"
    assert len(transport.requests) == 4


def test_module_level_helpers(emoset):
    assert remote_yes_no(CFG, "c", "s1", transport=FixtureTransport([ok("yes")])) is Verdict.YES
    assert remote_emotion(CFG, "s12", emoset, transport=FixtureTransport([ok("sadness")])) == "sadness"


def test_judge_protocol_feeds_rewards():
    judge, _ = judge_with(ok("Yes"))
    assert reward_consistency(judge_yes_no(judge, "caption", "The scene shows a dog.")) == 1


def test_api_key_header(monkeypatch):
    monkeypatch.setenv("EMOREASON_JUDGE_API_KEY", "sk-test")
    captured = {}

    class Spy(FixtureTransport):
        def handle_request(self, request):
            captured["auth"] = request.headers.get("authorization")
            return super().handle_request(request)

    judge = RemoteJudge(CFG, transport=Spy([ok("Yes")]))
    judge.remote_yes_no("c", "s1")
    assert captured["auth"] == "Bearer sk-test"


def test_config_validation():
    with pytest.raises(ConfigurationError):
        RemoteJudgeConfig(base_url="", model_name="m")
    with pytest.raises(ConfigurationError):
        RemoteJudgeConfig(base_url="http://x", model_name="m", max_retries=-1)
    with pytest.raises(ConfigurationError):
        RemoteJudgeConfig.from_dict({"base_url": "http://x", "model_name": "m", "bogus": 1})
