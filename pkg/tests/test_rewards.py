from __future__ import annotations

import itertools
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from emoreason.errors import ConfigurationError, JudgeError
from emoreason.rewards import (
    COHERENCE_PROMPT,
    CONSISTENCY_PROMPT,
    RewardBreakdown,
    RewardWeights,
    Verdict,
    compose_breakdown,
    judge_emotion,
    judge_yes_no,
    normalize_emotion_reply,
    normalize_yes_no,
    reward_accuracy,
    reward_coherence,
    reward_consistency,
    reward_format,
    reward_overall,
    reward_rer,
    score_rollout,
)
from emoreason.taxonomy import NO_MATCH
from emoreason.trace_grammar import StructuredTrace, render_trace

VALID = "Step 1: a\nStep 2: b\nStep 3: c\n\\boxed{fear}"
DEFAULT_WEIGHTS = RewardWeights(0.1, 0.1)


class ScriptedJudge:
    concurrent_safe = True

    def __init__(self, yes_no="Yes", emotion="fear"):
        self.yes_no, self.emotion = yes_no, emotion
        self.calls = 0

    def judge_yes_no(self, scene_ref, text, prompt):
        self.calls += 1
        return self.yes_no

    def judge_emotion(self, text, prompt, taxonomy):
        self.calls += 1
        return self.emotion


def test_prompts_are_byte_exact():
    assert CONSISTENCY_PROMPT.encode() == b"Can the following text describe the image?"
    assert COHERENCE_PROMPT.encode() == b"Which emotion best describes the text above?"


def test_reward_format():
    assert reward_format(VALID) == 1
    assert reward_format("Step 1: a\nStep 2: b\nStep 3: c\nfear") == 0
    assert reward_format("") == 0


def test_reward_accuracy(emoset):
    assert reward_accuracy("fear", "fear", emoset) == 1
    assert reward_accuracy("Fear ", "fear", emoset) == 1
    assert reward_accuracy("fear.", "fear", emoset) == 1
    assert reward_accuracy("scared", "fear", emoset) == 1  # alias
    assert reward_accuracy("happiness", "fear", emoset) == 0
    with pytest.raises(ConfigurationError):
        reward_accuracy("fear", "joy", emoset)


@pytest.mark.parametrize(
    "reply, verdict",
    [
        ("Yes", Verdict.YES),
        ("yes, it does.", Verdict.YES),
        ("Yes.", Verdict.YES),
        ("No", Verdict.NO),
        ("No, the text mentions rain but the image shows sun", Verdict.NO),
        ("I would say yes", Verdict.YES),
        ("The answer: yes or no? no", Verdict.NO),
        ("maybe", None),
    ],
)
def test_normalize_yes_no(reply, verdict):
    assert normalize_yes_no(reply) is verdict


def test_judge_yes_no_and_consistency():
    assert judge_yes_no(ScriptedJudge("yes, it does."), None, "a", CONSISTENCY_PROMPT) is Verdict.YES
    assert reward_consistency(Verdict.YES) == 1
    assert reward_consistency(Verdict.NO) == 0
    assert reward_consistency("Yes") == reward_consistency(Verdict.YES) == 1
    with pytest.raises(ConfigurationError):
        judge_yes_no(ScriptedJudge(), None, "a", "Does it match?")
    with pytest.raises(JudgeError):
        judge_yes_no(ScriptedJudge("perhaps"), None, "a")


def test_normalize_emotion_reply(emoset):
    assert normalize_emotion_reply("The emotion is awe.", emoset) == "awe"
    assert normalize_emotion_reply("I think it's Excitement!", emoset) == "excitement"
    assert normalize_emotion_reply("melancholy", emoset) == NO_MATCH
    assert normalize_emotion_reply("awe, not fear", emoset) == "awe"
    assert normalize_emotion_reply("endangered", emoset) == NO_MATCH  # no partial-word hits


def test_judge_emotion_and_coherence(emoset):
    assert judge_emotion(ScriptedJudge(emotion="The emotion is awe."), "x", emoset, COHERENCE_PROMPT) == "awe"
    assert reward_coherence("fear", "fear", emoset) == 1
    assert reward_coherence("awe", "fear", emoset) == 0
    assert reward_coherence(NO_MATCH, "fear", emoset) == 0


def test_reward_rer():
    assert reward_rer(1, 1) == 1.0
    assert reward_rer(1, 0) == 0.5
    assert reward_rer(0, 0) == 0.0


def test_reward_overall_examples():
    b = {"format": 1, "accuracy": 1, "consistency": 1, "coherence": 0, "rer": 0.5}
    assert reward_overall(b, DEFAULT_WEIGHTS) == 0.95
    zeros = dict.fromkeys(b, 0)
    assert reward_overall(zeros, DEFAULT_WEIGHTS) == 0.0
    assert reward_overall({**zeros, "accuracy": 1}, RewardWeights(0.0, 0.0)) == 1.0


def test_weights_validation():
    with pytest.raises(ConfigurationError):
        RewardWeights(0.6, 0.5)
    with pytest.raises(ConfigurationError):
        RewardWeights(-0.1, 0.1)


def test_lattice_exact_values():
    for acc, cons, coh, fmt in itertools.product((0, 1), repeat=4):
        b = compose_breakdown(fmt, acc, cons, coh, DEFAULT_WEIGHTS)
        expected = Fraction(8, 10) * acc + Fraction(1, 10) * Fraction(cons + coh, 2) + Fraction(1, 10) * fmt
        assert b.overall == float(expected)
        assert b.rer == (cons + coh) / 2
        degenerate = compose_breakdown(fmt, acc, cons, coh, RewardWeights(0.0, 0.0))
        assert degenerate.overall == acc


weight_pairs = st.tuples(st.floats(0, 1), st.floats(0, 1)).filter(lambda w: w[0] + w[1] <= 1)


@given(weight_pairs, st.tuples(*[st.integers(0, 1)] * 4))
def test_overall_bounded_and_monotone(w, comps):
    weights = RewardWeights(*w)
    acc, cons, coh, fmt = comps
    base = compose_breakdown(fmt, acc, cons, coh, weights).overall
    assert 0.0 <= base <= 1.0
    for i in range(4):
        bumped = list(comps)
        bumped[i] = 1
        acc2, cons2, coh2, fmt2 = bumped
        assert compose_breakdown(fmt2, acc2, cons2, coh2, weights).overall >= base - 1e-15


def test_score_rollout_malformed_is_all_zero(emoset):
    judge = ScriptedJudge()
    b = score_rollout("no structure here", None, "fear", emoset, DEFAULT_WEIGHTS, judge)
    assert b == RewardBreakdown(0, 0, 0, 0, 0.0, 0.0)
    assert judge.calls == 0


def test_score_rollout_wrong_answer_fully_reflective(emoset):
    raw = render_trace(StructuredTrace("a", "b", "c", "awe"))
    b = score_rollout(raw, None, "fear", emoset, DEFAULT_WEIGHTS, ScriptedJudge("Yes", "fear"))
    assert (b.accuracy, b.consistency, b.coherence, b.format) == (0, 1, 1, 1)
    assert b.overall == 0.2


def test_score_rollout_degenerate_weights_equal_accuracy(emoset):
    for yes_no, emotion, answer in itertools.product(("Yes", "No"), ("fear", "awe"), ("fear", "awe")):
        raw = render_trace(StructuredTrace("a", "b", "c", answer))
        b = score_rollout(raw, None, "fear", emoset, RewardWeights(0, 0), ScriptedJudge(yes_no, emotion))
        assert b.overall == reward_accuracy(answer, "fear", emoset)
