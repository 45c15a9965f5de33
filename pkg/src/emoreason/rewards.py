"""Format, accuracy and reflective rewards and their weighted combination."""

from __future__ import annotations

import enum
import functools
import logging
import re
from dataclasses import asdict, dataclass
from fractions import Fraction
from typing import Any, Protocol, runtime_checkable

from . import trace_grammar as tg
from .errors import ConfigurationError, JudgeError
from .taxonomy import NO_MATCH, EmotionTaxonomy, normalize_label_text

log = logging.getLogger(__name__)

CONSISTENCY_PROMPT = "Can the following text describe the image?"
COHERENCE_PROMPT = "Which emotion best describes the text above?"


class Verdict(str, enum.Enum):
    YES = "Yes"
    NO = "No"


@dataclass(frozen=True)
class RewardWeights:
    lambda1: float = 0.1
    lambda2: float = 0.1

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.lambda1 + self.lambda2 > 1.0:
            raise ConfigurationError(f"lambda1 + lambda2 must be <= 1, got {self.lambda1 + self.lambda2}")

    @property
    def accuracy_weight(self) -> float:
        return 1.0 - self.lambda1 - self.lambda2


@dataclass(frozen=True)
class RewardBreakdown:
    format: int
    accuracy: int
    consistency: int
    coherence: int
    rer: float
    overall: float

    def to_dict(self) -> dict[str, float]:
        return asdict(self)


@runtime_checkable
class Judge(Protocol):
    """Reflective evaluator answering the consistency and coherence prompts.

    Both methods return the judge's raw reply; callers normalize it. Set
    ``concurrent_safe = False`` to make the training loop serialize calls.
    """

    concurrent_safe: bool

    def judge_yes_no(self, scene_ref: Any, text: str, prompt: str) -> str: ...

    def judge_emotion(self, text: str, prompt: str, taxonomy: EmotionTaxonomy) -> str: ...


_WORD_YES = re.compile(r"\byes\b", re.IGNORECASE)
_WORD_NO = re.compile(r"\bno\b", re.IGNORECASE)


def normalize_yes_no(reply: str) -> Verdict | None:
    """Leading-token match, then whole-reply search; both present -> No."""
    if isinstance(reply, Verdict):
        return reply
    tokens = str(reply).strip().split()
    if tokens:
        head = normalize_label_text(tokens[0])
        if head == "yes":
            return Verdict.YES
        if head == "no":
            return Verdict.NO
    has_yes = _WORD_YES.search(reply) is not None
    has_no = _WORD_NO.search(reply) is not None
    if has_no:
        return Verdict.NO
    if has_yes:
        return Verdict.YES
    return None


def normalize_emotion_reply(reply: str, taxonomy: EmotionTaxonomy) -> str:
    """Map a free-form reply to a taxonomy label, or NO_MATCH.

    Exact match (after normalization and aliasing) wins; otherwise the label or
    alias occurring earliest in the reply, as a whole word, is taken.
    """
    exact = taxonomy.canonicalize(reply)
    if exact is not None:
        return exact
    best: tuple[int, int, str] | None = None
    order = {lab: i for i, lab in enumerate(taxonomy.labels)}
    for surface, label in taxonomy.surface_forms():
        m = re.search(rf"(?<![\w-]){re.escape(surface)}(?![\w-])", reply, re.IGNORECASE)
        if m is None:
            continue
        key = (m.start(), order[label], label)
        if best is None or key < best:
            best = key
    return best[2] if best is not None else NO_MATCH


def reward_format(raw_output: str) -> int:
    return 1 if tg.check_format(raw_output) else 0


def _require_gold(gold: str, taxonomy: EmotionTaxonomy) -> None:
    if gold not in taxonomy:
        raise ConfigurationError(f"gold label {gold!r} is not in taxonomy {taxonomy.name!r}")


def reward_accuracy(predicted: str, gold: str, taxonomy: EmotionTaxonomy) -> int:
    _require_gold(gold, taxonomy)
    return 1 if taxonomy.canonicalize(predicted) == gold else 0


def judge_yes_no(judge: Judge, scene_ref: Any, text: str, prompt: str = CONSISTENCY_PROMPT) -> Verdict:
    if prompt != CONSISTENCY_PROMPT:
        raise ConfigurationError("judge_yes_no requires the exact consistency prompt")
    reply = judge.judge_yes_no(scene_ref, text, prompt)
    verdict = normalize_yes_no(reply)
    if verdict is None:
        raise JudgeError(f"judge reply is not a yes/no verdict: {reply!r}")
    return verdict


def reward_consistency(verdict: Verdict | str) -> int:
    v = verdict if isinstance(verdict, Verdict) else Verdict(verdict)
    return 1 if v is Verdict.YES else 0


def judge_emotion(judge: Judge, text: str, taxonomy: EmotionTaxonomy, prompt: str = COHERENCE_PROMPT) -> str:
    if prompt != COHERENCE_PROMPT:
        raise ConfigurationError("judge_emotion requires the exact coherence prompt")
    reply = judge.judge_emotion(text, prompt, taxonomy)
    label = normalize_emotion_reply(reply, taxonomy)
    if label == NO_MATCH:
        log.info("coherence judge reply %r matches no label in %s", reply, taxonomy.name)
    return label


def reward_coherence(judged: str, gold: str, taxonomy: EmotionTaxonomy) -> int:
    _require_gold(gold, taxonomy)
    if judged == NO_MATCH:
        return 0
    return 1 if taxonomy.canonicalize(judged) == gold else 0


def reward_rer(consistency: int, coherence: int) -> float:
    return (consistency + coherence) / 2.0


def reward_overall(breakdown: RewardBreakdown | dict, weights: RewardWeights) -> float:
    if weights.lambda1 + weights.lambda2 > 1.0:
        raise ConfigurationError("lambda1 + lambda2 must be <= 1")
    b = breakdown if isinstance(breakdown, dict) else breakdown.to_dict()
    # Exact decimal arithmetic: 0.8*1 + 0.1*0.5 + 0.1*1 must give 0.95, not 0.9500000000000001.
    l1, l2 = _dec(weights.lambda1), _dec(weights.lambda2)
    total = (1 - l1 - l2) * _dec(b["accuracy"]) + l1 * _dec(b["rer"]) + l2 * _dec(b["format"])
    return float(total)


def _dec(x: float) -> Fraction:
    return Fraction(repr(float(x)))


ZERO_BREAKDOWN = RewardBreakdown(format=0, accuracy=0, consistency=0, coherence=0, rer=0.0, overall=0.0)


@functools.lru_cache(maxsize=1024)
def compose_breakdown(fmt: int, acc: int, cons: int, coh: int, weights: RewardWeights) -> RewardBreakdown:
    rer = reward_rer(cons, coh)
    parts = {"format": fmt, "accuracy": acc, "consistency": cons, "coherence": coh, "rer": rer}
    return RewardBreakdown(**parts, overall=reward_overall(parts, weights))


def score_rollout(
    raw_output: str,
    scene_ref: Any,
    gold: str,
    taxonomy: EmotionTaxonomy,
    weights: RewardWeights,
    judge: Judge,
) -> RewardBreakdown:
    """Score one rollout. Malformed output zeroes every component."""
    _require_gold(gold, taxonomy)
    trace = tg.parse_trace(raw_output)
    if not isinstance(trace, tg.StructuredTrace):
        return ZERO_BREAKDOWN
    acc = reward_accuracy(tg.extract_answer(trace), gold, taxonomy)
    cons = reward_consistency(judge_yes_no(judge, scene_ref, tg.extract_step1(trace)))
    coh = reward_coherence(judge_emotion(judge, tg.extract_steps12(trace), taxonomy), gold, taxonomy)
    return compose_breakdown(1, acc, cons, coh, weights)
