"""Trigger lexicon and per-stage clause templates for template-generated traces."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

from .errors import ConfigurationError
from .taxonomy import AROUSALS, VALENCES, EmotionTaxonomy

# Two visual triggers per emotion. No surface form is a substring of another.
TRIGGER_LEXICON: dict[str, tuple[tuple[str, str], ...]] = {
    "amusement": (("clown", "a clown juggling pies"), ("puppies", "puppies tumbling over each other")),
    "anger": (("fist", "a clenched fist"), ("mob", "a shouting mob")),
    "awe": (("mountain", "a towering mountain"), ("milkyway", "the milky way over a desert")),
    "contentment": (("fireplace", "a cozy fireplace"), ("meadow", "a quiet meadow at dusk")),
    "disgust": (("garbage", "rotting garbage"), ("mold", "a moldy sandwich")),
    "excitement": (("fireworks", "fireworks exploding"), ("coaster", "a roller coaster plunging")),
    "fear": (("storm", "dark storm clouds"), ("shadow", "a shadowy figure in an alley")),
    "sadness": (("swing", "an empty swing"), ("bouquet", "a wilted bouquet")),
    "joy": (("cake", "a birthday cake with candles"), ("laughter", "children laughing together")),
    "surprise": (("giftbox", "a gift box bursting open"), ("balloon", "a balloon popping")),
    "love": (("embrace", "a couple embracing"), ("lock", "a heart-shaped padlock")),
}

NEUTRAL_OBSERVATIONS = (
    "The picture is evenly lit and shows an ordinary street corner.",
    "The frame contains plain geometric shapes on a grey wall.",
)

REFLECTION_PHRASES: dict[str, str] = {
    "amusement": "A viewer would likely chuckle and feel playful and entertained.",
    "anger": "A viewer would likely feel provoked, tense and hostile.",
    "awe": "A viewer would likely feel small before something vast and wondrous.",
    "contentment": "A viewer would likely feel settled, at ease and quietly satisfied.",
    "disgust": "A viewer would likely recoil and feel queasy and repulsed.",
    "excitement": "A viewer would likely feel a rush of energy and eager anticipation.",
    "fear": "A viewer would likely feel dread and an urge to back away.",
    "sadness": "A viewer would likely feel a heavy sense of loss and longing.",
    "joy": "A viewer would likely smile and feel bright, warm delight.",
    "surprise": "A viewer would likely be startled and caught off guard.",
    "love": "A viewer would likely feel tenderness and deep affection.",
}

AROUSAL_WORDS = {"low": "low arousal, calm", "high": "high arousal, excited"}


@dataclass(frozen=True)
class TriggerClause:
    text: str
    trigger_ids: frozenset[str]


@dataclass(frozen=True)
class ReflectionClause:
    text: str
    emotion: str


@dataclass(frozen=True)
class ConclusionClause:
    text: str
    valence: str
    arousal: str


@dataclass(frozen=True)
class ClauseBank:
    triggers: tuple[tuple[str, str, str], ...]  # (trigger_id, surface, emotion)
    stage1: tuple[TriggerClause, ...]
    stage2: tuple[ReflectionClause, ...]
    stage3: tuple[ConclusionClause, ...]

    def __post_init__(self) -> None:
        for name in ("stage1", "stage2", "stage3"):
            if len(getattr(self, name)) < 2:
                raise ConfigurationError(f"clause bank {name} needs at least 2 clauses")
        known = {tid for tid, _, _ in self.triggers}
        for c in self.stage1:
            if not c.trigger_ids <= known:
                raise ConfigurationError(f"stage-1 clause references unknown triggers {set(c.trigger_ids - known)}")

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.stage1), len(self.stage2), len(self.stage3)

    @property
    def trigger_ids(self) -> tuple[str, ...]:
        return tuple(tid for tid, _, _ in self.triggers)

    def surface(self, trigger_id: str) -> str:
        for tid, surface, _ in self.triggers:
            if tid == trigger_id:
                return surface
        raise KeyError(trigger_id)

    def triggers_for(self, emotion: str) -> tuple[str, ...]:
        return tuple(tid for tid, _, emo in self.triggers if emo == emotion)

    def to_dict(self) -> dict:
        return {
            "triggers": [list(t) for t in self.triggers],
            "stage1": [[c.text, sorted(c.trigger_ids)] for c in self.stage1],
            "stage2": [[c.text, c.emotion] for c in self.stage2],
            "stage3": [[c.text, c.valence, c.arousal] for c in self.stage3],
        }

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def build_clause_bank(taxonomy: EmotionTaxonomy) -> ClauseBank:
    """Clause bank covering exactly the taxonomy's emotions."""
    missing = [lab for lab in taxonomy.labels if lab not in TRIGGER_LEXICON]
    if missing:
        raise ConfigurationError(f"no trigger lexicon for labels {missing}")
    triggers = tuple(
        (tid, surface, lab) for lab in taxonomy.labels for tid, surface in TRIGGER_LEXICON[lab]
    )
    stage1 = tuple(
        TriggerClause(f"The scene shows {surface}.", frozenset({tid})) for tid, surface, _ in triggers
    ) + tuple(TriggerClause(text, frozenset()) for text in NEUTRAL_OBSERVATIONS)
    stage2 = tuple(ReflectionClause(REFLECTION_PHRASES[lab], lab) for lab in taxonomy.labels)
    stage3 = tuple(
        ConclusionClause(f"The overall emotion is {v} with {AROUSAL_WORDS[a]}.", v, a)
        for v in VALENCES
        for a in AROUSALS
    )
    return ClauseBank(triggers=triggers, stage1=stage1, stage2=stage2, stage3=stage3)
