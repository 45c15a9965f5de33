"""Emotion label spaces, label normalization and the valence/arousal table."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .errors import InvalidTaxonomyError

# Returned by judges when a reply maps to no taxonomy label. Never equal to a label.
NO_MATCH = "<no-match>"

VALENCES = ("positive", "negative")
AROUSALS = ("low", "high")

BUILTIN_TAXONOMIES = ("emoset", "emotion6", "webemo")

_TERMINAL_PUNCT = ".,;:!?\"'`)]}*"
_LEADING_PUNCT = "\"'`([{*"


def normalize_label_text(text: str) -> str:
    """Case-fold, trim and strip surrounding punctuation."""
    s = text.strip().casefold()
    prev = None
    while s != prev:
        prev = s
        s = s.rstrip(_TERMINAL_PUNCT).lstrip(_LEADING_PUNCT).strip()
    return s


@dataclass(frozen=True)
class EmotionTaxonomy:
    name: str
    labels: tuple[str, ...]
    aliases: Mapping[str, str] = field(default_factory=dict)
    valence_arousal: Mapping[str, tuple[str, str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        labels = tuple(self.labels)
        if not labels:
            raise InvalidTaxonomyError("taxonomy must contain at least one label")
        if any(not isinstance(lab, str) or not lab.strip() for lab in labels):
            raise InvalidTaxonomyError("labels must be non-empty strings")
        canon = [normalize_label_text(lab) for lab in labels]
        if len(set(canon)) != len(canon):
            raise InvalidTaxonomyError(f"duplicate labels in taxonomy {self.name!r}")
        object.__setattr__(self, "labels", tuple(canon))
        aliases = {}
        for alias, target in dict(self.aliases).items():
            t = normalize_label_text(target)
            if t not in canon:
                raise InvalidTaxonomyError(f"alias {alias!r} maps to unknown label {target!r}")
            aliases[normalize_label_text(alias)] = t
        object.__setattr__(self, "aliases", aliases)
        va = {}
        for lab, pair in dict(self.valence_arousal).items():
            lab_n = normalize_label_text(lab)
            if lab_n not in canon:
                raise InvalidTaxonomyError(f"valence/arousal entry for unknown label {lab!r}")
            valence, arousal = pair
            if valence not in VALENCES or arousal not in AROUSALS:
                raise InvalidTaxonomyError(f"bad valence/arousal pair {pair!r} for {lab!r}")
            va[lab_n] = (valence, arousal)
        object.__setattr__(self, "valence_arousal", va)

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: object) -> bool:
        return isinstance(label, str) and label in self.labels

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def canonicalize(self, text: str) -> str | None:
        """Map free text to a canonical label by exact match after normalization."""
        s = normalize_label_text(text)
        if s in self.labels:
            return s
        return self.aliases.get(s)

    def surface_forms(self) -> list[tuple[str, str]]:
        """(surface, canonical label) pairs for labels and aliases."""
        forms = [(lab, lab) for lab in self.labels]
        forms.extend(self.aliases.items())
        return forms

    def affect(self, label: str) -> tuple[str, str]:
        try:
            return self.valence_arousal[label]
        except KeyError:
            raise InvalidTaxonomyError(f"no valence/arousal entry for {label!r}") from None

    def subset(self, labels: Sequence[str], name: str | None = None) -> "EmotionTaxonomy":
        keep = [normalize_label_text(lab) for lab in labels]
        missing = [lab for lab in keep if lab not in self.labels]
        if missing:
            raise InvalidTaxonomyError(f"labels not in {self.name!r}: {missing}")
        return EmotionTaxonomy(
            name=name or f"{self.name}[{','.join(keep)}]",
            labels=tuple(keep),
            aliases={a: t for a, t in self.aliases.items() if t in keep},
            valence_arousal={lab: self.valence_arousal[lab] for lab in keep if lab in self.valence_arousal},
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "labels": list(self.labels),
            "aliases": dict(sorted(self.aliases.items())),
            "valence_arousal": {lab: list(self.valence_arousal[lab]) for lab in self.labels if lab in self.valence_arousal},
        }

    def fingerprint(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, data: Mapping) -> "EmotionTaxonomy":
        if "labels" not in data:
            raise InvalidTaxonomyError("taxonomy JSON needs a 'labels' field")
        return cls(
            name=str(data.get("name", "custom")),
            labels=tuple(data["labels"]),
            aliases=dict(data.get("aliases") or {}),
            valence_arousal={k: tuple(v) for k, v in (data.get("valence_arousal") or {}).items()},
        )


def load_taxonomy(name_or_path: str | Path) -> EmotionTaxonomy:
    """Load a builtin taxonomy by name or a taxonomy JSON file by path."""
    key = str(name_or_path)
    if key.lower() in BUILTIN_TAXONOMIES:
        text = resources.files("emoreason.data").joinpath(f"{key.lower()}.json").read_text(encoding="utf-8")
    else:
        path = Path(name_or_path)
        if not path.exists():
            raise InvalidTaxonomyError(f"unknown taxonomy {key!r} (not builtin, no such file)")
        text = path.read_text(encoding="utf-8")
    return EmotionTaxonomy.from_dict(json.loads(text))
