"""Synthetic emotional scenes, the tag-based oracle judge, and dataset manifests."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .clause_bank import ClauseBank, build_clause_bank
from .errors import ConfigurationError, ManifestError
from .rewards import Verdict
from .rng import stream
from .taxonomy import NO_MATCH, EmotionTaxonomy, load_taxonomy

FEATURE_NOISE = 0.3
DISTRACTOR_PROB = 0.3


@dataclass(frozen=True)
class SyntheticScene:
    scene_id: str
    features: np.ndarray = field(compare=False)
    trigger_ids: frozenset[str]
    gold_emotion: str
    valence: str
    arousal: str

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SyntheticScene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.trigger_ids == other.trigger_ids
            and self.gold_emotion == other.gold_emotion
            and self.valence == other.valence
            and self.arousal == other.arousal
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None  # type: ignore[assignment]

    def describe(self, bank: ClauseBank) -> str:
        """Plain-text stand-in for the image, usable as a remote-judge caption."""
        return "A picture of " + ", ".join(sorted(bank.surface(t) for t in self.trigger_ids)) + "."

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.scene_id,
            "label": self.gold_emotion,
            "features": [float(x) for x in self.features],
            "trigger_ids": sorted(self.trigger_ids),
            "valence": self.valence,
            "arousal": self.arousal,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SyntheticScene":
        features = np.asarray(d["features"], dtype=np.float64)
        features.setflags(write=False)
        return cls(
            scene_id=str(d["id"]),
            features=features,
            trigger_ids=frozenset(d["trigger_ids"]),
            gold_emotion=d["label"],
            valence=d["valence"],
            arousal=d["arousal"],
        )


def min_feature_dim(taxonomy: EmotionTaxonomy, bank: ClauseBank | None = None) -> int:
    bank = bank or build_clause_bank(taxonomy)
    return 1 + len(taxonomy) + len(bank.triggers)


def generate_dataset(
    seed: int,
    n: int,
    taxonomy: EmotionTaxonomy,
    d: int | None = None,
    bank: ClauseBank | None = None,
) -> list[SyntheticScene]:
    """Deterministic scenes with class-balanced labels and linearly decodable features.

    Feature layout: ``[bias | emotion one-hot | trigger multi-hot | noise...]``,
    Gaussian noise on every coordinate except the bias.
    """
    if n < len(taxonomy):
        raise ConfigurationError(f"need n >= |taxonomy| ({len(taxonomy)}), got {n}")
    bank = bank or build_clause_bank(taxonomy)
    d_min = min_feature_dim(taxonomy, bank)
    d = d_min + 4 if d is None else d
    if d < d_min:
        raise ConfigurationError(f"feature dimension must be >= {d_min}, got {d}")
    all_triggers = bank.trigger_ids
    t_offset = 1 + len(taxonomy)
    scenes = []
    for i in range(n):
        scene_id = f"scene-{i:05d}"
        gold = taxonomy.labels[i % len(taxonomy)]
        rng = stream(seed, "scene", scene_id)
        own = bank.triggers_for(gold)
        k = 1 + int(rng.integers(0, len(own)))
        present = set(rng.choice(len(own), size=k, replace=False).tolist())
        trig = {own[j] for j in present}
        others = [t for t in all_triggers if t not in own]
        if others and rng.random() < DISTRACTOR_PROB:
            trig.add(others[int(rng.integers(0, len(others)))])
        x = rng.normal(0.0, FEATURE_NOISE, size=d)
        x[0] = 1.0
        x[1 + taxonomy.index(gold)] += 1.0
        for t in trig:
            x[t_offset + all_triggers.index(t)] += 1.0
        x.setflags(write=False)
        valence, arousal = taxonomy.affect(gold)
        scenes.append(
            SyntheticScene(
                scene_id=scene_id,
                features=x,
                trigger_ids=frozenset(trig),
                gold_emotion=gold,
                valence=valence,
                arousal=arousal,
            )
        )
    return scenes


def oracle_yes_no(scene: SyntheticScene, s1_text: str, bank: ClauseBank) -> Verdict:
    """Yes iff the text names at least one trigger present in the scene."""
    if not s1_text:
        return Verdict.NO
    lowered = s1_text.casefold()
    for tid in scene.trigger_ids:
        if bank.surface(tid).casefold() in lowered:
            return Verdict.YES
    return Verdict.NO


def oracle_emotion(s12_text: str, taxonomy: EmotionTaxonomy, bank: ClauseBank) -> str:
    """Affinity tag of the single reflection clause found in the text, else NO_MATCH."""
    found = {c.emotion for c in bank.stage2 if c.text in s12_text}
    if len(found) != 1:
        return NO_MATCH
    (label,) = found
    return label if label in taxonomy else NO_MATCH


class OracleJudge:
    """Deterministic judge for synthetic scenes, driven by clause tags."""

    concurrent_safe = True

    def __init__(self, bank: ClauseBank):
        self.bank = bank

    def judge_yes_no(self, scene_ref: SyntheticScene, text: str, prompt: str) -> str:
        if not isinstance(scene_ref, SyntheticScene):
            raise ConfigurationError("the oracle judge needs a SyntheticScene as image reference")
        return oracle_yes_no(scene_ref, text, self.bank).value

    def judge_emotion(self, text: str, prompt: str, taxonomy: EmotionTaxonomy) -> str:
        return oracle_emotion(text, taxonomy, self.bank)


# -- manifests ---------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    label: str
    caption: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[ManifestRecord, ...]
    taxonomy: EmotionTaxonomy
    split: str = "train"

    def __len__(self) -> int:
        return len(self.records)


def load_manifest(
    path: str | Path,
    taxonomy: EmotionTaxonomy | str = "emoset",
    split: str | None = None,
) -> DatasetManifest:
    """Read a JSONL manifest of ``{"id", "label", ["caption"]}`` records."""
    tax = load_taxonomy(taxonomy) if isinstance(taxonomy, str) else taxonomy
    path = Path(path)
    records: list[ManifestRecord] = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise ManifestError("record must be a JSON object", lineno)
            rid = obj.get("id", obj.get("image_path"))
            if not isinstance(rid, str) or not rid:
                raise ManifestError("record needs a non-empty string 'id'", lineno)
            label = obj.get("label")
            canon = tax.canonicalize(label) if isinstance(label, str) else None
            if canon is None:
                raise ManifestError(f"label {label!r} not in taxonomy {tax.name!r}", lineno)
            if rid in seen:
                raise ManifestError(f"duplicate id {rid!r}", lineno)
            seen.add(rid)
            caption = obj.get("caption")
            if caption is not None and not isinstance(caption, str):
                raise ManifestError("'caption' must be a string", lineno)
            records.append(ManifestRecord(rid, canon, caption))
    return DatasetManifest(tuple(records), tax, split or path.stem)


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_scenes(path: str | Path) -> list[SyntheticScene]:
    scenes = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                scenes.append(SyntheticScene.from_dict(json.loads(line)))
    return scenes
