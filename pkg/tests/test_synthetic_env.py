from __future__ import annotations

import json
import subprocess
import sys

import numpy as np
import pytest

from emoreason.clause_bank import build_clause_bank
from emoreason.errors import ConfigurationError, ManifestError
from emoreason.rewards import COHERENCE_PROMPT, Verdict, judge_emotion
from emoreason.synthetic_env import (
    OracleJudge,
    SyntheticScene,
    generate_dataset,
    load_manifest,
    oracle_emotion,
    oracle_yes_no,
)
from emoreason.taxonomy import NO_MATCH


def test_generation_is_deterministic(tax4, bank4):
    a = generate_dataset(11, 40, tax4, bank=bank4)
    b = generate_dataset(11, 40, tax4, bank=bank4)
    assert a == b
    assert generate_dataset(12, 40, tax4, bank=bank4) != a


def test_features_depend_only_on_seed_and_id(tax4):
    small = generate_dataset(5, 8, tax4)
    large = generate_dataset(5, 20, tax4)
    assert small == large[:8]


def test_too_few_scenes_rejected(emoset):
    with pytest.raises(ConfigurationError):
        generate_dataset(0, 7, emoset)


def test_class_balance_and_taxonomy_closure(emoset):
    scenes = generate_dataset(3, 2000, emoset)
    counts = {lab: 0 for lab in emoset.labels}
    for s in scenes:
        counts[s.gold_emotion] += 1
        assert (s.valence, s.arousal) == emoset.affect(s.gold_emotion)
    assert min(counts.values()) >= 2000 // (2 * len(emoset))


def _least_squares_probe(x, labels, classes):
    y = np.zeros((len(labels), len(classes)))
    y[np.arange(len(labels)), [classes.index(l) for l in labels]] = 1.0
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    return np.mean(np.argmax(x @ w, axis=1) == [classes.index(l) for l in labels])


def test_linear_probe_recovers_emotion(emoset):
    scenes = generate_dataset(9, 2000, emoset)
    x = np.stack([s.features for s in scenes])
    assert _least_squares_probe(x, [s.gold_emotion for s in scenes], list(emoset.labels)) >= 0.95


def test_oracle_yes_no_tag_lookup(scenes16, bank4):
    scene = scenes16[0]
    present = next(c for c in bank4.stage1 if c.trigger_ids & scene.trigger_ids)
    absent = next(c for c in bank4.stage1 if c.trigger_ids and not c.trigger_ids & scene.trigger_ids)
    assert oracle_yes_no(scene, present.text, bank4) is Verdict.YES
    assert oracle_yes_no(scene, absent.text, bank4) is Verdict.NO
    assert oracle_yes_no(scene, "", bank4) is Verdict.NO
    neutral = next(c for c in bank4.stage1 if not c.trigger_ids)
    assert oracle_yes_no(scene, neutral.text, bank4) is Verdict.NO


def test_oracle_soundness_over_all_scenes(scenes16, bank4, tax4):
    for scene in scenes16:
        for clause in bank4.stage1:
            expected = Verdict.YES if clause.trigger_ids & scene.trigger_ids else Verdict.NO
            assert oracle_yes_no(scene, clause.text, bank4) is expected
    for clause in bank4.stage2:
        assert oracle_emotion(clause.text, tax4, bank4) == clause.emotion
        for s1 in bank4.stage1:
            assert oracle_emotion(f"{s1.text}\n{clause.text}", tax4, bank4) == clause.emotion


def test_oracle_emotion_sentinel(tax4, bank4):
    assert oracle_emotion("nothing recognisable", tax4, bank4) == NO_MATCH
    two = bank4.stage2[0].text + "\n" + bank4.stage2[1].text
    assert oracle_emotion(two, tax4, bank4) == NO_MATCH


def test_oracle_judge_through_reward_layer(tax4, bank4):
    judge = OracleJudge(bank4)
    fear_clause = next(c for c in bank4.stage2 if c.emotion == "fear")
    assert judge_emotion(judge, fear_clause.text, tax4, COHERENCE_PROMPT) == "fear"


def test_oracle_is_deterministic_across_processes(tmp_path, tax4, bank4):
    scene = generate_dataset(7, 16, tax4, bank=bank4)[2]
    text = bank4.stage1[0].text
    here = oracle_yes_no(scene, text, bank4).value
    code = (
        "from emoreason.taxonomy import load_taxonomy;"
        "from emoreason.clause_bank import build_clause_bank;"
        "from emoreason.synthetic_env import generate_dataset, oracle_yes_no;"
        "t=load_taxonomy('emoset').subset(['amusement','awe','fear','sadness']);b=build_clause_bank(t);"
        f"s=generate_dataset(7,16,t,bank=b)[2];print(oracle_yes_no(s,{text!r},b).value, list(s.features[:3]))"
    )
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout.split(" ", 1)
    assert out[0] == here
    assert out[1].strip() == str(list(scene.features[:3]))


def test_scene_json_round_trip(scenes16):
    for s in scenes16:
        assert SyntheticScene.from_dict(json.loads(json.dumps(s.to_dict()))) == s


def _write(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return path


def test_manifest_well_formed(tmp_path):
    p = _write(
        tmp_path / "m.jsonl",
        [
            json.dumps({"id": "a", "label": "joy"}),
            json.dumps({"id": "b", "label": "Fear", "caption": "a dark alley"}),
            json.dumps({"id": "c", "label": "surprise"}),
        ],
    )
    m = load_manifest(p, "emotion6")
    assert len(m) == 3
    assert m.records[1].label == "fear" and m.records[1].caption == "a dark alley"


def test_manifest_unknown_label_names_line(tmp_path):
    p = _write(tmp_path / "m.jsonl", [json.dumps({"id": "a", "label": "joy"}), json.dumps({"id": "b", "label": "joyful"})])
    with pytest.raises(ManifestError) as err:
        load_manifest(p, "emotion6")
    assert err.value.line == 2


def test_manifest_duplicate_id(tmp_path):
    p = _write(tmp_path / "m.jsonl", [json.dumps({"id": "a", "label": "joy"})] * 2)
    with pytest.raises(ManifestError):
        load_manifest(p, "emotion6")


def test_manifest_empty_file(tmp_path):
    p = _write(tmp_path / "m.jsonl", [])
    assert len(load_manifest(p, "webemo")) == 0
