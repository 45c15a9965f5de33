"""Factored linear-softmax policy over clause choices and answer labels.

An output is four categorical draws conditioned on the scene features: one
clause per reasoning stage and one answer label. Its log-probability is the
sum of the four log-softmax terms, so log-probs and gradients are exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .clause_bank import ClauseBank, build_clause_bank
from .errors import CheckpointError, ConfigurationError
from .taxonomy import NO_MATCH, EmotionTaxonomy
from .trace_grammar import StructuredTrace, render_trace

CHECKPOINT_VERSION = 1
HEAD_NAMES = ("stage1", "stage2", "stage3", "answer")

Choices = tuple[int, int, int, int]


class Rollout(NamedTuple):
    text: str
    choices: Choices
    logprob: float


@dataclass(frozen=True, eq=False)
class ToyPolicy:
    heads: tuple[np.ndarray, ...]
    bank: ClauseBank
    taxonomy: EmotionTaxonomy
    temperature: float = 1.0
    feature_dim: int = field(init=False)

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        heads = tuple(np.array(h, dtype=np.float64) for h in self.heads)
        if len(heads) != 4:
            raise ConfigurationError("policy needs exactly four heads")
        sizes = (*self.bank.sizes, len(self.taxonomy))
        d = heads[0].shape[1] if heads[0].ndim == 2 else -1
        for name, h, k in zip(HEAD_NAMES, heads, sizes):
            if h.ndim != 2 or h.shape != (k, d):
                raise ConfigurationError(f"head {name} has shape {h.shape}, expected {(k, d)}")
            if not np.all(np.isfinite(h)):
                raise ConfigurationError(f"head {name} has non-finite parameters")
            h.setflags(write=False)
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "feature_dim", d)

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(h.shape[0] for h in self.heads)

    @property
    def n_params(self) -> int:
        return sum(h.size for h in self.heads)

    def flat(self) -> np.ndarray:
        return np.concatenate([h.ravel() for h in self.heads])

    def with_flat(self, vec: np.ndarray) -> "ToyPolicy":
        return ToyPolicy(unflatten(vec, self.heads), self.bank, self.taxonomy, self.temperature)

    def with_heads(self, heads: Sequence[np.ndarray]) -> "ToyPolicy":
        return ToyPolicy(tuple(heads), self.bank, self.taxonomy, self.temperature)

    def same_parameters(self, other: "ToyPolicy") -> bool:
        return self.temperature == other.temperature and all(
            np.array_equal(a, b) for a, b in zip(self.heads, other.heads)
        )


def unflatten(vec: np.ndarray, like: Sequence[np.ndarray]) -> tuple[np.ndarray, ...]:
    out, i = [], 0
    for h in like:
        out.append(np.asarray(vec[i : i + h.size], dtype=np.float64).reshape(h.shape))
        i += h.size
    if i != len(vec):
        raise ConfigurationError(f"flat vector has {len(vec)} entries, expected {i}")
    return tuple(out)


def flatten(parts: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.ravel(p) for p in parts])


def init_policy(
    taxonomy: EmotionTaxonomy,
    feature_dim: int,
    bank: ClauseBank | None = None,
    *,
    scale: float = 0.0,
    rng: np.random.Generator | None = None,
    temperature: float = 1.0,
) -> ToyPolicy:
    """Zero (uniform) policy, or Gaussian weights of std ``scale``."""
    bank = bank or build_clause_bank(taxonomy)
    sizes = (*bank.sizes, len(taxonomy))
    if scale:
        if rng is None:
            raise ConfigurationError("random initialization needs an rng")
        heads = tuple(rng.normal(0.0, scale, size=(k, feature_dim)) for k in sizes)
    else:
        heads = tuple(np.zeros((k, feature_dim)) for k in sizes)
    return ToyPolicy(heads, bank, taxonomy, temperature)


def adversarial_policy(
    taxonomy: EmotionTaxonomy,
    feature_dim: int,
    bank: ClauseBank | None = None,
    strength: float = 3.0,
) -> ToyPolicy:
    """Policy whose answer and reflection heads prefer a wrong emotion for every scene.

    Emotion one-hot feature ``j`` (see synthetic_env's layout) pushes the
    answer head and the reflection head toward label ``j+1 mod K``.
    """
    policy = init_policy(taxonomy, feature_dim, bank)
    k = len(taxonomy)
    answer = np.zeros((k, feature_dim))
    reflect = np.zeros((len(policy.bank.stage2), feature_dim))
    for j in range(k):
        wrong = (j + 1) % k
        answer[wrong, 1 + j] = strength
        reflect[wrong, 1 + j] = strength
    heads = list(policy.heads)
    heads[1] = reflect
    heads[3] = answer
    return policy.with_heads(heads)


def _features(policy: ToyPolicy, scene) -> np.ndarray:
    x = np.asarray(getattr(scene, "features", scene), dtype=np.float64)
    if x.shape != (policy.feature_dim,):
        raise ConfigurationError(f"scene feature dimension {x.shape} does not match policy ({policy.feature_dim},)")
    return x


def _log_softmax(z: np.ndarray) -> np.ndarray:
    s = z - z.max()
    return s - np.log(np.exp(s).sum())


def head_log_probs(policy: ToyPolicy, scene) -> list[np.ndarray]:
    x = _features(policy, scene)
    return [_log_softmax(h @ x / policy.temperature) for h in policy.heads]


def head_probs(policy: ToyPolicy, scene) -> list[np.ndarray]:
    return [np.exp(lp) for lp in head_log_probs(policy, scene)]


def _check_choices(policy: ToyPolicy, choices: Sequence[int]) -> Choices:
    if len(choices) != 4:
        raise ConfigurationError("choices must have four entries")
    out = tuple(int(c) for c in choices)
    for c, k in zip(out, policy.sizes):
        if not 0 <= c < k:
            raise ConfigurationError(f"choice {c} out of range for head of size {k}")
    return out  # type: ignore[return-value]


def log_prob(policy: ToyPolicy, scene, choices: Sequence[int]) -> float:
    choices = _check_choices(policy, choices)
    lps = head_log_probs(policy, scene)
    return float(lps[0][choices[0]] + lps[1][choices[1]] + lps[2][choices[2]] + lps[3][choices[3]])


def log_prob_gradient(policy: ToyPolicy, scene, choices: Sequence[int]) -> tuple[np.ndarray, ...]:
    """Per-head gradient of log pi(choices | scene): ``(onehot - p) x^T / T``."""
    choices = _check_choices(policy, choices)
    x = _features(policy, scene)
    grads = []
    for lp, c in zip(head_log_probs(policy, scene), choices):
        g = -np.exp(lp)
        g[c] += 1.0
        grads.append(np.outer(g, x) / policy.temperature)
    return tuple(grads)


def trace_for(policy: ToyPolicy, choices: Sequence[int]) -> StructuredTrace:
    bank = policy.bank
    return StructuredTrace(
        step1=bank.stage1[choices[0]].text,
        step2=bank.stage2[choices[1]].text,
        step3=bank.stage3[choices[2]].text,
        answer=policy.taxonomy.labels[choices[3]],
    )


def _draw(p: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    return min(idx, len(p) - 1)


def sample_output(policy: ToyPolicy, scene, rng: np.random.Generator) -> Rollout:
    return sample_from_log_probs(policy, head_log_probs(policy, scene), rng)


def sample_from_log_probs(policy: ToyPolicy, lps: Sequence[np.ndarray], rng: np.random.Generator) -> Rollout:
    """Sample with precomputed head log-probs (reused across a rollout group)."""
    u = rng.random(4)
    choices = tuple(_draw(np.exp(lp), float(ui)) for lp, ui in zip(lps, u))
    text = render_trace(trace_for(policy, choices))
    logprob = float(lps[0][choices[0]] + lps[1][choices[1]] + lps[2][choices[2]] + lps[3][choices[3]])
    return Rollout(text, choices, logprob)  # type: ignore[arg-type]


def greedy_choices(policy: ToyPolicy, scene) -> Choices:
    return tuple(int(np.argmax(lp)) for lp in head_log_probs(policy, scene))  # type: ignore[return-value]


def greedy_output(policy: ToyPolicy, scene) -> Rollout:
    choices = greedy_choices(policy, scene)
    return Rollout(render_trace(trace_for(policy, choices)), choices, log_prob(policy, scene, choices))


def snapshot(policy: ToyPolicy) -> ToyPolicy:
    """Deep, read-only copy of the parameters."""
    return policy.with_heads([h.copy() for h in policy.heads])


def exact_kl(policy: ToyPolicy, ref: ToyPolicy, scene) -> float:
    """KL(policy || ref) of the joint; the factored joint's KL is the sum over heads."""
    total = 0.0
    for lp, lq in zip(head_log_probs(policy, scene), head_log_probs(ref, scene)):
        total += float(np.sum(np.exp(lp) * (lp - lq)))
    return total


def sgd_step(policy: ToyPolicy, grads: Sequence[np.ndarray], lr: float) -> ToyPolicy:
    """Gradient ascent step; returns a new policy."""
    return policy.with_heads([h + lr * g for h, g in zip(policy.heads, grads)])


# -- cold start --------------------------------------------------------------


def mean_log_likelihood(policy: ToyPolicy, demonstrations: Sequence[tuple[object, Sequence[int]]]) -> float:
    return float(np.mean([log_prob(policy, s, c) for s, c in demonstrations]))


def sft_update(
    policy: ToyPolicy,
    demonstrations: Sequence[tuple[object, Sequence[int]]],
    epochs: int,
    lr: float,
    batch_size: int = 16,
) -> ToyPolicy:
    """Minibatch gradient ascent on the demonstrations' mean log-likelihood.

    Minibatches are taken in the given order, so the update is deterministic.
    """
    if not demonstrations:
        raise ConfigurationError("cold start needs at least one demonstration")
    if epochs < 0 or batch_size < 1:
        raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
    for scene, choices in demonstrations:
        _check_choices(policy, choices)
    for _ in range(epochs):
        for start in range(0, len(demonstrations), batch_size):
            batch = demonstrations[start : start + batch_size]
            acc = [np.zeros_like(h) for h in policy.heads]
            for scene, choices in batch:
                for a, g in zip(acc, log_prob_gradient(policy, scene, choices)):
                    a += g
            policy = sgd_step(policy, [a / len(batch) for a in acc], lr)
    return policy


def oracle_choices(policy_or_bank, taxonomy: EmotionTaxonomy, scene, rng: np.random.Generator) -> Choices:
    """Clause choices an ideal responder would make for a synthetic scene."""
    bank: ClauseBank = getattr(policy_or_bank, "bank", policy_or_bank)
    own = scene.trigger_ids & set(bank.triggers_for(scene.gold_emotion))
    grounded = [i for i, c in enumerate(bank.stage1) if c.trigger_ids & own] or [
        i for i, c in enumerate(bank.stage1) if c.trigger_ids & scene.trigger_ids
    ]
    if not grounded:
        raise ConfigurationError(f"scene {scene.scene_id} has no trigger the clause bank can mention")
    s1 = grounded[int(rng.integers(0, len(grounded)))]
    s2 = next(i for i, c in enumerate(bank.stage2) if c.emotion == scene.gold_emotion)
    s3 = next(i for i, c in enumerate(bank.stage3) if (c.valence, c.arousal) == (scene.valence, scene.arousal))
    return (s1, s2, s3, taxonomy.index(scene.gold_emotion))


def make_demonstrations(
    scenes: Sequence, taxonomy: EmotionTaxonomy, bank: ClauseBank, n: int, rng: np.random.Generator
) -> list[tuple[object, Choices]]:
    """``n`` (scene, oracle-consistent choices) pairs, cycling over a shuffled scene list."""
    if not scenes:
        raise ConfigurationError("no scenes to build demonstrations from")
    order = rng.permutation(len(scenes))
    return [
        (scenes[order[i % len(scenes)]], oracle_choices(bank, taxonomy, scenes[order[i % len(scenes)]], rng))
        for i in range(n)
    ]


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(policy: ToyPolicy, path: str | Path) -> None:
    payload = {
        "format": "emoreason-toy-policy",
        "version": CHECKPOINT_VERSION,
        "temperature": policy.temperature,
        "bank_sha256": policy.bank.fingerprint(),
        "taxonomy_sha256": policy.taxonomy.fingerprint(),
        "taxonomy_labels": list(policy.taxonomy.labels),
        "heads": {name: h.tolist() for name, h in zip(HEAD_NAMES, policy.heads)},
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path, taxonomy: EmotionTaxonomy, bank: ClauseBank | None = None) -> ToyPolicy:
    """Load a checkpoint; rejects files written for a different bank or taxonomy."""
    bank = bank or build_clause_bank(taxonomy)
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if payload.get("format") != "emoreason-toy-policy" or payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError("unsupported checkpoint format or version")
    if payload.get("taxonomy_sha256") != taxonomy.fingerprint():
        raise CheckpointError("checkpoint was written for a different taxonomy")
    if payload.get("bank_sha256") != bank.fingerprint():
        raise CheckpointError("checkpoint was written for a different clause bank")
    heads = tuple(np.asarray(payload["heads"][name], dtype=np.float64) for name in HEAD_NAMES)
    return ToyPolicy(heads, bank, taxonomy, float(payload["temperature"]))


class SelfJudge:
    """Judge answering from a frozen policy's own beliefs.

    Consistency: Yes iff the policy, looking at the scene, puts more than
    uniform probability on the stage-1 clause found in the text. Coherence:
    the emotion tag of the reflection clause found in the text.
    """

    concurrent_safe = True

    def __init__(self, policy: ToyPolicy):
        self.policy = snapshot(policy)

    def judge_yes_no(self, scene_ref, text: str, prompt: str) -> str:
        stage1 = self.policy.bank.stage1
        idx = next((i for i, c in enumerate(stage1) if c.text in text), None)
        if idx is None:
            return "No"
        p = np.exp(head_log_probs(self.policy, scene_ref)[0][idx])
        return "Yes" if p > 1.0 / len(stage1) else "No"

    def judge_emotion(self, text: str, prompt: str, taxonomy: EmotionTaxonomy) -> str:
        found = {c.emotion for c in self.policy.bank.stage2 if c.text in text}
        return found.pop() if len(found) == 1 else NO_MATCH
