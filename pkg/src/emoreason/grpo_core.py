"""Group-relative policy optimization over the toy policy.

Rollouts for a prompt are sampled from the old policy, scored, and their
overall rewards are standardized within the group. The clipped surrogate
uses the sequence-level ratio ``pi_theta(o|q) / pi_old(o|q)``; the KL anchor to
the reference policy uses the per-sample estimator ``exp(d) - d - 1`` with
``d = log pi_ref - log pi_theta`` (or the exact categorical KL, for checking).
"""

from __future__ import annotations

import functools
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import toy_policy as tp
from .errors import ConfigurationError, InvalidGroupError, InvalidRatioError, NumericError
from .rewards import Judge, RewardBreakdown, RewardWeights, score_rollout
from .rng import rollout_rng, stream
from .taxonomy import EmotionTaxonomy
from .trace_grammar import ParseFailure, StructuredTrace, parse_trace

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "step",
    "mean_overall",
    "mean_acc",
    "mean_format",
    "mean_cons",
    "mean_coh",
    "mean_kl",
    "objective",
    "wall_ms",
)


@dataclass(frozen=True)
class ObjectiveConfig:
    clip_epsilon: float = 0.2
    kl_beta: float = 0.01
    group_size: int = 8
    std_floor: float = 1e-8
    kl_mode: str = "estimator"  # or "exact"

    def __post_init__(self) -> None:
        if not self.clip_epsilon > 0:
            raise ConfigurationError("clip_epsilon must be > 0")
        if not self.kl_beta >= 0:
            raise ConfigurationError("kl_beta must be >= 0")
        if self.group_size < 2:
            raise ConfigurationError("group_size must be >= 2")
        if not self.std_floor > 0:
            raise ConfigurationError("std_floor must be > 0")
        if self.kl_mode not in ("estimator", "exact"):
            raise ConfigurationError(f"unknown kl_mode {self.kl_mode!r}")


@dataclass
class RolloutGroup:
    prompt_id: str
    scene: Any
    gold: str
    outputs: list[str]
    traces: list[StructuredTrace | ParseFailure]
    choices: list[tp.Choices]
    old_logprobs: np.ndarray
    rewards: list[RewardBreakdown]
    overall: np.ndarray
    mean: float
    std: float
    advantages: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.outputs)
        lengths = {len(self.traces), len(self.choices), len(self.old_logprobs), len(self.rewards), len(self.overall), len(self.advantages)}
        if n < 2 or lengths != {n}:
            raise InvalidGroupError(f"group {self.prompt_id!r} has inconsistent or too-short rollout lists")

    @property
    def size(self) -> int:
        return len(self.outputs)


# -- group statistics --------------------------------------------------------


def group_statistics(overall_rewards: Sequence[float]) -> tuple[float, float]:
    """Population mean and standard deviation (divides by G)."""
    r = np.asarray(overall_rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise InvalidGroupError(f"a group needs at least 2 rewards, got {r.size}")
    mu = float(np.mean(r))
    return mu, float(np.sqrt(np.mean((r - mu) ** 2)))


def normalize_advantages(overall_rewards: Sequence[float], std_floor: float = 1e-8) -> np.ndarray:
    """``(r - mean) / std``; all zeros when std < std_floor."""
    r = np.asarray(overall_rewards, dtype=np.float64)
    mu, sigma = group_statistics(r)
    if sigma < std_floor:
        return np.zeros_like(r)
    return (r - mu) / sigma


# -- objective pieces --------------------------------------------------------


def clip_surrogate(ratio: float, advantage: float, clip_epsilon: float) -> float:
    if not ratio > 0:
        raise InvalidRatioError(f"probability ratio must be > 0, got {ratio}")
    clipped = min(max(ratio, 1.0 - clip_epsilon), 1.0 + clip_epsilon)
    return min(ratio * advantage, clipped * advantage)


def _surrogate_active(ratio: float, advantage: float, clip_epsilon: float) -> bool:
    """True where the unclipped branch attains the min (non-zero gradient)."""
    clipped = min(max(ratio, 1.0 - clip_epsilon), 1.0 + clip_epsilon)
    return ratio * advantage <= clipped * advantage


def kl_term(policy_logprob: float, ref_logprob: float) -> float:
    """Non-negative per-sample KL estimator ``exp(d) - d - 1``, ``d = ref - policy``."""
    if not (math.isfinite(policy_logprob) and math.isfinite(ref_logprob)):
        raise NumericError("log-probabilities must be finite")
    d = ref_logprob - policy_logprob
    if abs(d) < 1e-3:
        # expm1(d) - d cancels catastrophically here; the series is exact to ~1e-15 relative.
        return d * d * (0.5 + d * (1.0 / 6.0 + d * (1.0 / 24.0 + d / 120.0)))
    return max(math.expm1(d) - d, 0.0)


def _current_logprobs(group: RolloutGroup, policy: tp.ToyPolicy) -> np.ndarray:
    lps = tp.head_log_probs(policy, group.scene)
    return np.array([lps[0][c[0]] + lps[1][c[1]] + lps[2][c[2]] + lps[3][c[3]] for c in group.choices])


def _check(group: RolloutGroup, config: ObjectiveConfig) -> None:
    if group.size != config.group_size:
        raise InvalidGroupError(f"group has {group.size} rollouts, config expects {config.group_size}")


def grpo_objective(group: RolloutGroup, policy: tp.ToyPolicy, ref_policy: tp.ToyPolicy, config: ObjectiveConfig) -> float:
    _check(group, config)
    lp = _current_logprobs(group, policy)
    ratios = np.exp(lp - group.old_logprobs)
    surrogate = sum(clip_surrogate(float(r), float(a), config.clip_epsilon) for r, a in zip(ratios, group.advantages))
    surrogate /= group.size
    if config.kl_mode == "exact":
        kl = tp.exact_kl(policy, ref_policy, group.scene)
    else:
        lp_ref = _current_logprobs(group, ref_policy)
        kl = sum(kl_term(float(a), float(b)) for a, b in zip(lp, lp_ref)) / group.size
    return float(surrogate - config.kl_beta * kl)


def _exact_kl_gradient(policy: tp.ToyPolicy, ref_policy: tp.ToyPolicy, scene) -> list[np.ndarray]:
    x = np.asarray(scene.features if hasattr(scene, "features") else scene, dtype=np.float64)
    grads = []
    for lp, lq in zip(tp.head_log_probs(policy, scene), tp.head_log_probs(ref_policy, scene)):
        p = np.exp(lp)
        diff = lp - lq
        grads.append(np.outer(p * (diff - np.sum(p * diff)), x) / policy.temperature)
    return grads


def grpo_gradient(
    group: RolloutGroup, policy: tp.ToyPolicy, ref_policy: tp.ToyPolicy, config: ObjectiveConfig
) -> tuple[np.ndarray, ...]:
    """Exact gradient of grpo_objective w.r.t. the policy heads."""
    _check(group, config)
    lp = _current_logprobs(group, policy)
    ratios = np.exp(lp - group.old_logprobs)
    G = group.size
    coef = np.zeros(G)
    for i, (r, a) in enumerate(zip(ratios, group.advantages)):
        if _surrogate_active(float(r), float(a), config.clip_epsilon):
            coef[i] = r * a
    if config.kl_mode == "estimator" and config.kl_beta:
        lp_ref = _current_logprobs(group, ref_policy)
        # d/dtheta [exp(d) - d - 1] = (1 - exp(d)) * dlogpi, d = ref - theta
        coef -= config.kl_beta * (1.0 - np.exp(lp_ref - lp))
    coef /= G

    x = np.asarray(group.scene.features, dtype=np.float64)
    grads = []
    for h, lps in enumerate(tp.head_log_probs(policy, group.scene)):
        weights = np.zeros(lps.shape[0])
        for c, w in zip(group.choices, coef):
            weights[c[h]] += w
        weights -= coef.sum() * np.exp(lps)
        grads.append(np.outer(weights, x) / policy.temperature)
    if config.kl_mode == "exact" and config.kl_beta:
        for g, k in zip(grads, _exact_kl_gradient(policy, ref_policy, group.scene)):
            g -= config.kl_beta * k
    return tuple(grads)


def batch_objective(groups: Sequence[RolloutGroup], policy, ref_policy, config: ObjectiveConfig) -> float:
    return float(np.mean([grpo_objective(g, policy, ref_policy, config) for g in groups]))


def batch_gradient(groups: Sequence[RolloutGroup], policy, ref_policy, config: ObjectiveConfig) -> tuple[np.ndarray, ...]:
    total = [np.zeros_like(h) for h in policy.heads]
    for g in groups:
        for t, part in zip(total, grpo_gradient(g, policy, ref_policy, config)):
            t += part
    return tuple(t / len(groups) for t in total)


# -- sampling & scoring ------------------------------------------------------


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def sample_group(
    scene,
    old_policy: tp.ToyPolicy,
    *,
    judge: Judge,
    weights: RewardWeights,
    config: ObjectiveConfig,
    seed: int,
    step: int,
    workers: int = 1,
    slot: int = 0,
    scene_ref: Any = None,
) -> RolloutGroup:
    """Sample G rollouts for one prompt, score them, and compute advantages."""
    taxonomy: EmotionTaxonomy = old_policy.taxonomy
    G = config.group_size
    lps = tp.head_log_probs(old_policy, scene)
    rollouts = [tp.sample_from_log_probs(old_policy, lps, rollout_rng(seed, step, scene.scene_id, i, slot)) for i in range(G)]
    ref = scene if scene_ref is None else scene_ref

    def score(ro: tp.Rollout) -> RewardBreakdown:
        return score_rollout(ro.text, ref, scene.gold_emotion, taxonomy, weights, judge)

    rewards = _map(score, rollouts, workers if getattr(judge, "concurrent_safe", False) else 1)
    overall = np.array([b.overall for b in rewards])
    mu, sigma = group_statistics(overall)
    return RolloutGroup(
        prompt_id=scene.scene_id,
        scene=scene,
        gold=scene.gold_emotion,
        outputs=[ro.text for ro in rollouts],
        traces=[parse_trace(ro.text) for ro in rollouts],
        choices=[ro.choices for ro in rollouts],
        old_logprobs=np.array([ro.logprob for ro in rollouts]),
        rewards=rewards,
        overall=overall,
        mean=mu,
        std=sigma,
        advantages=normalize_advantages(overall, config.std_floor),
    )


# -- training loop -----------------------------------------------------------


@dataclass(frozen=True)
class OptimizerState:
    """Plain gradient ascent with a fixed learning rate."""

    learning_rate: float = 0.05
    step: int = 0


@dataclass(frozen=True)
class StepMetrics:
    step: int
    mean_overall: float
    mean_acc: float
    mean_format: float
    mean_cons: float
    mean_coh: float
    mean_kl: float
    objective: float
    wall_ms: float | None = None

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in METRIC_FIELDS})


def training_step(
    prompts: Sequence,
    policy: tp.ToyPolicy,
    ref_policy: tp.ToyPolicy,
    judge: Judge,
    weights: RewardWeights,
    config: ObjectiveConfig,
    optimizer_state: OptimizerState,
    *,
    seed: int = 0,
    workers: int = 1,
    record_wall_time: bool = False,
) -> tuple[tp.ToyPolicy, OptimizerState, StepMetrics]:
    """One sample-score-update iteration. Returns the new policy and state.

    The old policy is a snapshot of ``policy`` taken at entry. Nothing is
    mutated: if scoring fails the exception propagates and the caller's
    policy and optimizer state are untouched.
    """
    if not prompts:
        raise ConfigurationError("training_step needs at least one prompt")
    t0 = time.perf_counter()
    step = optimizer_state.step
    old_policy = tp.snapshot(policy)

    def one(item: tuple[int, Any]) -> RolloutGroup:
        slot, scene = item
        return sample_group(scene, old_policy, judge=judge, weights=weights, config=config, seed=seed, step=step, slot=slot)

    groups = _map(one, list(enumerate(prompts)), workers if getattr(judge, "concurrent_safe", False) else 1)

    grads = batch_gradient(groups, policy, ref_policy, config)
    new_policy = tp.sgd_step(policy, grads, optimizer_state.learning_rate)

    all_rewards = [b for g in groups for b in g.rewards]
    kls = []
    for g in groups:
        lp_ref = _current_logprobs(g, ref_policy)
        kls.extend(kl_term(float(a), float(b)) for a, b in zip(g.old_logprobs, lp_ref))
    metrics = StepMetrics(
        step=step,
        mean_overall=float(np.mean([b.overall for b in all_rewards])),
        mean_acc=float(np.mean([b.accuracy for b in all_rewards])),
        mean_format=float(np.mean([b.format for b in all_rewards])),
        mean_cons=float(np.mean([b.consistency for b in all_rewards])),
        mean_coh=float(np.mean([b.coherence for b in all_rewards])),
        mean_kl=float(np.mean(kls)),
        objective=batch_objective(groups, new_policy, ref_policy, config),
        wall_ms=round((time.perf_counter() - t0) * 1000.0, 3) if record_wall_time else None,
    )
    return new_policy, replace(optimizer_state, step=step + 1), metrics


@dataclass(frozen=True)
class ColdStartConfig:
    enabled: bool = False
    n_demos: int = 256
    epochs: int = 2
    lr: float = 0.5
    batch_size: int = 16


@dataclass(frozen=True)
class TrainConfig:
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    weights: RewardWeights = field(default_factory=RewardWeights)
    learning_rate: float = 0.05
    steps: int = 100
    batch_size: int = 8
    seed: int = 0
    workers: int = 1
    record_wall_time: bool = False
    cold_start: ColdStartConfig = field(default_factory=ColdStartConfig)

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ConfigurationError("steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if not self.learning_rate >= 0:
            raise ConfigurationError("learning_rate must be >= 0")


@functools.lru_cache(maxsize=64)
def _epoch_order(seed: int, epoch: int, n: int) -> tuple[int, ...]:
    return tuple(int(i) for i in stream(seed, "epoch-order", epoch).permutation(n))


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> list[int]:
    """Indices for a step: consecutive slices of per-epoch seeded permutations."""
    start = step * batch_size
    return [_epoch_order(seed, pos // n, n)[pos % n] for pos in range(start, start + batch_size)]


def cold_start(policy: tp.ToyPolicy, dataset: Sequence, cfg: ColdStartConfig, seed: int) -> tp.ToyPolicy:
    demos = tp.make_demonstrations(dataset, policy.taxonomy, policy.bank, cfg.n_demos, stream(seed, "cold-start"))
    return tp.sft_update(policy, demos, cfg.epochs, cfg.lr, cfg.batch_size)


def run_training(
    config: TrainConfig,
    dataset: Sequence,
    judge: Judge,
    policy: tp.ToyPolicy,
    *,
    metrics_path: str | Path | None = None,
    on_step: Callable[[StepMetrics], None] | None = None,
    stop_when: Callable[[list[StepMetrics]], bool] | None = None,
) -> tuple[tp.ToyPolicy, list[StepMetrics]]:
    """Optional cold start, then ``config.steps`` training steps.

    The reference policy is frozen after cold start. One metrics record per
    step is appended to ``metrics_path`` as it is produced, so a failing run
    leaves its partial log behind. ``stop_when`` may end the run early.
    """
    if not dataset:
        raise ConfigurationError("dataset must not be empty")
    if config.objective.group_size < 2:
        raise ConfigurationError("group_size must be >= 2")
    if config.cold_start.enabled:
        policy = cold_start(policy, dataset, config.cold_start, config.seed)
    ref_policy = tp.snapshot(policy)
    state = OptimizerState(learning_rate=config.learning_rate)
    history: list[StepMetrics] = []
    fh = Path(metrics_path).open("w", encoding="utf-8") if metrics_path is not None else None
    try:
        for step in range(config.steps):
            prompts = [dataset[i] for i in batch_indices(len(dataset), config.batch_size, step, config.seed)]
            policy, state, metrics = training_step(
                prompts,
                policy,
                ref_policy,
                judge,
                config.weights,
                config.objective,
                state,
                seed=config.seed,
                workers=config.workers,
                record_wall_time=config.record_wall_time,
            )
            history.append(metrics)
            if fh is not None:
                fh.write(metrics.to_json() + "\n")
                fh.flush()
            if on_step is not None:
                on_step(metrics)
            if stop_when is not None and stop_when(history):
                break
    finally:
        if fh is not None:
            fh.close()
    return policy, history


def metrics_dicts(history: Sequence[StepMetrics]) -> list[dict]:
    return [asdict(m) for m in history]
