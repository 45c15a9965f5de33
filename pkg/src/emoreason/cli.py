"""Command-line entry point: data generation, cold start, training, evaluation, scoring."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import grpo_core as gc
from . import toy_policy as tp
from .clause_bank import build_clause_bank
from .errors import ConfigurationError, EmoReasonError, JudgeError
from .remote_judge import RemoteJudge, RemoteJudgeConfig
from .rewards import RewardWeights, ZERO_BREAKDOWN, score_rollout
from .rng import stream
from .synthetic_env import OracleJudge, SyntheticScene, generate_dataset, load_manifest, read_scenes, write_jsonl
from .taxonomy import EmotionTaxonomy, load_taxonomy
from .trace_grammar import parse_trace

log = logging.getLogger("emoreason")

# Learning rate for full-scale fine-tuning; kept in the config for reference, unused by the toy policy.
FULL_SCALE_LEARNING_RATE = 2.0e-6


@dataclass
class RunConfig:
    seed: int = 0
    taxonomy: str = "emoset"
    labels: list[str] | None = None
    dataset: dict[str, Any] = field(default_factory=lambda: {"kind": "synthetic", "n": 64, "d": None})
    group_size: int = 8
    batch_size: int = 8
    lambda1: float = 0.1
    lambda2: float = 0.1
    clip_epsilon: float = 0.2
    kl_beta: float = 0.01
    kl_mode: str = "estimator"
    std_floor: float = 1e-8
    learning_rate: float = 0.05
    full_scale_learning_rate: float = FULL_SCALE_LEARNING_RATE
    steps: int = 100
    temperature: float = 1.0
    init: dict[str, Any] = field(default_factory=lambda: {"kind": "zeros", "scale": 0.0})
    cold_start: dict[str, Any] = field(
        default_factory=lambda: {"enabled": False, "n_demos": 256, "epochs": 2, "lr": 0.5, "batch_size": 16}
    )
    judge: dict[str, Any] = field(default_factory=lambda: {"kind": "oracle"})
    workers: int = 1
    log_wall_time: bool = False
    out: str = "runs/default"

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    # Validation builds every derived object, so nothing touches disk on bad input.
    def load_taxonomy(self) -> EmotionTaxonomy:
        tax = load_taxonomy(self.taxonomy)
        return tax.subset(self.labels) if self.labels else tax

    def weights(self) -> RewardWeights:
        return RewardWeights(self.lambda1, self.lambda2)

    def train_config(self) -> gc.TrainConfig:
        try:
            cold = gc.ColdStartConfig(**dict(self.cold_start))
        except TypeError as exc:
            raise ConfigurationError(f"bad cold_start section: {exc}") from None
        return gc.TrainConfig(
            objective=gc.ObjectiveConfig(
                clip_epsilon=self.clip_epsilon,
                kl_beta=self.kl_beta,
                group_size=self.group_size,
                std_floor=self.std_floor,
                kl_mode=self.kl_mode,
            ),
            weights=self.weights(),
            learning_rate=self.learning_rate,
            steps=self.steps,
            batch_size=self.batch_size,
            seed=self.seed,
            workers=self.workers,
            record_wall_time=self.log_wall_time,
            cold_start=cold,
        )

    def validate(self) -> None:
        tax = self.load_taxonomy()
        self.train_config()
        kind = self.dataset.get("kind")
        if kind == "synthetic":
            n = int(self.dataset.get("n", 0))
            if n < len(tax):
                raise ConfigurationError(f"synthetic dataset needs n >= {len(tax)}")
        elif kind == "scenes":
            if not Path(self.dataset.get("path", "")).exists():
                raise ConfigurationError(f"scenes file not found: {self.dataset.get('path')}")
        elif kind == "manifest":
            if not Path(self.dataset.get("path", "")).exists():
                raise ConfigurationError(f"manifest not found: {self.dataset.get('path')}")
        else:
            raise ConfigurationError(f"unknown dataset kind {kind!r}")
        jk = self.judge.get("kind")
        if jk not in ("oracle", "self", "remote"):
            raise ConfigurationError(f"unknown judge kind {jk!r}")
        if jk == "remote":
            RemoteJudgeConfig.from_dict(self.judge.get("remote") or {})
        if self.init.get("kind", "zeros") not in ("zeros", "random", "adversarial", "checkpoint"):
            raise ConfigurationError(f"unknown init kind {self.init.get('kind')!r}")
        if self.temperature <= 0:
            raise ConfigurationError("temperature must be > 0")


# -- helpers -----------------------------------------------------------------


def _scenes(cfg: RunConfig, tax: EmotionTaxonomy):
    kind = cfg.dataset["kind"]
    if kind == "synthetic":
        return generate_dataset(cfg.seed, int(cfg.dataset["n"]), tax, cfg.dataset.get("d"))
    if kind == "scenes":
        return read_scenes(cfg.dataset["path"])
    raise ConfigurationError("manifest datasets carry no features; the toy policy cannot train or decode on them")


def _initial_policy(cfg: RunConfig, tax: EmotionTaxonomy, d: int, checkpoint: str | None = None) -> tp.ToyPolicy:
    bank = build_clause_bank(tax)
    kind = cfg.init.get("kind", "zeros")
    path = checkpoint or (cfg.init.get("path") if kind == "checkpoint" else None)
    if path:
        return tp.load_checkpoint(path, tax, bank)
    if kind == "adversarial":
        return tp.adversarial_policy(tax, d, bank, float(cfg.init.get("strength", 3.0)))
    scale = float(cfg.init.get("scale", 0.0)) if kind == "random" else 0.0
    return tp.init_policy(tax, d, bank, scale=scale, rng=stream(cfg.seed, "init"), temperature=cfg.temperature)


def _judge(cfg: RunConfig, tax: EmotionTaxonomy, policy: tp.ToyPolicy | None = None):
    kind = cfg.judge.get("kind", "oracle")
    if kind == "oracle":
        return OracleJudge(build_clause_bank(tax))
    if kind == "self":
        if policy is None:
            raise ConfigurationError("the self judge needs a policy")
        return tp.SelfJudge(policy)
    return CaptioningJudge(RemoteJudge(RemoteJudgeConfig.from_dict(cfg.judge["remote"])), build_clause_bank(tax))


class CaptioningJudge:
    """Hands a remote judge the text description of a synthetic scene instead of the scene object."""

    def __init__(self, inner, bank):
        self.inner, self.bank = inner, bank
        self.concurrent_safe = getattr(inner, "concurrent_safe", False)

    def judge_yes_no(self, scene_ref: Any, text: str, prompt: str) -> str:
        if isinstance(scene_ref, SyntheticScene):
            scene_ref = scene_ref.describe(self.bank)
        return self.inner.judge_yes_no(scene_ref, text, prompt)

    def judge_emotion(self, text: str, prompt: str, taxonomy: EmotionTaxonomy) -> str:
        return self.inner.judge_emotion(text, prompt, taxonomy)


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def write_metrics_csv(path: Path, rows: Sequence[dict]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(gc.METRIC_FIELDS))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# -- commands ----------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> Path:
    cfg.validate()
    tax = cfg.load_taxonomy()
    scenes = _scenes(cfg, tax)
    out = _prepare_out(cfg)
    write_jsonl(out / "scenes.jsonl", (s.to_dict() for s in scenes))
    write_jsonl(out / "manifest.jsonl", ({"id": s.scene_id, "label": s.gold_emotion} for s in scenes))
    (out / "taxonomy.json").write_text(json.dumps(tax.to_dict(), indent=2) + "\n", encoding="utf-8")
    return out


def cmd_cold_start(cfg: RunConfig) -> Path:
    cfg.validate()
    tax = cfg.load_taxonomy()
    scenes = _scenes(cfg, tax)
    cs = cfg.train_config().cold_start
    policy = _initial_policy(cfg, tax, len(scenes[0].features))
    demos = tp.make_demonstrations(scenes, tax, policy.bank, cs.n_demos, stream(cfg.seed, "cold-start"))
    out = _prepare_out(cfg)
    curve = [(0, tp.mean_log_likelihood(policy, demos))]
    for epoch in range(1, cs.epochs + 1):
        policy = tp.sft_update(policy, demos, 1, cs.lr, cs.batch_size)
        curve.append((epoch, tp.mean_log_likelihood(policy, demos)))
    tp.save_checkpoint(policy, out / "checkpoint.json")
    with (out / "sft_curve.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_log_likelihood", "loss"])
        for epoch, ll in curve:
            writer.writerow([epoch, ll, -ll])
    return out


def cmd_train(cfg: RunConfig, checkpoint: str | None = None) -> Path:
    cfg.validate()
    tax = cfg.load_taxonomy()
    scenes = _scenes(cfg, tax)
    train_cfg = cfg.train_config()
    policy = _initial_policy(cfg, tax, len(scenes[0].features), checkpoint)
    judge_policy = gc.cold_start(policy, scenes, train_cfg.cold_start, cfg.seed) if train_cfg.cold_start.enabled else policy
    judge = _judge(cfg, tax, judge_policy)
    out = _prepare_out(cfg)
    history: list[gc.StepMetrics] = []
    try:
        policy, history = gc.run_training(
            train_cfg, scenes, judge, policy, metrics_path=out / "metrics.jsonl", on_step=history.append
        )
    finally:
        write_metrics_csv(out / "metrics.csv", gc.metrics_dicts(history))
    tp.save_checkpoint(policy, out / "checkpoint.json")
    return out


def evaluate(policy: tp.ToyPolicy, scenes: Sequence, judge, weights: RewardWeights) -> dict[str, Any]:
    """Greedy decoding; accuracy overall and per class plus mean reward components."""
    tax = policy.taxonomy
    per_class = {lab: [0, 0] for lab in tax.labels}
    sums = dict.fromkeys(("format", "accuracy", "consistency", "coherence", "rer", "overall"), 0.0)
    for scene in scenes:
        ro = tp.greedy_output(policy, scene)
        b = score_rollout(ro.text, scene, scene.gold_emotion, tax, weights, judge)
        per_class[scene.gold_emotion][0] += 1
        per_class[scene.gold_emotion][1] += b.accuracy
        for k in sums:
            sums[k] += getattr(b, k)
    n = len(scenes)
    return {
        "n": n,
        "acc": sum(c for _, c in per_class.values()) / n,
        "per_class": {lab: {"n": k, "acc": (c / k if k else None)} for lab, (k, c) in per_class.items()},
        "mean_rewards": {k: v / n for k, v in sums.items()},
        "taxonomy": tax.name,
    }


REPORT_SCHEMA = {
    "type": "object",
    "required": ["n", "acc", "per_class", "mean_rewards", "taxonomy"],
    "properties": {
        "n": {"type": "integer", "minimum": 1},
        "acc": {"type": "number", "minimum": 0, "maximum": 1},
        "per_class": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["n", "acc"],
                "properties": {"n": {"type": "integer"}, "acc": {"type": ["number", "null"]}},
            },
        },
        "mean_rewards": {
            "type": "object",
            "required": ["format", "accuracy", "consistency", "coherence", "rer", "overall"],
            "additionalProperties": {"type": "number", "minimum": 0, "maximum": 1},
        },
        "taxonomy": {"type": "string"},
    },
}


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None) -> Path:
    cfg.validate()
    tax = cfg.load_taxonomy()
    scenes = _scenes(cfg, tax)
    policy = _initial_policy(cfg, tax, len(scenes[0].features), checkpoint)
    judge = _judge(cfg, tax, policy)
    report = evaluate(policy, scenes, judge, cfg.weights())
    out = _prepare_out(cfg)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return out


def cmd_score_traces(cfg: RunConfig, traces: str, checkpoint: str | None = None) -> Path:
    """Score externally produced traces (JSONL ``{"id", "output"}``) against the dataset."""
    cfg.validate()
    if not Path(traces).exists():
        raise ConfigurationError(f"traces file not found: {traces}")
    tax = cfg.load_taxonomy()
    if cfg.dataset["kind"] == "manifest":
        manifest = load_manifest(cfg.dataset["path"], tax)
        refs = {r.id: r for r in manifest.records}
        gold = {r.id: r.label for r in manifest.records}
        policy = None
    else:
        scenes = _scenes(cfg, tax)
        refs = {s.scene_id: s for s in scenes}
        gold = {s.scene_id: s.gold_emotion for s in scenes}
        policy = _initial_policy(cfg, tax, len(scenes[0].features), checkpoint) if cfg.judge.get("kind") == "self" else None
    judge = _judge(cfg, tax, policy)
    weights = cfg.weights()
    rows = []
    with Path(traces).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            rid = rec.get("id")
            if rid not in refs:
                raise ConfigurationError(f"traces line {lineno}: id {rid!r} not in dataset")
            output = rec.get("output", "")
            parsed = parse_trace(output)
            b = score_rollout(output, refs[rid], gold[rid], tax, weights, judge) if parsed else ZERO_BREAKDOWN
            rows.append(
                {
                    "id": rid,
                    **b.to_dict(),
                    "malformed": not parsed,
                    "failure": None if parsed else parsed.kind.value,
                }
            )
    out = _prepare_out(cfg)
    write_jsonl(out / "scored.jsonl", rows)
    return out


# -- argument parsing --------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emoreason", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON run config; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--steps", type=int)
        p.add_argument("--group-size", type=int, dest="group_size")
        p.add_argument("--lambda1", type=float)
        p.add_argument("--lambda2", type=float)
        p.add_argument("--judge", choices=["oracle", "self", "remote"])
        p.add_argument("--out")
        p.add_argument("-v", "--verbose", action="store_true")

    for name in ("gen-data", "cold-start", "train", "eval", "score-traces"):
        p = sub.add_parser(name)
        common(p)
        if name in ("train", "eval", "score-traces"):
            p.add_argument("--checkpoint", help="policy checkpoint to start from / evaluate")
        if name == "score-traces":
            p.add_argument("--traces", required=True, help="JSONL file of {id, output} records")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    data: dict[str, Any] = {}
    if args.config:
        data = json.loads(Path(args.config).read_text(encoding="utf-8"))
    for key in ("seed", "steps", "group_size", "lambda1", "lambda2", "out"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    if args.judge is not None:
        judge = dict(data.get("judge") or {})
        judge["kind"] = args.judge
        data["judge"] = judge
    return RunConfig.from_dict(data)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        if args.command == "gen-data":
            out = cmd_gen_data(cfg)
        elif args.command == "cold-start":
            out = cmd_cold_start(cfg)
        elif args.command == "train":
            out = cmd_train(cfg, args.checkpoint)
        elif args.command == "eval":
            out = cmd_eval(cfg, args.checkpoint)
        else:
            out = cmd_score_traces(cfg, args.traces, args.checkpoint)
    except JudgeError as exc:
        print(f"error: judge failure, run aborted: {exc}", file=sys.stderr)
        return 3
    except (EmoReasonError, json.JSONDecodeError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
