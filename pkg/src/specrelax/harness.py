"""Experiment harness: metrics, seeded runs, distribution oracles, heatmap export.

Speedup is a call-count cost model, not wall clock: emitted tokens divided by
(target passes + kappa * drafter passes), normalized so plain autoregressive
decoding scores exactly 1.0.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, TextIO

import numpy as np

from .core import ConfigError, FeatureVec, GridPos, RngStream, RowOutOfRange, TokenId, cosine_sim, derive_seed
from .models import Drafter, Target, enumerate_ar_distribution, load_model
from .tree import STOCHASTIC, TOPK, TreeMask
from .verify import AR, MODES, RelaxConfig, decode_sequence

DEFAULT_KAPPA = 0.1

METRIC_KEYS = (
    "meanAlpha",
    "targetCalls",
    "drafterCalls",
    "speedupProxy",
    "accumulatedTVD",
    "perTokenTVD",
    "tokensEmitted",
)


@dataclass(frozen=True)
class Metrics:
    """Acceptance and cost summary for one decode (or a mean over seeds)."""

    mean_alpha: float
    target_calls: float
    drafter_calls: float
    speedup_proxy: float
    accumulated_tvd: float
    per_token_tvd: float
    tokens_emitted: float

    def to_record(self) -> dict:
        return {
            "meanAlpha": self.mean_alpha,
            "targetCalls": self.target_calls,
            "drafterCalls": self.drafter_calls,
            "speedupProxy": self.speedup_proxy,
            "accumulatedTVD": self.accumulated_tvd,
            "perTokenTVD": self.per_token_tvd,
            "tokensEmitted": self.tokens_emitted,
        }

    @classmethod
    def from_record(cls, record: dict) -> "Metrics":
        return cls(
            record["meanAlpha"],
            record["targetCalls"],
            record["drafterCalls"],
            record["speedupProxy"],
            record["accumulatedTVD"],
            record["perTokenTVD"],
            record["tokensEmitted"],
        )

    @classmethod
    def aggregate(cls, per_seed: Sequence["Metrics"]) -> "Metrics":
        if not per_seed:
            raise ValueError("cannot aggregate zero runs")
        n = len(per_seed)
        return cls(
            sum(m.mean_alpha for m in per_seed) / n,
            sum(m.target_calls for m in per_seed) / n,
            sum(m.drafter_calls for m in per_seed) / n,
            sum(m.speedup_proxy for m in per_seed) / n,
            sum(m.accumulated_tvd for m in per_seed) / n,
            sum(m.per_token_tvd for m in per_seed) / n,
            sum(m.tokens_emitted for m in per_seed) / n,
        )


def decode_with_metrics(
    target: Target,
    drafter: Drafter | None,
    mode: str,
    mask: TreeMask,
    cfg: RelaxConfig,
    length: int,
    rng: RngStream,
    kappa: float = DEFAULT_KAPPA,
    candidate_mode: str = TOPK,
    on_outcome=None,
) -> tuple[list[TokenId], Metrics]:
    """Decode one sequence and summarize its counters as Metrics.

    Autoregressive decodes score mean alpha 1.0 and speedup 1.0 by convention.
    """
    tokens, stats = decode_sequence(
        target, drafter, mode, mask, cfg, length, rng,
        candidate_mode=candidate_mode, on_outcome=on_outcome,
    )
    if mode == AR:
        metrics = Metrics(1.0, stats.target_calls, 0, 1.0, 0.0, 0.0, stats.tokens_emitted)
    else:
        cost = stats.target_calls + kappa * stats.drafter_calls
        metrics = Metrics(
            stats.accepted_draft_tokens / stats.verify_calls,
            stats.target_calls,
            stats.drafter_calls,
            stats.tokens_emitted / cost,
            stats.accumulated_tvd,
            stats.accumulated_tvd / stats.tokens_emitted,
            stats.tokens_emitted,
        )
    return tokens, metrics


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one `decode` invocation needs, file paths included."""

    model_path: str
    mode: str
    seeds: tuple[int, ...]
    drafter_path: str | None = None
    mask: TreeMask = field(default_factory=TreeMask.default)
    relax: RelaxConfig = field(default_factory=RelaxConfig)
    length: int | None = None
    kappa: float = DEFAULT_KAPPA
    candidate_mode: str = TOPK
    metrics_path: str | None = None
    trace_path: str | None = None
    heatmap_path: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.candidate_mode not in (TOPK, STOCHASTIC):
            raise ConfigError(f"unknown candidate mode {self.candidate_mode!r}")
        if not Path(self.model_path).exists():
            raise ConfigError(f"model file not found: {self.model_path}")
        if self.mode != AR and self.drafter_path is None:
            raise ConfigError(f"mode {self.mode!r} requires --drafter")
        if self.drafter_path is not None and not Path(self.drafter_path).exists():
            raise ConfigError(f"drafter file not found: {self.drafter_path}")


def _dump_line(out: TextIO, record: dict) -> None:
    out.write(json.dumps(record, sort_keys=True))
    out.write("\n")


def run_experiment(cfg: ExperimentConfig) -> Metrics:
    """Decode one sequence per seed, write JSONL records, return the seed mean."""
    target = load_model(cfg.model_path)
    drafter = load_model(cfg.drafter_path) if cfg.drafter_path else None
    length = cfg.length
    if length is None:
        if target.grid_side is None:
            raise ConfigError("a sequence length is required for non-grid models")
        length = target.grid_side * target.grid_side

    per_seed: list[Metrics] = []
    metric_records: list[dict] = []
    trace_records: list[dict] = []
    first_tokens: list[TokenId] | None = None
    for seed in cfg.seeds:
        rng = RngStream(seed)
        sink = None
        if cfg.trace_path is not None:
            def sink(cycle: int, outcome, _seed=seed) -> None:
                for rec in outcome.trace:
                    trace_records.append({"seed": _seed, "cycle": cycle, **rec.to_record()})
        tokens, metrics = decode_with_metrics(
            target, drafter, cfg.mode, cfg.mask, cfg.relax, length, rng,
            kappa=cfg.kappa, candidate_mode=cfg.candidate_mode, on_outcome=sink,
        )
        if first_tokens is None:
            first_tokens = tokens
        per_seed.append(metrics)
        metric_records.append({"seed": seed, **metrics.to_record()})

    aggregate = Metrics.aggregate(per_seed)
    if cfg.metrics_path is not None:
        with open(cfg.metrics_path, "w", encoding="utf-8", newline="\n") as out:
            for record in metric_records:
                _dump_line(out, record)
            _dump_line(out, {"aggregate": True, **aggregate.to_record()})
    if cfg.trace_path is not None:
        with open(cfg.trace_path, "w", encoding="utf-8", newline="\n") as out:
            for record in trace_records:
                _dump_line(out, record)
    if cfg.heatmap_path is not None and first_tokens is not None:
        side = target.grid_side or max(1, math.isqrt(max(length - 1, 0)) + 1)
        export_similarity_heatmap(target, first_tokens, range(side), cfg.heatmap_path)
    return aggregate


def read_metrics_jsonl(path: str | Path) -> tuple[list[tuple[int, Metrics]], Metrics]:
    """Parse a metrics JSONL file back into (per-seed, aggregate)."""
    per_seed: list[tuple[int, Metrics]] = []
    aggregate: Metrics | None = None
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        record = json.loads(line)
        if record.get("aggregate"):
            aggregate = Metrics.from_record(record)
        else:
            per_seed.append((record["seed"], Metrics.from_record(record)))
    if aggregate is None:
        raise ConfigError(f"{path} has no aggregate record")
    return per_seed, aggregate


def mc_distribution_test(
    target: Target,
    drafter: Drafter | None,
    mode: str,
    samples: int,
    length: int,
    mask: TreeMask | None = None,
    relax: RelaxConfig | None = None,
    base_seed: int = 0,
) -> tuple[float, bool]:
    """Empirical sequence law over `samples` seeded decodes versus the exact law.

    Draft candidates are sampled (not ranked) here, since the exactness claim
    concerns proposals drawn from the drafter. The pass flag applies the
    3 * sqrt(V^length / samples) multinomial bound; stricter caps are the
    caller's business.
    """
    oracle = enumerate_ar_distribution(target, length)
    mask = mask if mask is not None else TreeMask.chain(length)
    relax = relax if relax is not None else RelaxConfig()
    counts: dict[tuple[int, ...], int] = {}
    for i in range(samples):
        rng = RngStream(derive_seed(base_seed, i))
        tokens, _ = decode_sequence(
            target, drafter, mode, mask, relax, length, rng, candidate_mode=STOCHASTIC
        )
        key = tuple(tokens)
        counts[key] = counts.get(key, 0) + 1
    distance = 0.0
    for key, prob in oracle.items():
        distance += abs(counts.get(key, 0) / samples - prob)
    for key in counts:
        if key not in oracle:  # impossible for a correct decoder; count anyway
            distance += counts[key] / samples
    distance *= 0.5
    vocab = getattr(target, "vocab")
    bound = 3.0 * math.sqrt(vocab**length / samples)
    return distance, distance <= bound


def sequence_features(target: Target, tokens: Sequence[TokenId], side: int) -> list[FeatureVec]:
    """Per-step hidden states of a finished sequence, re-evaluated step by step."""
    feats: list[FeatureVec] = []
    for t in range(len(tokens)):
        feats.append(target.evaluate(tokens[:t], GridPos.from_index(t, side)).feature)
    return feats


def export_similarity_heatmap(
    target: Target,
    tokens: Sequence[TokenId],
    rows: Sequence[int],
    path: str | Path,
) -> np.ndarray:
    """Pairwise cosine matrix over the per-step features of the requested grid rows.

    Writes a CSV with one header line and one line per position; an empty row
    selection produces the header alone.
    """
    side = target.grid_side or max(1, math.isqrt(max(len(tokens) - 1, 0)) + 1)
    for row in rows:
        if not 0 <= row < side:
            raise RowOutOfRange(f"row {row} outside grid of side {side}")
    positions = [row * side + col for row in rows for col in range(side)]
    if any(p >= len(tokens) for p in positions):
        raise RowOutOfRange("requested rows extend past the decoded sequence")
    feats = sequence_features(target, tokens, side)
    n = len(positions)
    matrix = np.empty((n, n))
    for i, pi in enumerate(positions):
        for j, pj in enumerate(positions):
            matrix[i, j] = cosine_sim(feats[pi], feats[pj]) if j >= i else matrix[j, i]
    with open(path, "w", encoding="utf-8", newline="") as out:
        writer = csv.writer(out)
        writer.writerow(["pos"] + [str(p) for p in positions])
        for i, pi in enumerate(positions):
            writer.writerow([str(pi)] + [repr(v) for v in matrix[i].tolist()])
    return matrix
