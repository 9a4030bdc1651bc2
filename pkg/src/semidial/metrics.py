"""Task-completion metrics: entity F1, success rate, average turns.

All metrics are pure functions of (goal, dialogue record); recomputation is
bit-identical. For this noise-free environment entity_f1 == 1.0 and success
coincide: both mean every required entity matched and nothing incorrect
provided.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import DialogueRecord, UserGoal, required_entities
from .schemas import Preset


def entity_f1(goal: UserGoal, record, preset: Preset) -> float:
    """Harmonic mean of precision (correct provided / all provided) and
    recall (correct / required); 0 when either denominator is empty with
    no matches. `record` needs a provided_entities() set."""
    required = required_entities(goal, preset)
    provided = record.provided_entities()
    matched = len(required & provided)
    if not provided or not required:
        return 1.0 if len(required) == len(provided) == matched else 0.0
    precision = matched / len(provided)
    recall = matched / len(required)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def success_rate(records) -> float:
    records = list(records)
    if not records:
        raise ValueError("success_rate over an empty batch")
    return sum(1.0 for r in records if r.success) / len(records)


def avg_turns(records) -> float:
    records = list(records)
    if not records:
        raise ValueError("avg_turns over an empty batch")
    return float(np.mean([r.turns if hasattr(r, "turns") else r.n_turns for r in records]))


@dataclass
class MetricReport:
    entity_f1: float
    success_rate: float
    avg_turns: float
    by_domain_count: dict[int, dict] = field(default_factory=dict)
    n_episodes: int = 0
    seeds: list[int] = field(default_factory=list)
    config_hash: str = ""

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError("success_rate outside [0, 1]")
        if not 0.0 <= self.entity_f1 <= 1.0:
            raise ValueError("entity_f1 outside [0, 1]")

    def to_json(self) -> dict:
        return {"entity_f1": self.entity_f1, "success_rate": self.success_rate,
                "avg_turns": self.avg_turns,
                "by_domain_count": {str(k): v for k, v in self.by_domain_count.items()},
                "n_episodes": self.n_episodes, "seeds": self.seeds,
                "config_hash": self.config_hash}


def report_from_trajectories(trajectories, config_hash: str = "",
                             seeds=()) -> MetricReport:
    """Aggregate evaluation trajectories (policy.Trajectory objects carrying
    success / turns / f1 / domain_count) into one report."""
    trajectories = list(trajectories)
    by_count: dict[int, dict] = {}
    for dc in sorted({t.domain_count for t in trajectories}):
        sub = [t for t in trajectories if t.domain_count == dc]
        by_count[dc] = {"success_rate": sum(1.0 for t in sub if t.success) / len(sub),
                        "entity_f1": float(np.mean([t.f1 for t in sub])),
                        "avg_turns": float(np.mean([t.turns for t in sub])),
                        "n": len(sub)}
    return MetricReport(
        entity_f1=float(np.mean([t.f1 for t in trajectories])),
        success_rate=success_rate(trajectories),
        avg_turns=avg_turns(trajectories),
        by_domain_count=by_count,
        n_episodes=len(trajectories),
        seeds=list(seeds),
        config_hash=config_hash)
