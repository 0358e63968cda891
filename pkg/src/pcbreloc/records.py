"""Per-run event log produced by the relocalization driver."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

OUTCOME_RECOVERED = "recovered"
OUTCOME_NEW_MAP = "new_map"
OUTCOME_TRUNCATED = "truncated"


@dataclass
class Attempt:
    timestep: int
    n_r: int
    variant: Optional[str]
    stage_sizes: dict
    n_candidates: int
    success: bool
    skipped: bool = False
    kpr_time_ms: float = 0.0


@dataclass
class Episode:
    loss_timestep: int
    attempts: list = field(default_factory=list)
    outcome: str = OUTCOME_TRUNCATED

    @property
    def duration(self) -> int:
        return len(self.attempts)

    @property
    def variant_sequence(self) -> list:
        return [a.variant for a in self.attempts]


@dataclass
class RunRecord:
    method: str
    seed: int
    n_fail: int
    episodes: list = field(default_factory=list)
    n_local_maps: int = 1
    # (timestep, 4x4 matrix as nested lists)
    estimated: list = field(default_factory=list)
    ground_truth: list = field(default_factory=list)
    scenario: str = ""
    skipped_losses: list = field(default_factory=list)

    def attempts(self):
        for ep in self.episodes:
            yield from ep.attempts

    def to_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        timings = []
        for ep in d["episodes"]:
            for a in ep["attempts"]:
                timings.append(a.pop("kpr_time_ms"))
        d["timing"] = {"kpr_time_ms": timings} if timing else {}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        timings = list((d.pop("timing", None) or {}).get("kpr_time_ms", []))
        episodes = []
        k = 0
        for ep in d.pop("episodes"):
            attempts = []
            for a in ep["attempts"]:
                a = dict(a)
                a["kpr_time_ms"] = timings[k] if k < len(timings) else 0.0
                k += 1
                attempts.append(Attempt(**a))
            episodes.append(Episode(ep["loss_timestep"], attempts, ep["outcome"]))
        return cls(episodes=episodes, **d)
