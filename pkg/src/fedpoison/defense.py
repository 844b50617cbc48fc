"""Server-side norm-difference clipping (NDC).

Updates whose norm is strictly above the round threshold are dropped before
aggregation. Equality passes, within a small relative slack so an update
rescaled to exactly the threshold survives float round-off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DomainError
from .federation import UpdateRecord

BOUNDARY_RTOL = 1e-9

MODES = ("fixed", "prev_round_mean", "round_percentile")


@dataclass
class RejectionEvent:
    client_id: int
    norm: float
    threshold: float


@dataclass
class DefenseConfig:
    """Threshold policy. `fixed` uses `q`; `prev_round_mean` tracks the mean
    benign norm of the previous round; `round_percentile` takes a percentile
    of the current round's norms."""

    mode: str = "prev_round_mean"
    q: float | None = None
    percentile: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown defense mode {self.mode!r}; pick one of {MODES}")
        if self.mode == "fixed":
            if self.q is None or self.q <= 0:
                raise ConfigurationError("fixed-Q defense needs q > 0")
        if self.mode == "round_percentile":
            if self.percentile is None or not 0 < self.percentile <= 100:
                raise ConfigurationError("round_percentile defense needs percentile in (0, 100]")


def ndc_filter(updates: list[UpdateRecord], threshold: float,
               ) -> tuple[list[UpdateRecord], list[RejectionEvent]]:
    """Keep updates with norm <= threshold ("above" rejects strictly);
    order is preserved. Returns (accepted, rejections)."""
    if not threshold > 0:
        raise DomainError(f"NDC threshold must be positive, got {threshold}")
    bound = threshold * (1.0 + BOUNDARY_RTOL)
    accepted, rejected = [], []
    for rec in updates:
        if rec.norm > bound:
            rejected.append(RejectionEvent(rec.client_id, rec.norm, threshold))
        else:
            accepted.append(rec)
    return accepted, rejected


class NdcDefense:
    """Stateful per-round NDC filter used by the federation loop."""

    def __init__(self, config: DefenseConfig):
        self.config = config
        self._prev_benign_mean: float | None = None

    def threshold(self, round_norms: list[float] | None = None) -> float:
        """Threshold for the current round; +inf when the adaptive mode has
        no history yet (first round accepts everything)."""
        cfg = self.config
        if cfg.mode == "fixed":
            return float(cfg.q)
        if cfg.mode == "prev_round_mean":
            return self._prev_benign_mean if self._prev_benign_mean is not None else math.inf
        if round_norms is None or not round_norms:
            return math.inf
        return float(np.percentile(round_norms, cfg.percentile))

    def apply(self, updates: list[UpdateRecord],
              ) -> tuple[list[UpdateRecord], list[RejectionEvent], float]:
        q = self.threshold([rec.norm for rec in updates])
        if not math.isfinite(q):
            return list(updates), [], q
        accepted, rejected = ndc_filter(updates, q)
        return accepted, rejected, q

    def observe_round(self, benign_norms: list[float]) -> None:
        """Feed the round's benign update norms (simulation ground truth)
        into the adaptive threshold."""
        if benign_norms:
            self._prev_benign_mean = float(np.mean(benign_norms))
