from __future__ import annotations

import math
from dataclasses import dataclass, field

Z95 = 1.96
DIFFERENCE = "risk-or-mean-difference"
LOG_OR = "log-odds-ratio"


@dataclass
class CaceEstimate:
    """Point estimate, standard error and 95% interval for the CACE."""

    method: str
    estimand: str
    point: float
    se: float
    ci_low: float
    ci_high: float
    m: int | None = None
    df: float = math.inf
    warnings: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def normal(cls, method, estimand, point, se, **kw) -> "CaceEstimate":
        return cls(method, estimand, point, se, point - Z95 * se, point + Z95 * se, **kw)

    def covers(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "estimand": self.estimand,
            "point": self.point,
            "se": self.se,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "m": self.m,
            "warnings": list(self.warnings),
        }
