"""Univariate laws for background variables."""
import re
from dataclasses import dataclass

import numpy as np
from scipy import special

_SQRT2PI = np.sqrt(2.0 * np.pi)
_DIST_RE = re.compile(r"^\s*(normal|uniform)\s*\(\s*([^,()]+)\s*,\s*([^,()]+)\s*\)\s*$")


@dataclass(frozen=True)
class Dist:
    """``normal(mean, sd)`` or ``uniform(low, high)``."""

    kind: str
    a: float
    b: float

    def __post_init__(self):
        if self.kind not in ("normal", "uniform"):
            raise ValueError(f"unsupported distribution {self.kind!r}")
        if not (np.isfinite(self.a) and np.isfinite(self.b)):
            raise ValueError("distribution parameters must be finite")
        if self.kind == "normal" and self.b <= 0:
            raise ValueError("normal sd must be positive")
        if self.kind == "uniform" and self.b <= self.a:
            raise ValueError("uniform needs low < high")

    @classmethod
    def parse(cls, text):
        if isinstance(text, Dist):
            return text
        m = _DIST_RE.match(str(text))
        if not m:
            raise ValueError(f"cannot parse distribution {text!r}; use normal(m, s) or uniform(a, b)")
        return cls(m.group(1), float(m.group(2)), float(m.group(3)))

    def __str__(self):
        return f"{self.kind}({self.a!r}, {self.b!r})"

    def from_uniform(self, v):
        """Inverse-CDF transform of draws in (0, 1)."""
        if self.kind == "normal":
            return self.a + self.b * special.ndtri(v)
        return self.a + (self.b - self.a) * v

    def ppf(self, q):
        return self.from_uniform(q)

    def cdf(self, x):
        if self.kind == "normal":
            return special.ndtr((x - self.a) / self.b)
        return np.clip((x - self.a) / (self.b - self.a), 0.0, 1.0)

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "normal":
            z = (x - self.a) / self.b
            return np.exp(-0.5 * z * z) / (_SQRT2PI * self.b)
        inside = (x >= self.a) & (x <= self.b)
        return np.where(inside, 1.0 / (self.b - self.a), 0.0)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == "normal":
            z = (x - self.a) / self.b
            return -0.5 * z * z - np.log(_SQRT2PI * self.b)
        inside = (x >= self.a) & (x <= self.b)
        return np.where(inside, -np.log(self.b - self.a), -np.inf)

    @property
    def mean(self):
        return self.a if self.kind == "normal" else 0.5 * (self.a + self.b)

    @property
    def sd(self):
        return self.b if self.kind == "normal" else (self.b - self.a) / np.sqrt(12.0)
