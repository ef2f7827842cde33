"""Record-level pooling of a local prediction map (n x m) into class scores.

Ordinary kinds pool over every row; the R-peak kinds (GARP, GMRP, LSER)
apply the same formula to the rows listed in a peak mask. GMAP is accepted
as an alias of GARP.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

ORDINARY = ("GAP", "GMP", "LSE")
MASKED = ("GARP", "GMRP", "LSER")
_BASE = {"GAP": "GAP", "GMP": "GMP", "LSE": "LSE", "GARP": "GAP", "GMRP": "GMP", "LSER": "LSE"}
ALIASES = {"GMAP": "GARP"}


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class AggregationSpec:
    kind: str = "GMP"
    r: float = 3.0

    def __post_init__(self):
        kind = ALIASES.get(self.kind.upper(), self.kind.upper())
        if kind not in _BASE:
            raise AggregationError(f"unknown aggregation {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.r <= 0:
            raise AggregationError("LSE sharpness r must be > 0")

    @property
    def masked(self) -> bool:
        return self.kind in MASKED

    @property
    def base(self) -> str:
        return _BASE[self.kind]

    def __str__(self):
        return f"{self.kind}(r={self.r:g})" if self.base == "LSE" else self.kind

    @classmethod
    def parse(cls, text: str) -> "AggregationSpec":
        """'GMP', 'LSE:3', 'LSER:5' or 'LSE(r=3)'."""
        text = text.strip()
        for sep in (":", "("):
            if sep in text:
                kind, r = text.split(sep, 1)
                r = r.rstrip(")").replace("r=", "")
                return cls(kind.strip(), float(r))
        return cls(text)


def _pool(D, base, r):
    if base == "GAP":
        return D.mean(axis=0)
    if base == "GMP":
        return D.max(axis=0)
    top = D.max(axis=0)
    return top + np.log(np.mean(np.exp(r * (D - top)), axis=0)) / r


def _pool_backward(D, base, r, dS):
    n = D.shape[0]
    if base == "GAP":
        return np.broadcast_to(dS / n, D.shape).copy()
    if base == "GMP":
        dD = np.zeros_like(D)
        idx = D.argmax(axis=0)  # earliest row on ties
        dD[idx, np.arange(D.shape[1])] = dS
        return dD
    w = np.exp(r * (D - D.max(axis=0)))
    w /= w.sum(axis=0)
    return w * dS


def _resolve_rows(D, spec, mask, training):
    if not spec.masked:
        return None, spec.base
    if mask is None or len(mask) == 0:
        if training:
            raise AggregationError(f"{spec.kind} needs a nonempty R-peak mask during training")
        warnings.warn(f"empty R-peak mask: {spec.kind} falls back to {spec.base}", stacklevel=3)
        return None, spec.base
    rows = np.asarray(mask, dtype=np.intp)
    if rows.min() < 0 or rows.max() >= D.shape[0]:
        raise AggregationError("R-peak mask position outside the map")
    return rows, spec.base


def aggregate(D, spec: AggregationSpec, mask=None, training: bool = False) -> np.ndarray:
    """Pool map ``D`` (n x m) into an m-vector of record scores."""
    D = np.asarray(D)
    if D.ndim != 2 or D.shape[0] == 0:
        raise AggregationError("map must be a nonempty (n, m) array")
    rows, base = _resolve_rows(D, spec, mask, training)
    sub = D if rows is None else D[rows]
    return _pool(sub, base, spec.r)


def aggregate_backward(D, spec: AggregationSpec, dS, mask=None, training: bool = True) -> np.ndarray:
    """Gradient of the pooled scores w.r.t. the full map."""
    D = np.asarray(D)
    rows, base = _resolve_rows(D, spec, mask, training)
    if rows is None:
        return _pool_backward(D, base, spec.r, dS)
    dD = np.zeros_like(D)
    # np.add.at keeps repeated mask rows correct
    np.add.at(dD, rows, _pool_backward(D[rows], base, spec.r, dS))
    return dD
