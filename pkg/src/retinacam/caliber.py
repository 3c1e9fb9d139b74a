"""Central retinal vessel equivalents (CRAE/CRVE) and the arteriole-to-venule ratio.

Widths are pixel widths fed to the formulas unchanged, so Hubbard results are
unit-free rather than micrometres.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import EmptyStructure, InvalidCaliber, NonPositiveWidth

KNUDTSON = "knudtson"
HUBBARD = "hubbard"
METHODS = (HUBBARD, KNUDTSON)
MAX_VESSELS = 6


def _check_kind(kind):
    if kind not in ("artery", "vein"):
        raise ValueError(f"kind must be 'artery' or 'vein', got {kind!r}")


def _check_widths(*widths):
    for w in widths:
        if not w > 0:
            raise NonPositiveWidth(f"vessel width must be positive, got {w}")


def pair_knudtson(w_narrow, w_wide, kind) -> float:
    _check_kind(kind)
    _check_widths(w_narrow, w_wide)
    k = 0.88 if kind == "artery" else 0.95
    return k * math.hypot(w_narrow, w_wide)


def pair_hubbard(w_narrow, w_wide, kind) -> float:
    _check_kind(kind)
    _check_widths(w_narrow, w_wide)
    wa, wb = min(w_narrow, w_wide), max(w_narrow, w_wide)
    if kind == "artery":
        radicand = 0.87 * wa * wa + 1.01 * wb * wb - 0.22 * wa * wb - 10.76
    else:
        radicand = 0.72 * wa * wa + 0.91 * wb * wb + 450.05
    if radicand <= 0:
        raise InvalidCaliber(f"Hubbard radicand {radicand:.4g} is not positive for widths ({wa}, {wb})")
    return math.sqrt(radicand)


_PAIR = {KNUDTSON: pair_knudtson, HUBBARD: pair_hubbard}


def central_equivalent(widths, kind, method=KNUDTSON) -> float:
    """Iteratively combine the six widest vessels into one equivalent caliber.

    Each round pairs the largest remaining width with the smallest; with an
    odd count the median is carried unpaired into the next round.
    """
    _check_kind(kind)
    try:
        pair = _PAIR[method]
    except KeyError:
        raise ValueError(f"unknown caliber method {method!r}") from None
    values = sorted((float(w) for w in widths), reverse=True)
    if not values:
        raise EmptyStructure(f"no {kind} widths to summarize")
    _check_widths(*values)
    values = values[:MAX_VESSELS]
    while len(values) > 1:
        n = len(values)
        combined = [pair(values[n - 1 - i], values[i], kind) for i in range(n // 2)]
        if n % 2:
            combined.append(values[n // 2])
        values = sorted(combined, reverse=True)
    return values[0]


def avr(crae, crve) -> float:
    if not crve > 0:
        raise ZeroDivisionError(f"CRVE must be positive to form AVR, got {crve}")
    return crae / crve


@dataclass(frozen=True)
class CaliberResult:
    crae: float
    crve: float
    avr: float
    method: str
    zone: str
    n_arteries_used: int
    n_veins_used: int


def caliber_summary(artery_widths, vein_widths, method, zone) -> CaliberResult:
    crae = central_equivalent(artery_widths, "artery", method)
    crve = central_equivalent(vein_widths, "vein", method)
    return CaliberResult(crae, crve, avr(crae, crve), method, zone,
                         min(len(artery_widths), MAX_VESSELS), min(len(vein_widths), MAX_VESSELS))
