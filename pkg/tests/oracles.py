"""Independent definitional oracles in exact rational arithmetic."""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

GRID = (0.0, 0.25, 0.3, 0.5, 0.7, 1.0)  # includes right-closed edges for 4 and 10 bins


def oracle_bin(conf: float, num_bins: int) -> int:
    """Bin k holds (k/B, (k+1)/B]; 0 joins bin 0. A float is read as the
    shortest decimal that round-trips to it, i.e. 0.1 means 1/10."""
    c = Fraction(repr(float(conf)))
    return max(0, math.ceil(c * num_bins) - 1)


def oracle_ece(pairs, num_bins: int = 10) -> Fraction:
    bins: dict[int, list] = {}
    for conf, ok in pairs:
        bins.setdefault(oracle_bin(conf, num_bins), []).append((Fraction(conf), Fraction(int(ok))))
    n = len(pairs)
    total = Fraction(0)
    for rows in bins.values():
        acc = sum(r[1] for r in rows) / len(rows)
        mean_conf = sum(r[0] for r in rows) / len(rows)
        total += Fraction(len(rows), n) * abs(acc - mean_conf)
    return total


def oracle_risks(pairs) -> list[Fraction]:
    # descending confidence, earlier input first among ties
    order = sorted(range(len(pairs)), key=lambda i: (-Fraction(pairs[i][0]), i))
    risks, errors = [], 0
    for i, idx in enumerate(order, 1):
        errors += 0 if pairs[idx][1] else 1
        risks.append(Fraction(errors, i))
    return risks


def oracle_aurc(pairs) -> Fraction:
    r = oracle_risks(pairs)
    return sum(r) / len(r)


def record_multisets(max_n: int = 8, grid=GRID):
    """Every multiset of (confidence, correct) records with 1..max_n members."""
    kinds = [(c, ok) for c in grid for ok in (True, False)]
    for n in range(1, max_n + 1):
        yield from itertools.combinations_with_replacement(kinds, n)
