"""Fleiss' kappa for several raters assigning nominal categories."""

from __future__ import annotations

import csv

import numpy as np

from ..errors import TooFewRaters, UnequalRaterCounts


def ratings_to_counts(ratings) -> tuple[np.ndarray, list]:
    """items x raters labels -> (items x categories counts, category order)."""
    rows = [list(r) for r in ratings]
    categories = sorted({c for r in rows for c in r if c is not None and c != ""}, key=str)
    index = {c: j for j, c in enumerate(categories)}
    counts = np.zeros((len(rows), len(categories)), dtype=np.int64)
    for i, r in enumerate(rows):
        for c in r:
            if c is None or c == "":
                continue
            counts[i, index[c]] += 1
    return counts, categories


def fleiss_kappa(counts) -> float:
    """Kappa from an items x categories table of rater counts.

    Every item must be rated by the same number n >= 2 of raters. When the
    chance agreement is 1 (a single category used throughout) the result is
    1.0 by convention.
    """
    table = np.asarray(counts)
    if table.ndim != 2 or table.shape[0] == 0:
        raise ValueError("ratings must be a non-empty items x categories table")
    if np.any(table < 0) or not np.all(np.equal(np.mod(table, 1), 0)):
        raise ValueError("counts must be non-negative integers")
    table = table.astype(np.float64)
    per_item = table.sum(axis=1)
    if np.any(per_item != per_item[0]):
        raise UnequalRaterCounts(f"items have differing numbers of ratings: {sorted(set(per_item.astype(int)))}")
    n = per_item[0]
    if n < 2:
        raise TooFewRaters(f"need at least 2 ratings per item, got {int(n)}")
    N = table.shape[0]
    p_j = table.sum(axis=0) / (N * n)
    P_i = (np.sum(table * table, axis=1) - n) / (n * (n - 1))
    P_bar = P_i.mean()
    P_e = float(np.sum(p_j * p_j))
    if np.isclose(P_e, 1.0, rtol=0.0, atol=1e-15):
        return 1.0
    return float((P_bar - P_e) / (1.0 - P_e))


def read_ratings_csv(path) -> list[list[str]]:
    """One row per item, one column per rater. A leading ``item``/``item_id``
    column and a header row (detected by that name or ``rater*`` names) are skipped."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        return []
    header = [c.strip().lower() for c in rows[0]]
    skip_first_col = header[0] in ("item", "item_id", "id")
    if skip_first_col or all(h.startswith("rater") for h in header):
        rows = rows[1:]
    if skip_first_col:
        rows = [r[1:] for r in rows]
    return [[c.strip() for c in r] for r in rows]


def agreement_summary(ratings) -> dict:
    counts, cats = ratings_to_counts(ratings)
    return {
        "items": int(counts.shape[0]),
        "raters": int(counts.sum(axis=1)[0]) if counts.size else 0,
        "categories": [str(c) for c in cats],
        "marginals": {str(c): int(v) for c, v in zip(cats, counts.sum(axis=0))},
        "kappa": fleiss_kappa(counts),
    }


__all__ = ["fleiss_kappa", "ratings_to_counts", "read_ratings_csv", "agreement_summary"]
