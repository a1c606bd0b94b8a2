"""Order-canonical reductions over factor-matrix columns.

Floating-point addition is not associative, so summing rank-one terms in
column order would make solver outputs depend on how the columns happen to
be arranged.  Reducing in an order keyed on column *content* makes every
aggregate bit-identical under joint column permutations, which is what lets
permuting S_init permute the solver output exactly.
"""

from __future__ import annotations

import numpy as np


def column_order(S: np.ndarray, D: np.ndarray) -> list[int]:
    """Indices of the columns of (S, D) sorted by content.

    Sorts on the short S columns and consults D only to break exact ties,
    which is rare enough that D's bytes are normally never touched.  Ties
    remaining after both keys are exact duplicates, for which any order
    accumulates identically.
    """
    s_keys = [S[:, i].tobytes() for i in range(S.shape[1])]
    order = sorted(range(S.shape[1]), key=s_keys.__getitem__)
    for start in range(len(order) - 1):
        if s_keys[order[start]] == s_keys[order[start + 1]]:
            break
    else:
        return order
    return sorted(order, key=lambda i: (s_keys[i], D[:, i].tobytes()))


def low_rank_product(S: np.ndarray, D: np.ndarray, order: list[int] | None = None) -> np.ndarray:
    """S @ D.T accumulated over rank-one terms in canonical column order."""
    if order is None:
        order = column_order(S, D)
    # einsum without optimization reduces the contracted axis in index
    # order, so feeding canonically permuted views fixes the summation
    # order by content rather than by column position.
    return np.einsum("ci,pi->cp", S[:, order], D[:, order], optimize=False)


def ordered_column_sum(values: np.ndarray, order: list[int]) -> float:
    """Sum per-column scalars in canonical column order."""
    total = 0.0
    for i in order:
        total += float(values[i])
    return total
