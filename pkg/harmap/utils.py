from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from typing import Any, Callable, Iterable, List, Tuple

import numpy as np


def map_in_threads(func: Callable, items: Iterable[Any], threads: int = 1) -> List[Any]:
    """
    Apply ``func`` to every item, optionally on a ``concurrent.futures.ThreadPoolExecutor``.  Results are returned
    in input order so reductions over them do not depend on the number of threads.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(func, items))


@lru_cache(maxsize=32)
def gauss_legendre(order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre abscissae and weights on [0, 1]"""
    points, weights = np.polynomial.legendre.leggauss(order)
    return 0.5 * (points + 1.0), 0.5 * weights


def unit(vectors: np.ndarray) -> np.ndarray:
    """Normalise the trailing axis"""
    return vectors / np.sqrt((vectors ** 2).sum(axis=-1))[..., None]


def det2(m: np.ndarray) -> np.ndarray:
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


def adj2(m: np.ndarray) -> np.ndarray:
    """Adjugate of a stack of 2x2 matrices"""
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1]
    out[..., 0, 1] = -m[..., 0, 1]
    out[..., 1, 0] = -m[..., 1, 0]
    out[..., 1, 1] = m[..., 0, 0]
    return out


def inv2(m: np.ndarray) -> np.ndarray:
    return adj2(m) / det2(m)[..., None, None]
