"""Locations, distances, maximin ordering, conditioning sets.

All downstream structure (inducing points, transport-map conditioning,
prior variance decay) is driven by the greedy maximin permutation built
here, so this module is deliberately exact: the O(L^2) greedy loop is
the reference implementation and ties are always broken toward the
lowest original index to keep fits reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

METRICS = ("chordal-sphere", "euclidean-plane")

# Coordinates closer than this under the metric count as duplicates.
_DUPLICATE_TOL = 1e-12


def _embed(coords: np.ndarray, metric: str) -> np.ndarray:
    """Map coordinates to the space where distances are Euclidean.

    chordal-sphere: (lon deg, lat deg) -> unit-sphere point in R^3, so the
    chordal (through-the-sphere) distance is the Euclidean distance of the
    embeddings. euclidean-plane: identity.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise ValidationError(f"coords must be (L, 2), got {coords.shape}")
    if not np.all(np.isfinite(coords)):
        raise ValidationError("coords contain non-finite values")
    if metric == "euclidean-plane":
        return coords
    if metric == "chordal-sphere":
        lon, lat = coords[:, 0], coords[:, 1]
        if np.any(lon < -180.0) or np.any(lon >= 360.0):
            raise ValidationError("longitude out of [-180, 360)")
        if np.any(np.abs(lat) > 90.0):
            raise ValidationError("latitude out of [-90, 90]")
        lam = np.radians(lon)
        phi = np.radians(lat)
        return np.column_stack(
            (np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi))
        )
    raise ValidationError(f"unknown metric {metric!r}; expected one of {METRICS}")


@dataclass(frozen=True)
class LocationSet:
    """L georeferenced locations plus the metric that compares them.

    Parameters
    ----------
    coords : (L, 2) array
        (longitude deg, latitude deg) for chordal-sphere, (x, y) for
        euclidean-plane.
    metric : str
        One of ``METRICS``.
    """

    coords: np.ndarray
    metric: str = "euclidean-plane"
    points: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = _embed(self.coords, self.metric)
        if len(pts) < 1:
            raise ValidationError("need at least one location")
        object.__setattr__(self, "coords", np.asarray(self.coords, dtype=float))
        object.__setattr__(self, "points", pts)
        self._check_distinct()

    def _check_distinct(self):
        # Lexicographic sort makes duplicate detection O(L log L): equal
        # points end up adjacent. Distances below _DUPLICATE_TOL would give
        # zero maximin delta, which the transport-map prior cannot accept.
        pts = self.points
        if len(pts) == 1:
            return
        idx = np.lexsort(pts.T[::-1])
        diffs = np.linalg.norm(np.diff(pts[idx], axis=0), axis=1)
        bad = np.nonzero(diffs < _DUPLICATE_TOL)[0]
        if bad.size:
            i, j = int(idx[bad[0]]), int(idx[bad[0] + 1])
            raise ValidationError(
                f"duplicate locations under metric {self.metric!r}: "
                f"indices {min(i, j)} and {max(i, j)}"
            )

    def __len__(self) -> int:
        return len(self.points)


def distance(a, b, metric: str = "euclidean-plane") -> float:
    """Distance between two single locations under the metric."""
    pa = _embed(np.asarray(a, dtype=float).reshape(1, 2), metric)
    pb = _embed(np.asarray(b, dtype=float).reshape(1, 2), metric)
    return float(np.linalg.norm(pa[0] - pb[0]))


def cross_distances(locs: LocationSet, rows, cols) -> np.ndarray:
    """Pairwise distance matrix between two index subsets."""
    pr = locs.points[np.asarray(rows, dtype=int)]
    pc = locs.points[np.asarray(cols, dtype=int)]
    return np.linalg.norm(pr[:, None, :] - pc[None, :, :], axis=-1)


@dataclass(frozen=True)
class MaximinOrdering:
    """Greedy maximin permutation and its minimum-distance sequence.

    ``order[j]`` is the original index chosen at position j (0-based);
    ``min_dists[j - 1]`` is the distance from it to the closest already
    ordered location, defined for positions j >= 1 only, hence length L-1.
    """

    order: np.ndarray
    min_dists: np.ndarray

    def __post_init__(self):
        L = len(self.order)
        if sorted(self.order.tolist()) != list(range(L)):
            raise ValidationError("order is not a permutation of 0..L-1")
        if len(self.min_dists) != max(L - 1, 0):
            raise ValidationError("min_dists must have length L-1")


def maximin_order(locs: LocationSet, first: int = 0) -> MaximinOrdering:
    """Exact greedy maximin ordering starting from ``first``.

    Each step picks the location maximizing the minimum distance to all
    previously chosen ones; ties go to the lowest original index. Runs
    the O(L^2) incremental update over the full candidate set.
    """
    L = len(locs)
    if not 0 <= first < L:
        raise ValidationError(f"first index {first} out of range 0..{L - 1}")
    pts = locs.points
    order = np.empty(L, dtype=int)
    order[0] = first
    # min squared distance from every location to the chosen prefix
    d2 = np.sum((pts - pts[first]) ** 2, axis=1)
    d2[first] = -np.inf
    deltas = np.empty(max(L - 1, 0), dtype=float)
    for j in range(1, L):
        nxt = int(np.argmax(d2))  # argmax returns the first (lowest) index on ties
        deltas[j - 1] = np.sqrt(d2[nxt])
        order[j] = nxt
        d2 = np.minimum(d2, np.sum((pts - pts[nxt]) ** 2, axis=1))
        d2[nxt] = -np.inf
    return MaximinOrdering(order=order, min_dists=deltas)


def nearest_predecessors(
    ordering: MaximinOrdering, locs: LocationSet, position: int, m: int
) -> np.ndarray:
    """Positions of the up-to-m ordered predecessors closest to ``position``.

    Returned values index into ``ordering.order`` (0-based positions),
    sorted by increasing distance to the queried location; distance ties
    resolve toward the earlier maximin position via the stable sort.
    """
    if not 0 <= position < len(ordering.order):
        raise ValidationError("position out of range")
    if m < 0:
        raise ValidationError("m must be nonnegative")
    take = min(m, position)
    if take == 0:
        return np.empty(0, dtype=int)
    here = locs.points[ordering.order[position]]
    prev = locs.points[ordering.order[:position]]
    d = np.linalg.norm(prev - here, axis=1)
    return np.argsort(d, kind="stable")[:take]


def conditioning_sets(
    ordering: MaximinOrdering, locs: LocationSet, m: int
) -> list[np.ndarray]:
    """nearest_predecessors for every position, first entry empty."""
    return [
        nearest_predecessors(ordering, locs, i, m)
        for i in range(len(ordering.order))
    ]
