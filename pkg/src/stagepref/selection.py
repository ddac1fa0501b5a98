"""Scoring and selection of preference queries over candidate segment pairs.

A candidate pair carries two raw columns: a stage-difference estimate (small
when the two segments exercise the same portion of the task) and a reward
disagreement estimate (large when the ensemble is uncertain). Both are
min-max normalized per batch, then combined multiplicatively so that queries
comparing like with like, where the model is also unsure, rank first.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SelectionError
from .mdp import Segment

SELECTION_MODES = (
    "stage_aligned",
    "disagreement",
    "uniform",
    "interval_distance",
    "interval_timestep",
)


def _directed_distance(d: np.ndarray, x: int, y: int) -> float:
    """d[x, y], falling back to d[y, x] when the forward direction is inf.

    The learned distance is directional, and a state that ends trajectories
    (an absorbing terminal, or any state the behavior data never leaves)
    has no outgoing support at all: d[x, .] is infinite for every target
    even when x sits right next to them in task progression. The reverse
    direction still witnesses how hard it is to bring the two endpoints
    together, so it stands in before the pair is declared unreachable.
    """
    v = float(d[x, y])
    if not np.isfinite(v):
        v = float(d[y, x])
    return v


def quadrilateral_distance(d: np.ndarray, s0: Segment, s1: Segment) -> float:
    """Mean of the four endpoint-to-endpoint distances between two segments.

    Averages d(first0, first1), d(last0, last1), d(first0, last1) and
    d(last0, first1). Each directed lookup falls back to its reverse when
    the forward direction has no support (see :func:`_directed_distance`);
    a pair unreachable in both directions stays infinite, marking the pair
    maximally misaligned.
    """
    f0, l0 = s0.first_state, s0.last_state
    f1, l1 = s1.first_state, s1.last_state
    total = (_directed_distance(d, f0, f1) + _directed_distance(d, l0, l1)
             + _directed_distance(d, f0, l1) + _directed_distance(d, l0, f1))
    return float(total / 4.0)


def normalize_batch(values: np.ndarray) -> np.ndarray:
    """Min-max normalize over the finite entries; +inf maps to 1.

    A constant finite batch maps to all zeros. A batch with no finite entry
    cannot be ranked and raises :class:`SelectionError`.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or len(values) == 0:
        raise ValueError("expected a nonempty 1-d batch")
    if np.any(np.isnan(values)):
        raise ValueError("batch contains NaN")
    finite = np.isfinite(values)
    if not finite.any():
        raise SelectionError("every value in the batch is infinite")
    lo = values[finite].min()
    hi = values[finite].max()
    out = np.zeros_like(values)
    if hi > lo:
        out[finite] = (values[finite] - lo) / (hi - lo)
    out[~finite] = 1.0
    return out


def selection_score(stage_norm: np.ndarray, state_norm: np.ndarray,
                    c_stage: float = 2.0, c_state: float = 0.1) -> np.ndarray:
    """(c_stage - stage_norm) * (c_state + state_norm), elementwise.

    With c_stage > 1 the first factor stays positive for normalized inputs,
    so lower stage difference and higher disagreement always help.
    """
    if c_stage <= 1.0:
        raise ValueError("c_stage must exceed 1 so the stage factor stays positive")
    if c_state < 0.0:
        raise ValueError("c_state must be nonnegative")
    return (c_stage - np.asarray(stage_norm)) * (c_state + np.asarray(state_norm))


@dataclass
class SelectionConfig:
    mode: str = "stage_aligned"
    c_stage: float = 2.0
    c_state: float = 0.1
    queries_per_session: int = 10
    candidate_factor: int = 20

    def __post_init__(self) -> None:
        if self.mode not in SELECTION_MODES:
            raise ValueError(f"mode must be one of {SELECTION_MODES}, got {self.mode!r}")
        if self.queries_per_session < 1:
            raise ValueError("queries_per_session must be >= 1")
        if self.candidate_factor < 1:
            raise ValueError("candidate_factor must be >= 1")


@dataclass
class CandidateBatch:
    """Candidate pairs plus their raw scoring columns (before normalization)."""

    pairs: list[tuple[Segment, Segment]]
    stage_diff: np.ndarray
    state_diff: np.ndarray

    def __post_init__(self) -> None:
        self.stage_diff = np.asarray(self.stage_diff, dtype=float)
        self.state_diff = np.asarray(self.state_diff, dtype=float)
        n = len(self.pairs)
        if self.stage_diff.shape != (n,) or self.state_diff.shape != (n,):
            raise ValueError("scoring columns must match the number of pairs")

    def __len__(self) -> int:
        return len(self.pairs)


def select_queries(batch: CandidateBatch, cfg: SelectionConfig,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Indices of the chosen pairs, best first; ties break to the lower index."""
    n = len(batch)
    if n == 0:
        raise SelectionError("empty candidate batch")
    m = min(cfg.queries_per_session, n)
    if cfg.mode == "uniform":
        if rng is None:
            raise ValueError("uniform selection needs an rng")
        return np.sort(rng.choice(n, size=m, replace=False))
    if cfg.mode == "disagreement":
        order = np.argsort(-batch.state_diff, kind="stable")
        return order[:m]
    # the stage-aligned family shares one scoring rule; the modes differ in
    # how the batch's stage_diff column was produced upstream
    stage_norm = normalize_batch(batch.stage_diff)
    state_norm = normalize_batch(batch.state_diff)
    scores = selection_score(stage_norm, state_norm, cfg.c_stage, cfg.c_state)
    order = np.argsort(-scores, kind="stable")
    return order[:m]


# ---------------------------------------------------------------------------
# interval-overlap stage difference (ablation variants)


def interval_span_ratio(interval0: tuple[float, float], interval1: tuple[float, float]) -> float:
    """Overlap-to-span ratio of two value intervals.

    The intervals are first swapped if needed so the one with the smaller
    lower end comes first; the ratio is then (hi0 - lo1) / (hi1 - lo0),
    positive under overlap, negative across a gap, and defined as 1 when the
    enclosing span collapses to a point.
    """
    lo0, hi0 = float(interval0[0]), float(interval0[1])
    lo1, hi1 = float(interval1[0]), float(interval1[1])
    if hi0 < lo0 or hi1 < lo1:
        raise ValueError("intervals must satisfy lo <= hi")
    if lo1 < lo0:
        lo0, hi0, lo1, hi1 = lo1, hi1, lo0, hi0
    denom = hi1 - lo0
    if denom == 0.0:
        return 1.0
    return (hi0 - lo1) / denom


def interval_stage_difference(interval0, interval1) -> float:
    """Stage difference in [0, 1] from interval overlap: 1 - clamp(ratio, 0, 1)."""
    r = interval_span_ratio(interval0, interval1)
    return 1.0 - min(max(r, 0.0), 1.0)


# ---------------------------------------------------------------------------
# synthetic stage-structured quasimetrics and the alignment-case audit


@dataclass
class StageQuasimetric:
    """Distance table whose states partition into stages with known gaps.

    Same-stage distances sit at or below ``intra``; cross-stage distances
    depend only on the (unordered) stage pair and live inside
    [cross_lo, cross_hi]. Construction keeps cross_hi <= 2 * cross_lo so the
    triangle inequality holds by arithmetic rather than by closure.
    """

    values: np.ndarray
    stage_of: np.ndarray
    intra: float
    cross_lo: float
    cross_hi: float

    @property
    def n_states(self) -> int:
        return len(self.stage_of)

    def validate(self, tol: float = 1e-12) -> None:
        d = self.values
        n = self.n_states
        if np.any(np.diag(d) != 0.0):
            raise ValueError("diagonal must be exactly zero")
        if np.any(d < 0):
            raise ValueError("distances must be nonnegative")
        same = self.stage_of[:, None] == self.stage_of[None, :]
        if np.any(d[same] > self.intra + tol):
            raise ValueError("stage compactness violated")
        off = ~same
        if np.any(d[off] < self.cross_lo - tol) or np.any(d[off] > self.cross_hi + tol):
            raise ValueError("cross-stage separation/boundedness violated")
        # exhaustive triangle check; n stays small enough for the cube
        trip = d[:, :, None] + d[None, :, :]  # [x, y, z] = d(x,y) + d(y,z)
        if np.any(d[:, None, :] > trip + tol):
            raise ValueError("triangle inequality violated")


def build_stage_quasimetric(
    n_stages: int,
    per_stage: int,
    intra: float,
    cross_lo: float,
    cross_hi: float,
    rng: np.random.Generator,
) -> StageQuasimetric:
    """Sample a synthetic instance satisfying the alignment-audit assumptions."""
    if n_stages < 2 or per_stage < 2:
        raise ValueError("need at least 2 stages and 2 states per stage")
    if not (0.0 <= intra < cross_lo <= cross_hi):
        raise ValueError("need 0 <= intra < cross_lo <= cross_hi")
    # sampled band [safe_lo, cross_hi] keeps max <= 2 * min, hence triangle-safe
    safe_lo = max(cross_lo, cross_hi / 2.0)
    n = n_stages * per_stage
    stage_of = np.repeat(np.arange(n_stages), per_stage)
    cross = np.zeros((n_stages, n_stages))
    for i in range(n_stages):
        for j in range(i + 1, n_stages):
            cross[i, j] = cross[j, i] = rng.uniform(safe_lo, cross_hi)
    values = cross[np.ix_(stage_of, stage_of)]
    same = stage_of[:, None] == stage_of[None, :]
    values[same] = intra
    np.fill_diagonal(values, 0.0)
    q = StageQuasimetric(values=values, stage_of=stage_of, intra=intra,
                         cross_lo=cross_lo, cross_hi=cross_hi)
    q.validate()
    return q


CASE_ORDER = ("A", "B", "C", "D")


def case_bounds(intra: float, cross_lo: float, cross_hi: float) -> dict[str, tuple[float, float]]:
    """Closed-form quadrilateral-distance bounds per alignment case."""
    return {
        "A": (0.0, intra),
        "B": (cross_lo / 2.0, (intra + cross_hi) / 2.0),
        "C": (3.0 * cross_lo / 4.0, (intra + 3.0 * cross_hi) / 4.0),
        "D": (cross_lo, cross_hi),
    }


def _endpoint_segment(first: int, last: int) -> Segment:
    # synthetic audit segments exist only through their endpoints
    return Segment(source=-1, start=0, length=2, first_state=first, last_state=last)


def _sample_case_pair(q: StageQuasimetric, case: str, rng: np.random.Generator):
    stages = np.unique(q.stage_of)
    pick = lambda w: int(rng.choice(np.flatnonzero(q.stage_of == w)))
    if case == "A":
        w = rng.choice(stages)
        return _endpoint_segment(pick(w), pick(w)), _endpoint_segment(pick(w), pick(w))
    if case == "B":
        w, w2 = rng.choice(stages, size=2, replace=False)
        return (_endpoint_segment(pick(w), pick(w2)),
                _endpoint_segment(pick(w), pick(w2)))
    if case == "C":
        w, w2, w3 = rng.choice(stages, size=3, replace=False)
        return (_endpoint_segment(pick(w), pick(w2)),
                _endpoint_segment(pick(w), pick(w3)))
    if case == "D":
        w = rng.choice(stages, size=4, replace=False)
        return (_endpoint_segment(pick(w[0]), pick(w[1])),
                _endpoint_segment(pick(w[2]), pick(w[3])))
    raise ValueError(f"unknown case {case!r}")


@dataclass
class AlignmentReport:
    bounds: dict[str, tuple[float, float]]
    observed: dict[str, tuple[float, float]]
    all_inside: bool
    strictly_increasing: bool

    def to_json_dict(self) -> dict:
        return {
            "bounds": {k: list(v) for k, v in self.bounds.items()},
            "observed": {k: list(v) for k, v in self.observed.items()},
            "all_inside": self.all_inside,
            "strictly_increasing": self.strictly_increasing,
        }


def alignment_case_check(q: StageQuasimetric, rng: np.random.Generator,
                         samples_per_case: int = 200) -> AlignmentReport:
    """Audit the endpoint-averaged distance against its per-case bounds.

    For each alignment case the report records the observed min/max over
    sampled segment pairs and whether every observation sits inside the
    closed-form bounds; it also checks both bound sequences increase
    strictly from full alignment to none.
    """
    if len(np.unique(q.stage_of)) < 4:
        raise ValueError("case audit needs at least 4 stages")
    q.validate()
    bounds = case_bounds(q.intra, q.cross_lo, q.cross_hi)
    observed: dict[str, tuple[float, float]] = {}
    inside = True
    for case in CASE_ORDER:
        vals = []
        for _ in range(samples_per_case):
            s0, s1 = _sample_case_pair(q, case, rng)
            vals.append(quadrilateral_distance(q.values, s0, s1))
        lo, hi = bounds[case]
        observed[case] = (float(np.min(vals)), float(np.max(vals)))
        if observed[case][0] < lo - 1e-12 or observed[case][1] > hi + 1e-12:
            inside = False
    lows = [bounds[c][0] for c in CASE_ORDER]
    highs = [bounds[c][1] for c in CASE_ORDER]
    increasing = all(a < b for a, b in zip(lows, lows[1:])) and \
        all(a < b for a, b in zip(highs, highs[1:]))
    return AlignmentReport(bounds=bounds, observed=observed,
                           all_inside=inside, strictly_increasing=increasing)
