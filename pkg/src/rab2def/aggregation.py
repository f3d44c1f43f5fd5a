"""Server-side aggregation rules.

Baselines (FedAvg, median, trimmed mean, Multi-Krum, Bulyan, norm clipping,
weak DP, robust learning rate) and the two quantifier-weighted defenses:
DDaBA, which orders clients by validation accuracy, and RAB2-DEF, which orders
them by how well their local explanations agree with everybody else's.

Inputs called ``updates`` are full client models; inputs called ``deltas``
are ``model - global_prev``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import EmptyInputError, ShapeError
from .explain import LLEConfig, explanation_bank, mean_pairwise_cosine
from .model import ModelLayout, predict

# X <= ln(10/9)/lambda marks the top decile of an exponential variable
TOP_QUANTILE = math.log(10 / 9)
# Q3 + 1.5 IQR of an exponential: ln 4 + 1.5 ln 3 (in units of 1/lambda)
OUTLIER_QUANTILE = math.log(4) + 1.5 * math.log(3)
DEGENERATE_MEAN = 1e-12


def _stack(vectors) -> np.ndarray:
    arrs = [np.asarray(v, dtype=np.float64) for v in vectors]
    if not arrs:
        raise EmptyInputError("no client updates to aggregate")
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs) or len(shape) != 1:
        raise ShapeError("client updates have inconsistent layouts")
    return np.stack(arrs)


# ---------------------------------------------------------------- baselines

def fedavg(global_prev, deltas, server_lr: float = 1.0) -> np.ndarray:
    D = _stack(deltas)
    G = np.asarray(global_prev, dtype=np.float64)
    if D.shape[1] != G.shape[0]:
        raise ShapeError("deltas and global model differ in length")
    return G + (server_lr / D.shape[0]) * D.sum(axis=0)


def coordinate_median(updates) -> np.ndarray:
    return np.median(_stack(updates), axis=0)


def trimmed_mean(updates, trim: float = 0.15) -> np.ndarray:
    """Per coordinate, drop ``floor(trim * n)`` values from each tail and average."""
    U = _stack(updates)
    n = U.shape[0]
    k = int(math.floor(trim * n + 1e-12))
    if not 0 <= trim < 0.5 or n - 2 * k < 1:
        raise ValueError(f"trimming {k} from each tail of {n} values leaves nothing")
    kept = np.sort(U, axis=0)[k:n - k]
    # correctly rounded sums, so the result does not depend on summation order
    return np.array([math.fsum(col) for col in kept.T]) / kept.shape[0]


def pairwise_sq_distances(U: np.ndarray) -> np.ndarray:
    diff = U[:, None, :] - U[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def krum_scores(updates, n_byz: int) -> np.ndarray:
    """Sum of squared distances to the ``n - n_byz - 2`` nearest other updates."""
    U = _stack(updates)
    n = U.shape[0]
    k = n - n_byz - 2
    if k < 1:
        raise ValueError(f"Krum needs n - n_byz - 2 >= 1 (n={n}, n_byz={n_byz})")
    d = pairwise_sq_distances(U)
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(d[i], i))
        scores[i] = others[:k].sum()
    return scores


def multikrum_select(updates, n_select: int, n_byz: int) -> np.ndarray:
    """Indices of the ``n_select`` lowest Krum scores (ties to the lower index)."""
    scores = krum_scores(updates, n_byz)
    if not 1 <= n_select <= scores.size:
        raise ValueError("n_select must lie in [1, n]")
    return np.sort(np.argsort(scores, kind="stable")[:n_select])


def multikrum(updates, n_select: int, n_byz: int) -> np.ndarray:
    U = _stack(updates)
    return U[multikrum_select(U, n_select, n_byz)].mean(axis=0)


def bulyan_select(updates, n_byz: int, n_select: int | None = None) -> np.ndarray:
    """Iterated Krum: pick the best-scored update, remove it, rescore, repeat."""
    U = _stack(updates)
    n = U.shape[0]
    if n_select is None:
        n_select = n - 2 * n_byz
    if not 1 <= n_select <= n:
        raise ValueError(f"Bulyan selection size {n_select} invalid for {n} clients")
    d = pairwise_sq_distances(U)
    remaining = list(range(n))
    chosen = []
    while len(chosen) < n_select:
        m = len(remaining)
        k = min(max(m - n_byz - 2, 1), m - 1)
        if m == 1:
            chosen.append(remaining.pop())
            continue
        best, best_score = None, np.inf
        for i in remaining:
            others = np.sort([d[i, j] for j in remaining if j != i])
            s = others[:k].sum()
            if s < best_score:
                best, best_score = i, s
        chosen.append(best)
        remaining.remove(best)
    return np.sort(np.array(chosen, dtype=np.int64))


def bulyan(updates, n_byz: int, trim: float = 0.15, n_select: int | None = None) -> np.ndarray:
    U = _stack(updates)
    return trimmed_mean(U[bulyan_select(U, n_byz, n_select)], trim)


def clip_deltas(deltas, M: float) -> np.ndarray:
    if not M > 0:
        raise ValueError("clipping threshold must be positive")
    D = _stack(deltas)
    norms = np.linalg.norm(D, axis=1)
    return D / np.maximum(1.0, norms / M)[:, None]


def norm_clip(global_prev, deltas, M: float, server_lr: float = 1.0) -> np.ndarray:
    return fedavg(global_prev, clip_deltas(deltas, M), server_lr)


def wdp(global_prev, deltas, M: float, sigma: float, server_lr: float = 1.0, seed: int = 0) -> np.ndarray:
    """Norm clipping plus Gaussian noise with std ``sigma * M / n`` per coordinate."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    D = clip_deltas(deltas, M)
    out = fedavg(global_prev, D, server_lr)
    if sigma == 0:
        return out
    std = sigma * M / D.shape[0]
    return out + np.random.default_rng(seed).normal(0.0, std, size=out.shape)


def rlr(global_prev, deltas, theta: float, server_lr: float = 1.0) -> np.ndarray:
    """Robust learning rate: negate the step where sign agreement is below ``theta``."""
    D = _stack(deltas)
    agreement = np.abs(np.sign(D).sum(axis=0))
    lr = np.where(agreement >= theta, server_lr, -server_lr)
    return np.asarray(global_prev, dtype=np.float64) + lr * D.sum(axis=0) / D.shape[0]


# ---------------------------------------------------------------- ordering

@dataclass(frozen=True)
class OrderingResult:
    scores: np.ndarray
    x_values: np.ndarray
    lam: float | None
    ranking: np.ndarray

    @property
    def degenerate(self) -> bool:
        return self.lam is None


def ordering_from_scores(scores, client_ids=None) -> OrderingResult:
    """Rank by descending score (ties to the lower client id) and fit the gap rate."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    ids = np.arange(n) if client_ids is None else np.asarray(client_ids)
    ranking = np.array(sorted(range(n), key=lambda i: (-scores[i], ids[i])), dtype=np.int64)
    x = scores.max() - scores
    mean = float(x.mean())
    lam = None if mean < DEGENERATE_MEAN else 1.0 / mean
    return OrderingResult(scores, x, lam, ranking)


def lle_ordering(layout: ModelLayout, updates, validation, config: LLEConfig = LLEConfig(), client_ids=None) -> OrderingResult:
    updates = list(updates)
    if len(updates) < 2:
        raise ValueError("explanation ordering needs at least two clients")
    bank = explanation_bank(layout, updates, validation, config, client_ids)
    return ordering_from_scores(mean_pairwise_cosine(bank), client_ids)


def accuracy_ordering(layout: ModelLayout, updates, validation, client_ids=None) -> OrderingResult:
    y = validation.labels
    scores = [float(np.mean(predict(layout, u, validation.features) == y)) for u in updates]
    return ordering_from_scores(scores, client_ids)


# ---------------------------------------------------------------- quantifier

@dataclass(frozen=True)
class QuantifierParams:
    a: float
    b: float
    c: float
    y_b: float

    def __post_init__(self):
        if not 0.0 <= self.a <= self.b <= self.c <= 1.0:
            raise ValueError(f"need 0 <= a <= b <= c <= 1, got {self.a}, {self.b}, {self.c}")
        if not 0.0 <= self.y_b <= 1.0:
            raise ValueError("y_b must lie in [0, 1]")


def quantifier_params(ordering: OrderingResult, n: int | None = None) -> QuantifierParams:
    """Breakpoints of the step-wise quantifier from an exponential fit of the gaps.

    ``b``: share of clients with gap <= ln(10/9)/lambda (raised to 1/n when 0).
    ``c``: 1 minus the share with gap >= (ln 4 + 1.5 ln 3)/lambda.
    ``y_b``: chosen so each Top client weighs twice each Rest client.
    """
    if ordering.degenerate:
        raise ValueError("degenerate ordering: all clients are indistinguishable")
    x = ordering.x_values
    n = x.size if n is None else n
    lam = ordering.lam
    n_top = int(np.count_nonzero(x <= TOP_QUANTILE / lam))
    n_out = int(np.count_nonzero(x >= OUTLIER_QUANTILE / lam))
    n_top = max(n_top, 1)
    n_keep = n - n_out
    n_rest = n_keep - n_top
    y_b = 2 * n_top / (2 * n_top + n_rest)
    return QuantifierParams(0.0, n_top / n, n_keep / n, y_b)


def printed_y_b(params: QuantifierParams, n: int) -> float | None:
    """``2|Top| / (2|Top| - |Rest|)`` as printed in the original write-up.

    Kept only for reporting; it is undefined when ``|Rest| = 2|Top|``.
    """
    top = params.b * n
    rest = (params.c - params.b) * n
    denom = 2 * top - rest
    return None if abs(denom) < 1e-12 else 2 * top / denom


def quantifier_value(params: QuantifierParams, x):
    """The four-piece quantifier: 0, then ramps to ``y_b`` at ``b`` and 1 at ``c``."""
    a, b, c, yb = params.a, params.b, params.c, params.y_b
    if x <= a:
        return x * 0
    if x <= b:
        return (x - a) / (b - a) * yb
    if x <= c:
        return (x - b) / (c - b) * (1 - yb) + yb
    return x * 0 + 1


def _rational(v: float) -> Fraction:
    return Fraction(v).limit_denominator(10**9)


def quantifier_weights(params: QuantifierParams, n: int) -> np.ndarray:
    """``w_i = Q(i/n) - Q((i-1)/n)`` for rank positions 1..n.

    Evaluated in rational arithmetic so segment weights come out exactly
    equal (and exactly zero past ``c``).
    """
    if n < 1:
        raise ValueError("need at least one client")
    exact = QuantifierParams.__new__(QuantifierParams)
    for name in ("a", "b", "c", "y_b"):
        object.__setattr__(exact, name, _rational(getattr(params, name)))
    q = [quantifier_value(exact, Fraction(i, n)) for i in range(n + 1)]
    return np.array([float(q[i] - q[i - 1]) for i in range(1, n + 1)])


def uniform_weights(n: int) -> np.ndarray:
    return np.full(n, 1.0 / n)


# ---------------------------------------------------------------- quantifier defenses

@dataclass(frozen=True)
class QuantifiedResult:
    params: np.ndarray
    weights: np.ndarray  # per client, in input order
    ordering: OrderingResult
    quantifier: QuantifierParams | None
    fallback: bool


def quantified_aggregate(updates, ordering: OrderingResult) -> QuantifiedResult:
    """Weighted sum of full models, summed in ranking order."""
    U = _stack(updates)
    n = U.shape[0]
    if ordering.degenerate:
        qp, ranked_w, fallback = None, uniform_weights(n), True
    else:
        qp = quantifier_params(ordering, n)
        ranked_w, fallback = quantifier_weights(qp, n), False
    weights = np.empty(n)
    weights[ordering.ranking] = ranked_w
    out = np.zeros(U.shape[1])
    for pos, idx in enumerate(ordering.ranking):
        if ranked_w[pos] != 0.0:
            out += ranked_w[pos] * U[idx]
    return QuantifiedResult(out, weights, ordering, qp, fallback)


def rab2def_aggregate(layout: ModelLayout, updates, validation, config: LLEConfig = LLEConfig(), client_ids=None) -> QuantifiedResult:
    updates = list(updates)
    return quantified_aggregate(updates, lle_ordering(layout, updates, validation, config, client_ids))


def ddaba_aggregate(layout: ModelLayout, updates, validation, client_ids=None) -> QuantifiedResult:
    updates = list(updates)
    return quantified_aggregate(updates, accuracy_ordering(layout, updates, validation, client_ids))
