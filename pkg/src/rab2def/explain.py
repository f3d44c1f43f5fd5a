"""Local linear explanations of client models.

An explanation for one model at one input is a ``features x classes`` matrix of
importances over the predicted class probabilities.  ``gradient`` mode uses the
exact input Jacobian; ``surrogate`` mode fits a ridge-regularised linear model
to the probabilities on Gaussian perturbations around the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .model import ModelLayout, input_jacobians, predict_proba

LLE_MODES = ("gradient", "surrogate")


@dataclass(frozen=True)
class LLEConfig:
    mode: str = "gradient"
    n_perturb: int = 200
    radius: float = 0.05
    max_instances: int = 32
    ridge: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.mode not in LLE_MODES:
            raise ValueError(f"unknown LLE mode {self.mode!r}")
        if self.n_perturb < 1 or self.max_instances < 1:
            raise ValueError("n_perturb and max_instances must be positive")
        if not self.radius > 0:
            raise ValueError("radius must be positive")


@dataclass(frozen=True)
class ImportanceMatrix:
    entries: np.ndarray
    client_id: int = 0
    instance_id: int = 0
    mode: str = "gradient"

    def __post_init__(self):
        A = np.asarray(self.entries, dtype=np.float64)
        if A.ndim != 2:
            raise ShapeError(f"importance matrix must be 2-D, got {A.shape}")
        if not np.all(np.isfinite(A)):
            raise ValueError("importance matrix has non-finite entries")
        object.__setattr__(self, "entries", A)


def fit_local_linear(predict_fn, x: np.ndarray, n_perturb: int, radius: float, seed: int, ridge: float = 1e-6) -> np.ndarray:
    """Per-output linear fit of ``predict_fn`` around ``x``.

    ``predict_fn`` maps an ``(m, features)`` matrix to ``(m, outputs)``.
    Returns the ``features x outputs`` slope matrix; the intercept is fitted
    but not returned.
    """
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    offsets = rng.standard_normal((n_perturb, x.shape[0])) * radius
    targets = np.asarray(predict_fn(x[None, :] + offsets), dtype=np.float64)
    if not np.all(np.isfinite(targets)):
        raise ValueError("model produced non-finite outputs on perturbed inputs")
    # centring removes the intercept from the normal equations
    D = offsets - offsets.mean(axis=0)
    T = targets - targets.mean(axis=0)
    gram = D.T @ D + ridge * n_perturb * np.eye(x.shape[0])
    return np.linalg.solve(gram, D.T @ T)


def lle_importance(
    layout: ModelLayout,
    params: np.ndarray,
    x: np.ndarray,
    mode: str = "gradient",
    n_perturb: int = 200,
    radius: float = 0.05,
    seed: int = 0,
    ridge: float = 1e-6,
) -> ImportanceMatrix:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != layout.input_dim:
        raise ShapeError(f"input has shape {x.shape}, model expects {layout.input_dim} features")
    if mode == "gradient":
        A = input_jacobians(layout, params, x)[0]
    elif mode == "surrogate":
        A = fit_local_linear(lambda X: predict_proba(layout, params, X), x, n_perturb, radius, seed, ridge)
    else:
        raise ValueError(f"unknown LLE mode {mode!r}")
    if not np.all(np.isfinite(A)):
        raise ValueError("non-finite model outputs while explaining")
    return ImportanceMatrix(A, mode=mode)


def cosine_similarity(a, b) -> float:
    """Cosine of the flattened matrices; 0 when either has (near) zero norm."""
    A = a.entries if isinstance(a, ImportanceMatrix) else np.asarray(a, dtype=np.float64)
    B = b.entries if isinstance(b, ImportanceMatrix) else np.asarray(b, dtype=np.float64)
    if A.shape != B.shape:
        raise ShapeError(f"cannot compare matrices of shape {A.shape} and {B.shape}")
    na, nb = np.linalg.norm(A), np.linalg.norm(B)
    if na < 1e-12 or nb < 1e-12:
        return 0.0
    return float(np.clip(np.dot(A.ravel(), B.ravel()) / (na * nb), -1.0, 1.0))


def select_instances(n_available: int, cap: int, seed: int) -> np.ndarray:
    """Sorted, seeded subsample of at most ``cap`` instance indices."""
    if n_available <= cap:
        return np.arange(n_available)
    return np.sort(np.random.default_rng(seed).choice(n_available, size=cap, replace=False))


class ExplanationError(RuntimeError):
    def __init__(self, client_id: int, cause: Exception):
        self.client_id = client_id
        super().__init__(f"client {client_id}: {cause}")


def explanation_bank(
    layout: ModelLayout,
    client_params,
    validation,
    config: LLEConfig = LLEConfig(),
    client_ids=None,
) -> np.ndarray:
    """Importances for every (client, sampled validation instance).

    Returns an array of shape ``(clients, instances, features, classes)``.
    Each cell is computed from its own inputs only, so the result does not
    depend on the order clients are visited in.
    """
    client_params = list(client_params)
    X = validation.features if hasattr(validation, "features") else np.asarray(validation, dtype=np.float64)
    if not client_params or X.shape[0] == 0:
        raise ValueError("explanation bank needs at least one client and one instance")
    ids = list(range(len(client_params))) if client_ids is None else list(client_ids)
    picked = select_instances(X.shape[0], config.max_instances, config.seed)
    Xs = X[picked]

    bank = np.empty((len(client_params), len(picked), layout.input_dim, layout.n_classes))
    for row, (cid, params) in enumerate(zip(ids, client_params)):
        try:
            if config.mode == "gradient":
                bank[row] = input_jacobians(layout, params, Xs)
            else:
                for col, x in enumerate(Xs):
                    bank[row, col] = lle_importance(
                        layout, params, x, "surrogate", config.n_perturb, config.radius,
                        seed=config.seed + int(picked[col]), ridge=config.ridge,
                    ).entries
            if not np.all(np.isfinite(bank[row])):
                raise ValueError("non-finite importances")
        except (ValueError, ShapeError, FloatingPointError) as exc:
            raise ExplanationError(cid, exc) from exc
    return bank


def mean_pairwise_cosine(bank: np.ndarray) -> np.ndarray:
    """For each client, the sum over instances of its mean cosine to every other client.

    ``bank`` has shape ``(clients, instances, features, classes)``.  Zero-norm
    explanations count as similarity 0.
    """
    n, v = bank.shape[:2]
    if n < 2:
        raise ValueError("need at least two clients to compare explanations")
    flat = bank.reshape(n, v, -1)
    norms = np.linalg.norm(flat, axis=2)
    safe = np.where(norms < 1e-12, 1.0, norms)
    unit = flat / safe[:, :, None]
    unit[norms < 1e-12] = 0.0
    scores = np.zeros(n)
    for inst in range(v):
        U = unit[:, inst, :]
        sims = np.clip(U @ U.T, -1.0, 1.0)
        np.fill_diagonal(sims, 0.0)
        scores += sims.sum(axis=1) / (n - 1)
    return scores


def render_importance(matrix, klass: int, image_shape) -> np.ndarray:
    """Greyscale map of |importance| for one class; white is most important.

    Channels are averaged.  A constant map renders all black.
    """
    A = matrix.entries if isinstance(matrix, ImportanceMatrix) else np.asarray(matrix, dtype=np.float64)
    h, w, ch = (int(s) for s in image_shape)
    if A.ndim != 2 or A.shape[0] != h * w * ch:
        raise ShapeError(f"matrix with {A.shape[0] if A.ndim else 0} features does not fit image {image_shape}")
    if not 0 <= klass < A.shape[1]:
        raise ShapeError(f"class {klass} out of range")
    mag = np.abs(A[:, klass]).reshape(h, w, ch).mean(axis=2)
    lo, hi = mag.min(), mag.max()
    if hi - lo <= 0:
        return np.zeros((h, w), dtype=np.uint8)
    return np.rint(255.0 * (mag - lo) / (hi - lo)).astype(np.uint8)


def encode_pgm(image: np.ndarray) -> bytes:
    """Binary PGM (P5, maxval 255)."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise ShapeError("PGM images are 2-D")
    return b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]) + img.tobytes()


def decode_pgm(blob: bytes) -> np.ndarray:
    parts = blob.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only maxval 255 is supported")
    data = parts[4]
    if len(data) != w * h:
        # header whitespace is exactly one byte; the split may have eaten pixel bytes
        data = blob[len(blob) - w * h:]
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)
