"""Confusion-matrix quantification: estimate a target label distribution.

With ``C[y, y'] = E[yhat_y | y']`` estimated on labeled source data and
``p_hat = E[yhat]`` on the unlabeled target, the target prior solves
``C @ p = p_hat``.
"""

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_COND_THRESHOLD = 1e8


class QuantificationError(ArithmeticError):
    """Numerical failure of the prior solve."""


class SingularMatrixError(QuantificationError):
    def __init__(self, message="singular confusion matrix"):
        super().__init__(message)
        self.condition_number = np.inf


class IllConditionedError(QuantificationError):
    def __init__(self, condition_number, threshold):
        super().__init__(f"ill-conditioned confusion matrix (condition number {condition_number:.3g} > {threshold:.3g})")
        self.condition_number = condition_number
        self.threshold = threshold


@dataclass
class ConfusionMatrix:
    matrix: np.ndarray  # (K, K), column y' is the mean prediction of true class y'
    support: np.ndarray  # source count per true class
    method: str  # "soft" | "hard"

    @property
    def num_classes(self):
        return self.matrix.shape[0]

    @property
    def unsupported(self):
        return np.flatnonzero(self.support == 0)

    def to_dict(self):
        return {
            "matrix": self.matrix.tolist(),
            "support": self.support.tolist(),
            "method": self.method,
        }

    @classmethod
    def from_dict(cls, d):
        m = np.asarray(d["matrix"], dtype=float)
        support = np.asarray(d.get("support", [1] * m.shape[1]), dtype=np.int64)
        return cls(m, support, d.get("method", "soft"))


@dataclass
class ClassDistribution:
    probs: np.ndarray
    provenance: str = "quantified"  # "true" | "classifier-mean" | "quantified"

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        if np.any(self.probs < 0) or not np.isclose(self.probs.sum(), 1.0, atol=1e-9):
            raise ValueError("class distribution must be non-negative and sum to 1")

    def __len__(self):
        return len(self.probs)

    def to_dict(self):
        return {"probs": self.probs.tolist(), "provenance": self.provenance}


@dataclass
class QuantificationResult:
    prior: ClassDistribution
    condition_number: float
    supported: np.ndarray  # boolean mask over all K classes
    clipped_mass: float
    method: str
    raw_solution: np.ndarray = None

    def to_dict(self):
        return {
            "prior": self.prior.probs.tolist(),
            "condition_number": self.condition_number,
            "supported": self.supported.tolist(),
            "clipped_mass": self.clipped_mass,
            "method": self.method,
        }


def _check(preds, labels, K):
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.ndim != 2 or len(preds) != len(labels):
        raise ValueError("need one prediction row per label")
    if preds.shape[1] != K:
        raise ValueError(f"predictions have {preds.shape[1]} columns, expected {K}")
    if len(labels) and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in 0..{K - 1}")
    return preds, labels


def _column_means(preds, labels, K, method):
    support = np.bincount(labels, minlength=K)
    sums = np.zeros((K, K))
    np.add.at(sums.T, labels, preds)
    C = np.zeros((K, K))
    has = support > 0
    C[:, has] = sums[:, has] / support[has]
    if not has.all():
        log.debug("classes without source support: %s", np.flatnonzero(~has).tolist())
    return ConfusionMatrix(C, support, method)


def soft_confusion(preds, labels, K):
    preds, labels = _check(preds, labels, K)
    return _column_means(preds, labels, K, "soft")


def harden(preds):
    """Argmax one-hot rows; ties go to the lowest index."""
    preds = np.asarray(preds, dtype=float)
    out = np.zeros_like(preds)
    out[np.arange(len(preds)), np.argmax(preds, axis=1)] = 1.0
    return out


def hard_confusion(preds, labels, K):
    preds, labels = _check(preds, labels, K)
    return _column_means(harden(preds), labels, K, "hard")


def confusion(preds, labels, K, method):
    if method == "soft":
        return soft_confusion(preds, labels, K)
    if method == "hard":
        return hard_confusion(preds, labels, K)
    raise ValueError(f"unknown method {method!r}")


def target_mean(preds, method="soft"):
    """Mean prediction over the target (hardened first for the hard method)."""
    preds = np.asarray(preds, dtype=float)
    if preds.ndim != 2 or len(preds) == 0:
        raise ValueError("target_mean needs a non-empty prediction matrix")
    if method == "hard":
        preds = harden(preds)
    m = preds.mean(axis=0)
    return ClassDistribution(m / m.sum(), "classifier-mean")


def restrict_supported(C, p_hat, support_mask):
    """Drop unsupported classes and renormalize what remains.

    Returns ``(reduced C, reduced p_hat, index)`` where ``index`` lists the
    original class of each retained row/column.
    """
    mask = np.asarray(support_mask, dtype=bool)
    if not mask.any():
        raise ValueError("support mask selects no class")
    M = C.matrix if isinstance(C, ConfusionMatrix) else np.asarray(C, dtype=float)
    p = p_hat.probs if isinstance(p_hat, ClassDistribution) else np.asarray(p_hat, dtype=float)
    index = np.flatnonzero(mask)
    if mask.all():
        return M, p, index
    R = M[np.ix_(index, index)]
    col = R.sum(axis=0)
    R = np.divide(R, col, out=np.zeros_like(R), where=col > 0)
    q = p[index]
    total = q.sum()
    q = q / total if total > 0 else np.full(len(index), 1.0 / len(index))
    return R, q, index


def condition_number(M):
    s = np.linalg.svd(M, compute_uv=False)
    # numerically rank deficient (same tolerance as numpy.linalg.matrix_rank)
    if s[-1] <= s[0] * max(M.shape) * np.finfo(float).eps:
        return np.inf
    return float(s[0] / s[-1])


def solve_prior(C, p_hat, cond_threshold=DEFAULT_COND_THRESHOLD, support_mask=None, method=None):
    """Solve ``C p = p_hat`` for the target prior.

    Negative components are clipped to zero and the rest renormalized; the
    removed mass is reported.  With ``support_mask`` the system is first
    reduced to the supported classes and the answer re-embedded (unsupported
    classes get 0).
    """
    M = C.matrix if isinstance(C, ConfusionMatrix) else np.asarray(C, dtype=float)
    p = p_hat.probs if isinstance(p_hat, ClassDistribution) else np.asarray(p_hat, dtype=float)
    if method is None:
        method = C.method if isinstance(C, ConfusionMatrix) else "soft"
    K = M.shape[0]
    if M.shape != (K, K) or p.shape != (K,):
        raise ValueError(f"shape mismatch: C {M.shape}, p_hat {p.shape}")
    mask = np.ones(K, dtype=bool) if support_mask is None else np.asarray(support_mask, dtype=bool)
    R, q, index = restrict_supported(M, p, mask)

    if np.any(~R.any(axis=0)) or np.any(~R.any(axis=1)):
        raise SingularMatrixError("singular confusion matrix (all-zero row or column)")
    cond = condition_number(R)
    if not np.isfinite(cond):
        raise SingularMatrixError()
    if cond > cond_threshold:
        raise IllConditionedError(cond, cond_threshold)
    try:
        raw = np.linalg.solve(R, q)
    except np.linalg.LinAlgError:
        raise SingularMatrixError() from None

    # 1^T R = 1^T, so the raw solution must carry exactly the mass of q
    if np.allclose(R.sum(axis=0), 1.0, atol=1e-9):
        drift = abs(raw.sum() - q.sum())
        if drift > 1e-6 * max(1.0, cond * 1e-6):
            raise QuantificationError(f"mass not conserved through the solve (drift {drift:.3g})")

    clipped = float(-raw[raw < 0].sum()) if np.any(raw < 0) else 0.0
    est = np.clip(raw, 0.0, None)
    total = est.sum()
    if total <= 0:
        raise SingularMatrixError("solution has no positive mass")
    est = est / total
    full = np.zeros(K)
    full[index] = est
    raw_full = np.zeros(K)
    raw_full[index] = raw
    return QuantificationResult(ClassDistribution(full, "quantified"), cond, mask.copy(), clipped, method, raw_full)


def quantify(source_preds, source_labels, target_preds, K, method="soft",
             min_support=1, cond_threshold=DEFAULT_COND_THRESHOLD):
    """Build the confusion matrix and target mean, then solve for the prior."""
    C = confusion(source_preds, source_labels, K, method)
    p_hat = target_mean(target_preds, method)
    mask = C.support >= max(min_support, 1)
    return solve_prior(C, p_hat, cond_threshold, support_mask=mask)
