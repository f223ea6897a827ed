"""Quantification score and top-k accuracy."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .calibrate import top_k

log = logging.getLogger(__name__)


def prevalence_ratios(prior, source_prior):
    """Per-class ``prior / source_prior``; nan where the source prior is 0."""
    prior = np.asarray(getattr(prior, "probs", prior), dtype=float)
    src = np.asarray(getattr(source_prior, "probs", source_prior), dtype=float)
    return np.divide(prior, src, out=np.full_like(prior, np.nan), where=src > 0)


def quantification_score(estimated_prior, actual_prior, source_prior, return_excluded=False):
    """Euclidean distance between estimated and actual target/source ratios,
    divided by the number of scored classes."""
    est = np.asarray(getattr(estimated_prior, "probs", estimated_prior), dtype=float)
    act = np.asarray(getattr(actual_prior, "probs", actual_prior), dtype=float)
    src = np.asarray(getattr(source_prior, "probs", source_prior), dtype=float)
    if not est.shape == act.shape == src.shape:
        raise ValueError("priors must have equal lengths")
    scored = src > 0
    excluded = np.flatnonzero(~scored)
    if not scored.any():
        raise ValueError("no class has a positive source prior")
    if len(excluded):
        log.info("classes excluded from score (zero source prior): %s", excluded.tolist())
    r_est = est[scored] / src[scored]
    r_act = act[scored] / src[scored]
    score = float(np.linalg.norm(r_est - r_act) / scored.sum())
    if return_excluded:
        return score, excluded
    return score


def topk_accuracy(preds, labels, k):
    preds = np.asarray(preds, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if len(preds) != len(labels):
        raise ValueError("need one prediction row per label")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, preds.shape[1])
    hits = (top_k(preds, k) == labels[:, None]).any(axis=1)
    return float(hits.mean())


@dataclass
class EvalReport:
    method: str
    score: float
    estimated_prior: list
    actual_prior: list
    source_prior: list
    estimated_ratio: list
    actual_ratio: list
    top1: float = None
    top3: float = None
    seed: int = None
    status: str = "ok"
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        return dict(self.__dict__)


def evaluate(method, estimated_prior, actual_prior, source_prior, preds=None, labels=None, seed=None):
    est = np.asarray(getattr(estimated_prior, "probs", estimated_prior), dtype=float)
    act = np.asarray(getattr(actual_prior, "probs", actual_prior), dtype=float)
    src = np.asarray(getattr(source_prior, "probs", source_prior), dtype=float)
    rep = EvalReport(
        method=method,
        score=quantification_score(est, act, src),
        estimated_prior=est.tolist(),
        actual_prior=act.tolist(),
        source_prior=src.tolist(),
        estimated_ratio=_nan_to_none(prevalence_ratios(est, src)),
        actual_ratio=_nan_to_none(prevalence_ratios(act, src)),
        seed=seed,
    )
    if preds is not None:
        rep.top1 = topk_accuracy(preds, labels, 1)
        rep.top3 = topk_accuracy(preds, labels, 3)
    return rep


def _nan_to_none(a):
    return [None if not np.isfinite(v) else float(v) for v in a]
