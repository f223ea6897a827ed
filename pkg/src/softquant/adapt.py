"""End-to-end adaptation pipelines.

``global_da`` quantifies the target prior once and recalibrates every target
row.  ``subspace_da`` does the same independently inside each subspace of a
PCA + K-Means partition, which turns a conditional shift into a per-subspace
label shift whenever the class-conditional density ratio is constant inside
each subspace.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from .calibrate import build_map, recalibrate
from .classifier import predict_proba
from .partition import PartitionConfig, fit_partition
from .quantify import (
    DEFAULT_COND_THRESHOLD,
    ClassDistribution,
    QuantificationError,
    confusion,
    solve_prior,
    target_mean,
)

log = logging.getLogger(__name__)

METHODS = ("none", "global-hard", "global-soft", "subspace-hard", "subspace-soft")


@dataclass
class AdaptationReport:
    method: str
    prior: np.ndarray  # estimated global target prior
    source_prior: np.ndarray
    classifier_mean: np.ndarray  # uncalibrated mean prediction on the target
    subspace_priors: np.ndarray  # (n_subspaces, K)
    subspace_weights: np.ndarray  # target fraction per subspace
    calibrated: np.ndarray  # (n_target, K)
    condition_numbers: list = field(default_factory=list)
    clipped_mass: list = field(default_factory=list)
    fallbacks: list = field(default_factory=list)
    partition: object = None

    def to_dict(self, include_predictions=False):
        d = {
            "method": self.method,
            "prior": self.prior.tolist(),
            "source_prior": self.source_prior.tolist(),
            "classifier_mean": self.classifier_mean.tolist(),
            "subspace_priors": self.subspace_priors.tolist(),
            "subspace_weights": self.subspace_weights.tolist(),
            "condition_numbers": [None if c is None or not np.isfinite(c) else c for c in self.condition_numbers],
            "clipped_mass": self.clipped_mass,
            "fallbacks": self.fallbacks,
        }
        if self.partition is not None:
            d["partition"] = self.partition.to_dict()
        if include_predictions:
            d["calibrated"] = self.calibrated.tolist()
        return d


def combine_subspace_priors(priors, weights):
    """``sum_s weights[s] * priors[s]`` over all K classes."""
    P = np.atleast_2d(np.asarray(priors, dtype=float))
    w = np.asarray(weights, dtype=float)
    if len(w) != len(P):
        raise ValueError(f"{len(w)} weights for {len(P)} subspace priors")
    if not np.isclose(w.sum(), 1.0, atol=1e-9):
        raise ValueError("subspace weights must sum to 1")
    out = w @ P
    return ClassDistribution(out / out.sum(), "quantified")


def _split_method(method):
    scope, _, kind = method.partition("-")
    if method not in METHODS or method == "none":
        raise ValueError(f"unknown adaptation method {method!r}; expected one of {METHODS[1:]}")
    return scope, kind


def _adapt_block(src_preds, src_labels, tgt_preds, K, kind, min_support, cond_threshold, strict):
    """Quantify and recalibrate one block of rows.

    Returns ``(prior, calibrated, cond, clipped, failure)``; on a failed solve
    with ``strict=False`` the block falls back to its source prior.
    """
    counts = np.bincount(src_labels, minlength=K)
    src_prior = counts / counts.sum()
    C = confusion(src_preds, src_labels, K, kind)
    p_hat = target_mean(tgt_preds, kind)
    mask = counts >= min_support
    if not mask.any():
        mask = counts > 0
    try:
        res = solve_prior(C, p_hat, cond_threshold, support_mask=mask)
    except QuantificationError as e:
        if strict:
            raise
        cal = recalibrate(tgt_preds, build_map(src_prior, src_prior, warn=False))
        return src_prior, cal, getattr(e, "condition_number", None), 0.0, str(e)
    cal = recalibrate(tgt_preds, build_map(src_prior, res.prior.probs, warn=False))
    return res.prior.probs, cal, res.condition_number, res.clipped_mass, None


def global_da(model, source, target_features, method="soft", min_support=5,
              cond_threshold=DEFAULT_COND_THRESHOLD, source_preds=None, target_preds=None):
    """Quantify on the whole input space and recalibrate all target rows.

    Solve failures propagate as ``QuantificationError``.
    """
    kind = method.split("-")[-1]
    if kind not in ("soft", "hard"):
        raise ValueError(f"unknown method {method!r}")
    K = source.num_classes
    sp = predict_proba(model, source.features) if source_preds is None else source_preds
    tp = predict_proba(model, target_features) if target_preds is None else target_preds
    prior, cal, cond, clipped, _ = _adapt_block(sp, source.labels, tp, K, kind, min_support, cond_threshold, True)
    return AdaptationReport(
        method=f"global-{kind}",
        prior=prior,
        source_prior=source.prior(),
        classifier_mean=tp.mean(axis=0),
        subspace_priors=prior[None, :].copy(),
        subspace_weights=np.ones(1),
        calibrated=cal,
        condition_numbers=[cond],
        clipped_mass=[clipped],
    )


def subspace_da(model, source, target_features, config=None, method="soft",
                cond_threshold=DEFAULT_COND_THRESHOLD, source_preds=None, target_preds=None,
                partition=None):
    """Per-subspace quantification and recalibration.

    Each subspace is solved against its own source prior; a failed solve
    leaves that subspace unadapted and is logged in ``fallbacks``.  With a
    single subspace the solve is the global one, so its failure propagates
    exactly as in ``global_da``.
    """
    cfg = config or PartitionConfig()
    kind = method.split("-")[-1]
    if kind not in ("soft", "hard"):
        raise ValueError(f"unknown method {method!r}")
    K = source.num_classes
    sp = predict_proba(model, source.features) if source_preds is None else source_preds
    tp = predict_proba(model, target_features) if target_preds is None else target_preds
    if partition is None:
        partition = fit_partition(source.features, source.labels, K, cfg, target_features)
    s_src = partition.assign(source.features)
    s_tgt = partition.assign(target_features)
    n_sub = partition.n_subspaces

    priors = np.zeros((n_sub, K))
    calibrated = np.zeros_like(tp)
    weights = np.bincount(s_tgt, minlength=n_sub) / len(s_tgt)
    conds, clipped, fallbacks = [], [], []
    for s in range(n_sub):
        src_rows = s_src == s
        tgt_rows = s_tgt == s
        if not src_rows.any():
            if tgt_rows.any():
                # no source evidence at all: keep the raw predictions
                calibrated[tgt_rows] = tp[tgt_rows]
                priors[s] = tp[tgt_rows].mean(axis=0)
            fallbacks.append({"subspace": s, "reason": "no source points", "action": "unadapted"})
            conds.append(None)
            clipped.append(0.0)
            continue
        if not tgt_rows.any():
            counts = np.bincount(source.labels[src_rows], minlength=K)
            priors[s] = counts / counts.sum()
            conds.append(None)
            clipped.append(0.0)
            continue
        prior, cal, cond, clip, failure = _adapt_block(
            sp[src_rows], source.labels[src_rows], tp[tgt_rows], K, kind,
            cfg.min_support, cond_threshold, n_sub == 1)
        if failure is not None:
            log.info("subspace %d: %s; falling back to its source prior", s, failure)
            fallbacks.append({"subspace": s, "reason": failure, "action": "source prior"})
        priors[s] = prior
        calibrated[tgt_rows] = cal
        conds.append(cond)
        clipped.append(clip)

    prior = combine_subspace_priors(priors, weights).probs if n_sub > 1 else priors[0].copy()
    return AdaptationReport(
        method=f"subspace-{kind}",
        prior=prior,
        source_prior=source.prior(),
        classifier_mean=tp.mean(axis=0),
        subspace_priors=priors,
        subspace_weights=weights,
        calibrated=calibrated,
        condition_numbers=conds,
        clipped_mass=clipped,
        fallbacks=fallbacks,
        partition=partition,
    )


def estimate_lambda(subspace_priors, subspace_weights, prior, source_counts, support=None):
    """Per-(subspace, class) conditional-shift factor implied by a report.

    ``lambda[s, y] = P_t(y|s) pi_s / (P_t(y) p_s(s|y))``, the ratio of the
    target to the source probability of landing in subspace ``s`` given class
    ``y``.  Entries without support, or with zero estimated prior, are nan.
    """
    P = np.asarray(subspace_priors, dtype=float)
    w = np.asarray(subspace_weights, dtype=float)
    prior = np.asarray(prior, dtype=float)
    counts = np.asarray(source_counts, dtype=float)
    p_src = np.divide(counts, counts.sum(axis=0), out=np.zeros_like(counts), where=counts.sum(axis=0) > 0)
    num = P * w[:, None]
    den = prior[None, :] * p_src
    ok = den > 0
    if support is not None:
        ok &= np.asarray(support, dtype=bool)
    return np.divide(num, den, out=np.full_like(num, np.nan), where=ok)


def adapt(model, source, target_features, method, config=None, **kw):
    """Dispatch on a method tag from ``METHODS`` (excluding ``none``)."""
    scope, kind = _split_method(method)
    if scope == "global":
        return global_da(model, source, target_features, kind,
                         min_support=(config or PartitionConfig()).min_support, **kw)
    return subspace_da(model, source, target_features, config, kind, **kw)
