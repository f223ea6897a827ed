"""Prior-ratio recalibration of source-trained predictions."""

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class CalibrationMap:
    source_prior: np.ndarray
    target_prior: np.ndarray
    ratios: np.ndarray
    masked: np.ndarray  # classes with zero source prior; their ratio is 0


def build_map(p_source, p_target, warn=True):
    ps = np.asarray(getattr(p_source, "probs", p_source), dtype=float)
    pt = np.asarray(getattr(p_target, "probs", p_target), dtype=float)
    if ps.shape != pt.shape:
        raise ValueError(f"prior length mismatch: {ps.shape} vs {pt.shape}")
    masked = ps <= 0
    ratios = np.divide(pt, ps, out=np.zeros_like(pt), where=~masked)
    if masked.any() and warn:
        log.warning("classes with zero source prior masked: %s", np.flatnonzero(masked).tolist())
    return CalibrationMap(ps, pt, ratios, masked)


def recalibrate(preds, cmap, return_fallbacks=False):
    """Scale each row by the class ratios and renormalize.

    Rows left with no mass become uniform over the unmasked classes.
    """
    preds = np.asarray(preds, dtype=float)
    if preds.ndim != 2 or preds.shape[1] != len(cmap.ratios):
        raise ValueError(f"predictions have shape {preds.shape}, map has {len(cmap.ratios)} classes")
    out = preds * cmap.ratios
    mass = out.sum(axis=1, keepdims=True)
    dead = mass[:, 0] <= 0
    out = np.divide(out, mass, out=np.zeros_like(out), where=mass > 0)
    if dead.any():
        live = ~cmap.masked
        fill = live / live.sum() if live.any() else np.full(len(live), 1.0 / len(live))
        out[dead] = fill
        log.warning("%d rows had zero mass after reweighting", int(dead.sum()))
    if return_fallbacks:
        return out, int(dead.sum())
    return out


def top_k(preds, k):
    """Indices of the ``k`` largest entries per row, descending; ties to the lowest index."""
    preds = np.asarray(preds, dtype=float)
    K = preds.shape[1]
    if not 1 <= k <= K:
        raise ValueError(f"k must lie in 1..{K}, got {k}")
    return np.argsort(-preds, axis=1, kind="stable")[:, :k]
