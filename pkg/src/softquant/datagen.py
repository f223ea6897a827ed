"""Synthetic imbalanced, overlapping tabular data with known ground truth.

Labels are drawn from class priors, a subclass is drawn from the class's
mixture, then every binary feature is an independent Bernoulli draw.  The
shift protocols (per-class keep ratios, symptom-weighted exclusion, subclass
reweighting) operate on datasets or specs and keep the ground truth
recoverable for evaluation.
"""

import csv
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng

log = logging.getLogger(__name__)

AGE_MIN = 18.0
AGE_MAX = 100.0

# stream ids for the counter-based generator
_STREAM_LABEL_SHIFT = 0x51
_STREAM_COND_SHIFT = 0x52
_STREAM_SPLIT = 0x53


class SpecError(ValueError):
    """Invalid generator/shift spec; ``field`` names the offending entry."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class EmptyDatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Subclass:
    weight: float
    probs: np.ndarray  # per-feature Bernoulli parameters, length F


@dataclass(frozen=True)
class GeneratorSpec:
    """Ground-truth generative model.

    ``age`` is optional: per class, one ``(mean, std)`` pair per subclass for
    a single numeric column appended after the binary features and min-max
    scaled from [AGE_MIN, AGE_MAX] to [0, 1].
    """

    num_classes: int
    class_priors: np.ndarray
    subclasses: tuple  # tuple[tuple[Subclass, ...], ...], one entry per class
    feature_groups: tuple = None  # disjoint cover of 0..F-1; default: one group
    stream: int = 0
    age: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "class_priors", np.asarray(self.class_priors, dtype=float))
        subs = tuple(
            tuple(
                Subclass(float(s.weight), np.asarray(s.probs, dtype=float))
                if isinstance(s, Subclass)
                else Subclass(float(s[0]), np.asarray(s[1], dtype=float))
                for s in cls
            )
            for cls in self.subclasses
        )
        object.__setattr__(self, "subclasses", subs)
        if self.feature_groups is None and subs and subs[0]:
            object.__setattr__(
                self, "feature_groups", (tuple(range(len(subs[0][0].probs))),)
            )
        else:
            object.__setattr__(
                self, "feature_groups", tuple(tuple(int(i) for i in g) for g in self.feature_groups)
            )
        self.validate()

    @property
    def num_features(self):
        return len(self.subclasses[0][0].probs)

    @property
    def has_age(self):
        return self.age is not None

    def validate(self):
        K = self.num_classes
        if not isinstance(K, (int, np.integer)) or K < 1:
            raise SpecError("num_classes", f"must be a positive integer, got {K!r}")
        p = self.class_priors
        if p.shape != (K,):
            raise SpecError("class_priors", f"expected length {K}, got shape {p.shape}")
        if np.any(p < 0) or not np.isclose(p.sum(), 1.0, atol=1e-9):
            raise SpecError("class_priors", "must be non-negative and sum to 1")
        if len(self.subclasses) != K:
            raise SpecError("subclasses", f"expected {K} classes, got {len(self.subclasses)}")
        F = None
        for y, cls in enumerate(self.subclasses):
            if not cls:
                raise SpecError(f"subclasses[{y}]", "needs at least one subclass")
            w = np.array([s.weight for s in cls])
            if np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-9):
                raise SpecError(f"subclasses[{y}]", "mixture weights must be non-negative and sum to 1")
            for j, s in enumerate(cls):
                if s.probs.ndim != 1:
                    raise SpecError(f"subclasses[{y}][{j}]", "probs must be a vector")
                if F is None:
                    F = len(s.probs)
                if len(s.probs) != F:
                    raise SpecError(f"subclasses[{y}][{j}]", f"expected {F} features, got {len(s.probs)}")
                if np.any(~np.isfinite(s.probs)) or np.any(s.probs < 0) or np.any(s.probs > 1):
                    raise SpecError(f"subclasses[{y}][{j}]", "Bernoulli parameters must lie in [0, 1]")
        flat = sorted(i for g in self.feature_groups for i in g)
        if flat != list(range(F)):
            raise SpecError("feature_groups", f"must be a disjoint cover of 0..{F - 1}")
        if self.age is not None:
            if len(self.age) != K or any(len(a) != len(c) for a, c in zip(self.age, self.subclasses)):
                raise SpecError("age", "needs one (mean, std) pair per subclass")
            if any(sd < 0 for a in self.age for _, sd in a):
                raise SpecError("age", "std must be non-negative")

    def param_table(self):
        """Stacked subclass parameters plus the (class, subclass) owning each row."""
        probs, owner = [], []
        for y, cls in enumerate(self.subclasses):
            for j, s in enumerate(cls):
                probs.append(s.probs)
                owner.append((y, j))
        return np.vstack(probs), owner

    def to_dict(self):
        d = {
            "num_classes": int(self.num_classes),
            "class_priors": self.class_priors.tolist(),
            "subclasses": [
                [{"weight": s.weight, "probs": s.probs.tolist()} for s in cls]
                for cls in self.subclasses
            ],
            "feature_groups": [list(g) for g in self.feature_groups],
            "stream": int(self.stream),
        }
        if self.age is not None:
            d["age"] = [[list(a) for a in cls] for cls in self.age]
        return d

    @classmethod
    def from_dict(cls, d):
        try:
            subs = tuple(
                tuple(Subclass(s["weight"], s["probs"]) for s in c) for c in d["subclasses"]
            )
            age = d.get("age")
            return cls(
                num_classes=int(d["num_classes"]),
                class_priors=d["class_priors"],
                subclasses=subs,
                feature_groups=d.get("feature_groups"),
                stream=int(d.get("stream", 0)),
                age=None if age is None else tuple(tuple(tuple(a) for a in c) for c in age),
            )
        except KeyError as e:
            raise SpecError(str(e.args[0]), "missing field") from None


@dataclass(frozen=True)
class ExclusionRule:
    """Per-class exclusion probability as a function of a few binary features.

    ``table[y]`` maps a tuple of feature values (in ``features`` order) to an
    exclusion probability; missing patterns and classes exclude nothing.
    """

    features: tuple
    table: dict

    def __post_init__(self):
        object.__setattr__(self, "features", tuple(int(f) for f in self.features))
        table = {
            int(y): {tuple(int(v) for v in k): float(w) for k, w in pats.items()}
            for y, pats in self.table.items()
        }
        object.__setattr__(self, "table", table)
        for y, pats in table.items():
            for k, w in pats.items():
                if len(k) != len(self.features):
                    raise SpecError("conditional_exclusion", f"pattern {k} does not match features {self.features}")
                if not 0.0 <= w <= 1.0:
                    raise SpecError("conditional_exclusion", f"weight {w} for class {y}, pattern {k} outside [0, 1]")

    def weights(self, features, labels):
        sub = features[:, list(self.features)].astype(np.int64)
        codes = sub @ (1 << np.arange(len(self.features) - 1, -1, -1))
        out = np.zeros(len(labels))
        for y, pats in self.table.items():
            lut = np.zeros(1 << len(self.features))
            for k, w in pats.items():
                lut[int("".join(map(str, k)), 2)] = w
            rows = labels == y
            out[rows] = lut[codes[rows]]
        return out

    def to_dict(self):
        return {
            "features": list(self.features),
            "table": {
                str(y): {"".join(map(str, k)): w for k, w in sorted(pats.items())}
                for y, pats in sorted(self.table.items())
            },
        }

    @classmethod
    def from_dict(cls, d):
        table = {int(y): {tuple(int(c) for c in k): w for k, w in pats.items()} for y, pats in d["table"].items()}
        return cls(d["features"], table)


@dataclass(frozen=True)
class ShiftSpec:
    keep_ratios: np.ndarray = None
    conditional_exclusion: tuple = ()
    subclass_reweights: tuple = None

    def __post_init__(self):
        if self.keep_ratios is not None:
            kr = np.asarray(self.keep_ratios, dtype=float)
            if np.any(~np.isfinite(kr)) or np.any(kr < 0) or np.any(kr > 1):
                raise SpecError("keep_ratios", "values must lie in [0, 1]")
            object.__setattr__(self, "keep_ratios", kr)
        rules = tuple(r if isinstance(r, ExclusionRule) else ExclusionRule.from_dict(r)
                      for r in self.conditional_exclusion)
        object.__setattr__(self, "conditional_exclusion", rules)
        if self.subclass_reweights is not None:
            rw = tuple(tuple(float(w) for w in c) for c in self.subclass_reweights)
            for y, c in enumerate(rw):
                if any(w < 0 or w > 1 for w in c) or not np.isclose(sum(c), 1.0, atol=1e-9):
                    raise SpecError(f"subclass_reweights[{y}]", "weights must lie in [0, 1] and sum to 1")
            object.__setattr__(self, "subclass_reweights", rw)

    def to_dict(self):
        return {
            "keep_ratios": None if self.keep_ratios is None else self.keep_ratios.tolist(),
            "conditional_exclusion": [r.to_dict() for r in self.conditional_exclusion],
            "subclass_reweights": None if self.subclass_reweights is None
            else [list(c) for c in self.subclass_reweights],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            keep_ratios=d.get("keep_ratios"),
            conditional_exclusion=tuple(d.get("conditional_exclusion") or ()),
            subclass_reweights=d.get("subclass_reweights"),
        )


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    subclasses: np.ndarray = None
    num_binary: int = None
    num_classes: int = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.num_binary is None:
            self.num_binary = self.features.shape[1]
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be n x F with one label per row")
        if len(self.labels) == 0:
            raise EmptyDatasetError("dataset has no rows")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in 0..{self.num_classes - 1}")

    def __len__(self):
        return len(self.labels)

    def subset(self, mask):
        return LabeledDataset(
            self.features[mask],
            self.labels[mask],
            None if self.subclasses is None else self.subclasses[mask],
            self.num_binary,
            self.num_classes,
        )

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def prior(self):
        c = self.class_counts()
        return c / c.sum()


def sample_dataset(spec, n, seed):
    """Draw ``n`` i.i.d. rows from ``spec``; row ``i`` depends only on (seed, stream, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    spec.validate()
    F = spec.num_features
    table, owner = spec.param_table()
    offsets = np.cumsum([0] + [len(c) for c in spec.subclasses])

    u = rng.uniforms(seed, spec.stream, np.arange(n), F + 4)
    cum = np.cumsum(spec.class_priors)
    labels = np.minimum(np.searchsorted(cum, u[:, 0] * cum[-1], side="right"), spec.num_classes - 1)

    sub = np.zeros(n, dtype=np.int64)
    for y, cls in enumerate(spec.subclasses):
        rows = labels == y
        if len(cls) > 1 and rows.any():
            cw = np.cumsum([s.weight for s in cls])
            sub[rows] = np.minimum(np.searchsorted(cw, u[rows, 1] * cw[-1], side="right"), len(cls) - 1)
    flat = offsets[labels] + sub
    X = (u[:, 2:2 + F] < table[flat]).astype(float)

    if spec.has_age:
        mean = np.array([spec.age[y][j][0] for y, j in owner])[flat]
        std = np.array([spec.age[y][j][1] for y, j in owner])[flat]
        # Box-Muller; 1 - u keeps the log argument in (0, 1]
        z = np.sqrt(-2.0 * np.log(1.0 - u[:, F + 2])) * np.cos(2.0 * np.pi * u[:, F + 3])
        age = np.clip((mean + std * z - AGE_MIN) / (AGE_MAX - AGE_MIN), 0.0, 1.0)
        X = np.column_stack([X, age])

    return LabeledDataset(X, labels, sub, F, spec.num_classes)


def _survivors(ds, mask, what):
    if not mask.any():
        raise EmptyDatasetError(f"empty shifted dataset ({what})")
    return ds.subset(mask)


def apply_label_shift(ds, keep_ratios, seed):
    """Keep each row of class ``y`` independently with probability ``keep_ratios[y]``."""
    keep = np.asarray(keep_ratios, dtype=float)
    if keep.shape != (ds.num_classes,):
        raise SpecError("keep_ratios", f"expected length {ds.num_classes}, got {keep.shape}")
    if np.any(keep < 0) or np.any(keep > 1):
        raise SpecError("keep_ratios", "values must lie in [0, 1]")
    u = rng.row_uniforms(seed, _STREAM_LABEL_SHIFT, len(ds))
    return _survivors(ds, u < keep[ds.labels], "label shift")


def exclusion_probability(ds, shift):
    """Per-row exclusion probability of the conditional rules in ``shift``."""
    survive = np.ones(len(ds))
    for rule in shift.conditional_exclusion:
        if max(rule.features) >= ds.num_binary:
            raise SpecError("conditional_exclusion", f"feature index {max(rule.features)} >= {ds.num_binary}")
        survive *= 1.0 - rule.weights(ds.features, ds.labels)
    return 1.0 - survive


def apply_conditional_shift(ds, spec, seed):
    """Exclude rows with their class's feature-dependent probability.

    Several rules act as independent exclusions; one uniform per row decides.
    """
    p = exclusion_probability(ds, spec)
    u = rng.row_uniforms(seed, _STREAM_COND_SHIFT, len(ds))
    return _survivors(ds, u >= p, "conditional shift")


def apply_shift(ds, shift, seed):
    """Keep ratios first, then conditional exclusion."""
    if shift.keep_ratios is not None:
        ds = apply_label_shift(ds, shift.keep_ratios, seed)
    if shift.conditional_exclusion:
        ds = apply_conditional_shift(ds, shift, seed)
    return ds


def apply_subclass_reweight(spec, new_weights):
    if len(new_weights) != spec.num_classes:
        raise SpecError("subclass_reweights", f"expected {spec.num_classes} classes, got {len(new_weights)}")
    subs = []
    for y, (cls, w) in enumerate(zip(spec.subclasses, new_weights)):
        w = [float(v) for v in w]
        if len(w) != len(cls):
            raise SpecError(f"subclass_reweights[{y}]", f"expected {len(cls)} weights, got {len(w)}")
        if any(v < 0 for v in w) or not np.isclose(sum(w), 1.0, atol=1e-9):
            raise SpecError(f"subclass_reweights[{y}]", "weights must be non-negative and sum to 1")
        subs.append(tuple(Subclass(v, s.probs) for v, s in zip(w, cls)))
    return replace(spec, subclasses=tuple(subs))


def split(ds, fraction, seed):
    """Random split; returns ``(rest, part)`` with ``part`` holding ~fraction of rows."""
    u = rng.row_uniforms(seed, _STREAM_SPLIT, len(ds))
    part = u < fraction
    return _survivors(ds, ~part, "split"), _survivors(ds, part, "split")


def log_likelihood(spec, features):
    """``log p(x | y)`` over the binary features, shape ``(n, K)``.

    The optional numeric column is ignored.
    """
    X = np.asarray(features, dtype=float)[:, :spec.num_features]
    out = np.empty((len(X), spec.num_classes))
    with np.errstate(divide="ignore"):
        for y, cls in enumerate(spec.subclasses):
            terms = []
            for s in cls:
                lp, lq = np.log(s.probs), np.log1p(-s.probs)
                # 0 * log(0) terms must vanish, not turn into nan
                ll = np.where(X > 0, lp, 0.0).sum(1) + np.where(X > 0, 0.0, lq).sum(1)
                terms.append(np.log(s.weight) + ll)
            terms = np.column_stack(terms)
            m = terms.max(axis=1, keepdims=True)
            safe = np.where(np.isfinite(m), m, 0.0)
            out[:, y] = (safe + np.log(np.exp(terms - safe).sum(1, keepdims=True)))[:, 0]
    return out


def bayes_posterior(spec, features, priors=None):
    """Exact ``p(y | x)`` under ``spec`` (optionally with replaced priors)."""
    priors = spec.class_priors if priors is None else np.asarray(priors, dtype=float)
    with np.errstate(divide="ignore"):
        lj = log_likelihood(spec, features) + np.log(priors)
    m = lj.max(axis=1, keepdims=True)
    e = np.exp(lj - m)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class RatioEntry:
    subspace: int
    label: int
    status: str  # "ok" | "unsupported"
    min_ratio: float = float("nan")
    max_ratio: float = float("nan")
    spread: float = float("nan")
    flagged: bool = False


@dataclass
class RatioReport:
    tolerance: float
    entries: list = field(default_factory=list)

    @property
    def flagged_subspaces(self):
        return sorted({e.subspace for e in self.entries if e.flagged})

    def max_spread(self):
        s = [e.spread for e in self.entries if e.status == "ok"]
        return max(s) if s else 0.0


def verify_ratio_condition(source_spec, target_spec, partition, tolerance, n_grid=20000, seed=0):
    """Check that ``p_t(x|y) / p_s(x|y)`` is constant inside every subspace.

    Grid points are drawn from both specs and assigned with ``partition``
    (anything with an ``assign(features)`` method).  Per (subspace, class) the
    spread is ``max/min - 1`` of the ratio over grid points where the source
    density is positive.
    """
    if source_spec.num_classes != target_spec.num_classes or source_spec.num_features != target_spec.num_features:
        raise SpecError("target_spec", "source and target specs must share K and F")
    half = max(n_grid // 2, 1)
    grid = np.vstack([
        sample_dataset(source_spec, half, seed).features,
        sample_dataset(target_spec, half, seed + 1).features,
    ])
    grid = np.unique(grid, axis=0)
    sigma = np.asarray(partition.assign(grid))
    n_sub = int(getattr(partition, "n_subspaces", sigma.max() + 1))
    ls = log_likelihood(source_spec, grid)
    lt = log_likelihood(target_spec, grid)

    report = RatioReport(tolerance)
    for s in range(n_sub):
        in_s = sigma == s
        for y in range(source_spec.num_classes):
            src_pos = in_s & np.isfinite(ls[:, y])
            tgt_pos = in_s & np.isfinite(lt[:, y])
            if not src_pos.any():
                report.entries.append(RatioEntry(s, y, "unsupported", flagged=False))
                continue
            if (tgt_pos & ~src_pos).any():
                # target mass where the source has none: no finite constant works
                report.entries.append(RatioEntry(s, y, "ok", 0.0, np.inf, np.inf, True))
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.exp(lt[src_pos, y] - ls[src_pos, y])
            lo, hi = float(r.min()), float(r.max())
            if hi == 0.0:
                spread = 0.0
            elif lo == 0.0:
                spread = np.inf
            else:
                spread = hi / lo - 1.0
            report.entries.append(RatioEntry(s, y, "ok", lo, hi, spread, spread > tolerance))
    return report


def conditional_ratio(spec, shift, assign, n_subspaces, n=200_000, seed=0):
    """Ground-truth ``p_t(s|y) / p_s(s|y)`` per (subspace, class).

    The target follows ``spec``; the source is ``spec`` after the conditional
    exclusion rules of ``shift`` (keep ratios do not change ``p(x|y)``).  The
    expectation is taken over a sample from ``spec`` using the exact survival
    probabilities.  Cells with no sampled mass are nan.
    """
    ds = sample_dataset(spec, n, seed)
    survive = 1.0 - exclusion_probability(ds, shift)
    sigma = np.asarray(assign(ds.features))
    K = spec.num_classes
    hits = np.zeros((n_subspaces, K))
    kept = np.zeros((n_subspaces, K))
    np.add.at(hits, (sigma, ds.labels), 1.0)
    np.add.at(kept, (sigma, ds.labels), survive)
    p_t = hits / np.maximum(hits.sum(axis=0), 1)
    p_s = kept / np.maximum(kept.sum(axis=0), 1e-300)
    return np.divide(p_t, p_s, out=np.full_like(p_t, np.nan), where=(p_s > 0) & (hits > 0))


# --- serialization -------------------------------------------------------

def save_csv(ds, path):
    F = ds.features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{i}" for i in range(F)] + ["label"])
        binary = ds.num_binary
        for x, y in zip(ds.features, ds.labels):
            row = [str(int(v)) for v in x[:binary]] + [repr(float(v)) for v in x[binary:]]
            w.writerow(row + [str(int(y))])


def load_csv(path, num_classes=None, num_binary=None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1] != "label":
            raise ValueError(f"{path}: line 1: header must end with 'label'")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[:-1]])
                labels.append(int(row[-1]))
            except ValueError as e:
                raise ValueError(f"{path}: line {lineno}: {e}") from None
    if not rows:
        raise EmptyDatasetError(f"{path}: no data rows")
    X = np.array(rows)
    if num_binary is None:
        is_bin = np.all((X == 0) | (X == 1), axis=0)
        num_binary = int(np.argmin(is_bin)) if not is_bin.all() else X.shape[1]
    return LabeledDataset(X, np.array(labels), None, num_binary, num_classes)


def save_sidecar(path, spec=None, shift=None, **truth):
    payload = {"generator": None if spec is None else spec.to_dict(),
               "shift": None if shift is None else shift.to_dict()}
    for k, v in truth.items():
        payload[k] = v.tolist() if isinstance(v, np.ndarray) else v
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
