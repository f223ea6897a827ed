"""Built-in desk-scale generator specs and shift recipes.

* ``label_shift_spec``: K classes with geometric priors; the rarer half of the
  classes are near-copies of a prevalent "parent" class, so they overlap
  strongly and are rarely argmax-predicted.
* ``subclass_spec``: classes composed of separated subclasses, each living in
  one of a few regions identified by three prominent symptoms plus a block of
  region markers.  Excluding rows by the prominent symptoms reweights
  subclasses, so the class-conditional ratio is constant inside each region.
* ``two_class_spec``: rare/prevalent pair whose overlap is tuned to hit a
  requested hard recall of the rare class.
"""

from math import comb

import numpy as np

from .datagen import ExclusionRule, GeneratorSpec, ShiftSpec

# prominent-symptom patterns (runny nose, sore throat, cough) per region
REGION_PATTERNS = ((1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (0, 1, 1))


def geometric_priors(K, imbalance):
    """Priors proportional to a geometric series; largest/smallest = ``imbalance``."""
    if K == 1:
        return np.ones(1)
    p = float(imbalance) ** (-np.arange(K) / (K - 1))
    return p / p.sum()


def label_shift_spec(num_classes=10, num_features=30, imbalance=100.0, separation=0.8,
                     n_characteristic=4, parent_shift=0.4, n_shifted=6, seed=0):
    g = np.random.default_rng(seed)
    K, F = num_classes, num_features
    base = g.uniform(0.05, 0.25, F)
    half = (K + 1) // 2
    params = []
    for y in range(K):
        if y < half:
            p = base.copy()
            ch = g.choice(F, n_characteristic, replace=False)
            p[ch] = np.minimum(p[ch] + separation * g.uniform(0.6, 1.0, n_characteristic), 0.95)
        else:
            p = params[y - half].copy()
            ch = g.choice(F, n_shifted, replace=False)
            p[ch] = np.where(p[ch] < 0.5, p[ch] + parent_shift, p[ch] - parent_shift)
        params.append(p)
    return GeneratorSpec(K, geometric_priors(K, imbalance), tuple(((1.0, p),) for p in params))


def subclass_spec(num_classes=8, imbalance=10.0, regions_per_class=3, n_condition=12,
                  n_characteristic=3, characteristic_p=0.55, marker_p=0.8, seed=0):
    """Returns ``(spec, regions)`` where ``regions[y]`` lists class y's subclass regions."""
    g = np.random.default_rng(seed)
    R = len(REGION_PATTERNS)
    F = 3 + 3 * R + n_condition
    cond0 = 3 + 3 * R
    subs, regions = [], []
    for y in range(num_classes):
        regs = sorted(int(r) for r in g.choice(R, regions_per_class, replace=False))
        ch = g.choice(n_condition, n_characteristic, replace=False)
        w = g.dirichlet(np.full(len(regs), 3.0))
        cls = []
        for r, wr in zip(regs, w):
            p = np.full(F, 0.05)
            p[:3] = REGION_PATTERNS[r]
            p[3 + 3 * r:6 + 3 * r] = marker_p
            p[cond0:] = 0.1
            p[cond0 + ch] = characteristic_p
            cls.append((float(wr), p))
        subs.append(tuple(cls))
        regions.append(regs)
    groups = (tuple(range(3)), tuple(range(3, cond0)), tuple(range(cond0, F)))
    spec = GeneratorSpec(num_classes, geometric_priors(num_classes, imbalance), tuple(subs), groups)
    return spec, regions


def conditional_shift(spec, regions, seed, balance=2.0, light=(0.0, 0.3), heavy=(0.6, 0.9)):
    """Keep ratios that make the source roughly balanced (largest/smallest
    about ``balance``) plus per-class exclusion by prominent-symptom pattern.

    One randomly chosen region per class is excluded heavily, the others
    lightly, so every class sees a clear change in its subclass mix.
    """
    g = np.random.default_rng([seed, 0xC5])
    pri = spec.class_priors
    keep = pri.min() / pri * g.uniform(1.0, balance, len(pri))
    keep = keep / keep.max()
    table = {}
    for y in range(spec.num_classes):
        regs = regions[y]
        hit = regs[int(g.integers(len(regs)))]
        table[y] = {REGION_PATTERNS[r]: float(g.uniform(*(heavy if r == hit else light))) for r in regs}
    return ShiftSpec(keep, (ExclusionRule((0, 1, 2), table),))


def subclass_reweight_shift(spec, seed, concentration=1.0):
    """Fresh Dirichlet subclass weights per class (a pure conditional shift)."""
    g = np.random.default_rng([seed, 0x5B])
    return tuple(tuple(g.dirichlet(np.full(len(c), concentration))) for c in spec.subclasses)


# --- two-class overlap control ---------------------------------------------

def _binom_pmf(F, q):
    k = np.arange(F + 1)
    return np.array([comb(F, int(i)) for i in k], dtype=float) * q ** k * (1 - q) ** (F - k)


def hard_recall(p, q0, q1, F):
    """Fraction of rare-class rows whose Bayes posterior exceeds 1/2.

    Both classes share one Bernoulli parameter across all F features, so the
    count of active features is sufficient.
    """
    b1, b0 = _binom_pmf(F, q1), _binom_pmf(F, q0)
    post = p * b1 / (p * b1 + (1 - p) * b0)
    return float(b1[post > 0.5].sum())


def two_class_spec(p, eps, num_features=20, q0=0.2, grid=4000):
    """Rare prior ``p`` with overlap chosen so the rare-class hard recall is
    as close to ``eps`` as the discrete posterior allows.

    Returns ``(spec, achieved_eps)``.
    """
    if eps >= 1.0:
        probs = (np.zeros(num_features), np.ones(num_features))
        achieved = 1.0
    else:
        qs = np.linspace(q0 + 1e-3, 0.999, grid)
        rec = np.array([hard_recall(p, q0, q, num_features) for q in qs])
        i = int(np.argmin(np.abs(rec - eps)))
        probs = (np.full(num_features, q0), np.full(num_features, qs[i]))
        achieved = float(rec[i])
    spec = GeneratorSpec(2, [1 - p, p], (((1.0, probs[0]),), ((1.0, probs[1]),)))
    return spec, achieved
