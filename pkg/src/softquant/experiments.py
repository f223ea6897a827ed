"""Multi-seed experiment pipelines: label shift, label + conditional shift,
and the soft-vs-hard noise-scaling sweep."""

import logging
import os
from dataclasses import dataclass, field, replace
from itertools import pairwise

import numpy as np

from . import datagen, scenarios
from .adapt import METHODS, adapt
from .classifier import Hyperparams, predict_proba, train
from .metrics import evaluate
from .partition import PartitionConfig
from .quantify import QuantificationError, quantify
from .serialize import read_json, write_json, write_table

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, seed, cause):
        super().__init__(f"stage '{stage}' failed for seed {seed}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class ExperimentConfig:
    generator: object = None  # path, inline dict, or None for the built-in scenario
    scenario: dict = field(default_factory=dict)  # kwargs for the built-in scenario
    shift: object = None  # path, inline dict, or None for the built-in recipe
    shift_enabled: bool = True
    classifier: dict = field(default_factory=dict)
    partition: dict = field(default_factory=dict)
    methods: list = None
    seeds: list = field(default_factory=lambda: list(range(20)))
    n_source: int = None
    n_target: int = None
    keep_range: tuple = (0.2, 1.0)
    keep_override: object = None  # scalar or per-class list replacing the drawn keep ratios
    noise: dict = field(default_factory=dict)
    out: str = None

    @classmethod
    def from_dict(cls, d, base_dir="."):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        for key in ("generator", "shift"):
            v = getattr(cfg, key)
            if isinstance(v, str):
                path = v if os.path.isabs(v) else os.path.join(base_dir, v)
                if not os.path.exists(path):
                    raise ConfigError(f"{key}: file not found: {v}")
                setattr(cfg, key, read_json(path))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        return cls.from_dict(read_json(path), os.path.dirname(os.path.abspath(path)))

    def validate(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.methods is not None:
            bad = set(self.methods) - set(METHODS)
            if bad:
                raise ConfigError(f"unknown methods {sorted(bad)}; allowed: {list(METHODS)}")
        lo, hi = self.keep_range
        if not 0 <= lo <= hi <= 1:
            raise ConfigError("keep_range must satisfy 0 <= lo <= hi <= 1")
        try:
            self.hyperparams()
            self.partition_config()
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def hyperparams(self, default=None):
        d = dict(default or {})
        d.update(self.classifier)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return Hyperparams(**d)

    def partition_config(self):
        return PartitionConfig(**self.partition)


LABEL_SHIFT_CLASSIFIER = {"hidden": (32,), "epochs": 10, "batch_size": 256, "learning_rate": 0.2}
COND_SHIFT_CLASSIFIER = {"hidden": (64,), "epochs": 10, "batch_size": 256, "learning_rate": 0.2}


def _keep_ratios(cfg, K, seed):
    if cfg.keep_override is not None:
        return np.broadcast_to(np.asarray(cfg.keep_override, dtype=float), (K,)).copy()
    lo, hi = cfg.keep_range
    return np.random.default_rng([seed, 0x4B]).uniform(lo, hi, K)


def _run_methods(methods, model, source, target, part_cfg, seed, source_preds, target_preds):
    actual = target.prior()
    src_prior = source.prior()
    reports = {}
    for method in methods:
        if method == "none":
            rep = evaluate("none", target_preds.mean(axis=0) / target_preds.mean(axis=0).sum(),
                           actual, src_prior, target_preds, target.labels, seed)
            reports[method] = rep
            continue
        try:
            ar = adapt(model, source, target.features, method, replace(part_cfg, seed=seed),
                       source_preds=source_preds, target_preds=target_preds)
        except QuantificationError as e:
            # no adaptation: source prior as the estimate, raw predictions kept
            rep = evaluate(method, src_prior, actual, src_prior, target_preds, target.labels, seed)
            rep.status = "failed"
            rep.detail = {"error": str(e)}
            reports[method] = rep
            continue
        rep = evaluate(method, ar.prior, actual, src_prior, ar.calibrated, target.labels, seed)
        rep.detail = {
            "fallbacks": ar.fallbacks,
            "n_subspaces": len(ar.subspace_weights),
            "condition_numbers": ar.condition_numbers,
            "clipped_mass": ar.clipped_mass,
            "subspace_priors": ar.subspace_priors,
            "subspace_weights": ar.subspace_weights,
        }
        if ar.partition is not None:
            rep.detail["partition"] = ar.partition.to_dict()
        reports[method] = rep
    return reports


def _stage(name, seed, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except (QuantificationError, ConfigError):
        raise
    except Exception as e:
        raise StageError(name, seed, e) from e


def label_shift_seed(cfg, seed):
    """One run of the label-shift protocol; returns {method: EvalReport}."""
    spec = (datagen.GeneratorSpec.from_dict(cfg.generator) if cfg.generator
            else scenarios.label_shift_spec(**cfg.scenario))
    n_s = cfg.n_source or 100_000
    n_t = cfg.n_target or 20_000
    pool = _stage("generate", seed, datagen.sample_dataset, spec, n_s + n_t, seed)
    source, target = _stage("split", seed, datagen.split, pool, n_t / (n_s + n_t), seed)
    if cfg.shift_enabled:
        if cfg.shift:
            shift = datagen.ShiftSpec.from_dict(cfg.shift)
            source = _stage("shift", seed, datagen.apply_shift, source, shift, seed)
        else:
            keep = _keep_ratios(cfg, spec.num_classes, seed)
            source = _stage("shift", seed, datagen.apply_label_shift, source, keep, seed)
    model = _stage("train", seed, train, source, cfg.hyperparams(LABEL_SHIFT_CLASSIFIER), seed)
    sp = predict_proba(model, source.features)
    tp = predict_proba(model, target.features)
    methods = cfg.methods or ["none", "global-hard", "global-soft"]
    return _stage("adapt", seed, _run_methods, methods, model, source, target,
                  cfg.partition_config(), seed, sp, tp)


def conditional_shift_seed(cfg, seed):
    """One run of the label + conditional shift protocol, with an oracle
    classifier trained on an independent labeled target sample."""
    if cfg.generator:
        spec = datagen.GeneratorSpec.from_dict(cfg.generator)
        regions = None
    else:
        spec, regions = scenarios.subclass_spec(**cfg.scenario)
    n_s = cfg.n_source or 70_000
    n_t = cfg.n_target or 30_000
    pool = _stage("generate", seed, datagen.sample_dataset, spec, n_s + n_t, seed)
    source, target = _stage("split", seed, datagen.split, pool, n_t / (n_s + n_t), seed)
    if cfg.shift_enabled:
        if cfg.shift:
            shift = datagen.ShiftSpec.from_dict(cfg.shift)
        elif regions is not None:
            shift = scenarios.conditional_shift(spec, regions, seed)
        else:
            raise ConfigError("a custom generator needs an explicit shift spec")
        source = _stage("shift", seed, datagen.apply_shift, source, shift, seed)
    hp = cfg.hyperparams(COND_SHIFT_CLASSIFIER)
    model = _stage("train", seed, train, source, hp, seed)
    sp = predict_proba(model, source.features)
    tp = predict_proba(model, target.features)
    methods = cfg.methods or ["none", "global-hard", "global-soft", "subspace-soft"]
    reports = _stage("adapt", seed, _run_methods, methods, model, source, target,
                     cfg.partition_config(), seed, sp, tp)

    labeled = datagen.sample_dataset(replace(spec, stream=spec.stream + 1), n_t, seed)
    oracle = _stage("oracle", seed, train, labeled, hp, seed + 1)
    op = predict_proba(oracle, target.features)
    rep = evaluate("oracle", op.mean(axis=0) / op.mean(axis=0).sum(), target.prior(), source.prior(),
                   op, target.labels, seed)
    reports["oracle"] = rep
    return reports


def summarize(per_seed):
    """Median score / Top1 / Top3 per method plus failure counts."""
    methods = list(per_seed[0])
    out = {}
    for m in methods:
        reps = [r[m] for r in per_seed]

        def col(a, reps=reps):
            return [getattr(r, a) for r in reps if getattr(r, a) is not None]

        out[m] = {
            "median_score": float(np.median(col("score"))),
            "median_top1": float(np.median(col("top1"))) if col("top1") else None,
            "median_top3": float(np.median(col("top3"))) if col("top3") else None,
            "failures": sum(r.status != "ok" for r in reps),
            "runs": len(reps),
        }
    return out


def _write_outputs(out_dir, name, cfg, per_seed, summary):
    d = os.path.join(out_dir, name)
    os.makedirs(d, exist_ok=True)
    for seed, reps in zip(cfg.seeds, per_seed):
        write_json(os.path.join(d, f"seed_{seed}.json"), {m: r.to_dict() for m, r in reps.items()})
        methods = [m for m in reps if m != "oracle"]
        K = len(reps[methods[0]].actual_ratio)
        rows = [[y, reps[methods[0]].actual_ratio[y]] + [reps[m].estimated_ratio[y] for m in methods]
                for y in range(K)]
        write_table(os.path.join(d, f"ratios_seed_{seed}.csv"), ["class", "actual"] + methods, rows)
    write_json(os.path.join(d, "summary.json"), summary)
    rows = [[m, s["median_score"], s["median_top1"], s["median_top3"], s["failures"]] for m, s in summary.items()]
    write_table(os.path.join(d, "summary.csv"), ["method", "median_score", "median_top1", "median_top3", "failures"], rows)


def run_label_shift(cfg):
    per_seed = [label_shift_seed(cfg, s) for s in cfg.seeds]
    summary = summarize(per_seed)
    if cfg.out:
        _write_outputs(cfg.out, "label_shift", cfg, per_seed, summary)
    return per_seed, summary


def run_conditional_shift(cfg):
    per_seed = [conditional_shift_seed(cfg, s) for s in cfg.seeds]
    summary = summarize(per_seed)
    if cfg.out:
        _write_outputs(cfg.out, "conditional_shift", cfg, per_seed, summary)
    return per_seed, summary


# --- noise scaling ----------------------------------------------------------

def _resample_estimates(spec, n_source, n_target, resamples, seed):
    """Rare-class prior estimates from the hard and soft routes over
    independent source/target resamples, using the exact Bayes posterior as
    the classifier."""
    hard, soft = [], []
    for r in range(resamples):
        src = datagen.sample_dataset(spec, n_source, seed * 1_000_003 + 2 * r)
        tgt = datagen.sample_dataset(spec, n_target, seed * 1_000_003 + 2 * r + 1)
        ps = datagen.bayes_posterior(spec, src.features)
        pt = datagen.bayes_posterior(spec, tgt.features)
        for method, acc in (("hard", hard), ("soft", soft)):
            try:
                acc.append(quantify(ps, src.labels, pt, 2, method).raw_solution[1])
            except QuantificationError:
                acc.append(np.nan)
    return np.array(hard), np.array(soft)


def noise_setting(p, eps, n_source=20_000, n_target=20_000, resamples=200, num_features=20, q0=0.2, seed=0):
    spec, achieved = scenarios.two_class_spec(p, eps, num_features, q0)
    if achieved == 0.0:
        return {"p": p, "eps": eps, "achieved_eps": 0.0, "status": "excluded (hard confusion singular)"}
    hard, soft = _resample_estimates(spec, n_source, n_target, resamples, seed)
    ok = np.isfinite(hard)
    sd_h = float(np.std(hard[ok])) if ok.sum() > 1 else float("nan")
    sd_s = float(np.std(soft))
    return {
        "p": p,
        "eps": eps,
        "achieved_eps": achieved,
        "status": "ok",
        "std_hard": sd_h,
        "std_soft": sd_s,
        "ratio": sd_h / sd_s if sd_s > 0 else (1.0 if sd_h == 0 else float("inf")),
        "rel_std_hard": sd_h / p,
        "rel_std_soft": sd_s / p,
        "hard_failures": int((~ok).sum()),
        "resamples": resamples,
    }


def run_noise_scaling(cfg):
    """Sweep overlap at fixed rare prior (and optionally the prior at fixed overlap)."""
    n = dict(cfg.noise)
    p = n.get("p", 0.05)
    eps_list = n.get("eps", [0.3, 0.1, 0.03])
    common = {k: n[k] for k in ("n_source", "n_target", "resamples", "num_features", "q0") if k in n}
    seed = cfg.seeds[0]
    sweep = [noise_setting(p, e, seed=seed, **common) for e in eps_list if e > 0]
    excluded = [e for e in eps_list if e <= 0]
    valid = [s for s in sweep if s["status"] == "ok"]
    ordered = sorted(valid, key=lambda s: -s["eps"])
    ratios = [s["ratio"] for s in ordered]
    result = {
        "eps_sweep": sweep,
        "excluded_eps": excluded,
        "monotone": all(b >= a for a, b in pairwise(ratios)),
    }
    if n.get("p_sweep"):
        eps_fixed = n.get("eps_fixed", 0.1)
        ps = [noise_setting(pp, eps_fixed, seed=seed, **common) for pp in n["p_sweep"]]
        norm = [s["rel_std_soft"] * np.sqrt(s["p"]) for s in ps if s["status"] == "ok"]
        gm = float(np.exp(np.mean(np.log(norm)))) if norm else float("nan")
        result["p_sweep"] = ps
        result["soft_sqrt_p_band"] = all(gm / 2 <= v <= 2 * gm for v in norm)
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        write_json(os.path.join(cfg.out, "noise_scaling.json"), result)
    return result
