"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 numerical failure of a global
prior solve (singular or ill-conditioned confusion matrix).
"""

import argparse
import datetime
import logging
import os
import sys

import numpy as np

from . import __version__, datagen, scenarios
from .adapt import METHODS, adapt
from .classifier import (
    ClassifierModel,
    Hyperparams,
    TrainingError,
    predict_proba,
    train,
)
from .experiments import (
    ConfigError,
    ExperimentConfig,
    StageError,
    run_conditional_shift,
    run_label_shift,
    run_noise_scaling,
)
from .metrics import evaluate, quantification_score
from .partition import PartitionConfig
from .quantify import (
    ClassDistribution,
    ConfusionMatrix,
    QuantificationError,
    quantify,
    solve_prior,
)
from .serialize import read_json, read_matrix, write_json, write_matrix

log = logging.getLogger("softquant")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
NO_SHIFT_THRESHOLD = 0.02


def _out_dir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_meta(out, command):
    write_json(os.path.join(out, "meta.json"), {
        "command": command,
        "version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    })


def _fmt(v):
    return "(" + ", ".join(f"{x:.6g}" for x in v) + ")"


def cmd_generate(args):
    if args.config:
        spec = datagen.GeneratorSpec.from_dict(read_json(args.config))
    elif args.scenario == "subclass":
        spec, _ = scenarios.subclass_spec()
    else:
        spec = scenarios.label_shift_spec()
    ds = datagen.sample_dataset(spec, args.n, args.seed)
    shift = None
    if args.shift:
        shift = datagen.ShiftSpec.from_dict(read_json(args.shift))
        ds = datagen.apply_shift(ds, shift, args.seed)
    out = _out_dir(args)
    name = args.name or "dataset"
    datagen.save_csv(ds, os.path.join(out, f"{name}.csv"))
    datagen.save_sidecar(os.path.join(out, f"{name}.json"), spec, shift,
                         true_priors=spec.class_priors, empirical_prior=ds.prior(),
                         n=len(ds), seed=args.seed)
    _write_meta(out, "generate")
    print(f"wrote {len(ds)} rows to {os.path.join(out, name + '.csv')}")


def _load_data(path, K=None):
    return datagen.load_csv(path, num_classes=K)


def cmd_train(args):
    ds = _load_data(args.data, args.classes)
    hp = Hyperparams(
        hidden=tuple(args.hidden), epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.learning_rate,
    )
    model = train(ds, hp, args.seed)
    out = _out_dir(args)
    model.save(os.path.join(out, "model.json"))
    _write_meta(out, "train")
    print(f"final training loss {model.metadata['loss_history'][-1]:.6f}")


def _read_prior(path):
    d = read_json(path)
    return np.asarray(d["probs"] if isinstance(d, dict) else d, dtype=float)


def cmd_quantify(args):
    if args.confusion:
        if not args.phat:
            raise ConfigError("--confusion needs --phat")
        C = ConfusionMatrix.from_dict(read_json(args.confusion))
        res = solve_prior(C, ClassDistribution(_read_prior(args.phat), "classifier-mean"), args.cond_threshold)
    else:
        if not (args.model and args.source and args.target):
            raise ConfigError("quantify needs --confusion/--phat or --model/--source/--target")
        model = ClassifierModel.load(args.model)
        src = _load_data(args.source, model.num_classes)
        tgt = _load_data(args.target, model.num_classes)
        res = quantify(predict_proba(model, src.features), src.labels, predict_proba(model, tgt.features),
                       model.num_classes, args.method, args.min_support, args.cond_threshold)
    print(_fmt(res.prior.probs))
    if args.out:
        out = _out_dir(args)
        write_json(os.path.join(out, "quantification.json"), res.to_dict())
        _write_meta(out, "quantify")


def cmd_adapt(args):
    model = ClassifierModel.load(args.model)
    src = _load_data(args.source, model.num_classes)
    tgt = _load_data(args.target, model.num_classes)
    method = args.method or "subspace-soft"
    if method == "none":
        raise ConfigError("adapt needs an adaptation method")
    cfg = PartitionConfig(dims=args.dims, clusters=args.clusters, min_support=args.min_support, seed=args.seed)
    rep = adapt(model, src, tgt.features, method, cfg)
    score = quantification_score(rep.prior, rep.source_prior, rep.source_prior)
    out = _out_dir(args)
    d = rep.to_dict()
    d["shift_score"] = score
    d["no_significant_shift"] = score < NO_SHIFT_THRESHOLD
    write_json(os.path.join(out, "adaptation.json"), d)
    write_matrix(os.path.join(out, "calibrated.csv"), rep.calibrated)
    _write_meta(out, "adapt")
    print(f"estimated target prior {_fmt(rep.prior)}")
    if score < NO_SHIFT_THRESHOLD:
        print(f"no significant shift detected (score {score:.4f} < {NO_SHIFT_THRESHOLD})")
    else:
        print(f"shift detected (score {score:.4f})")


def cmd_eval(args):
    d = read_json(args.priors)
    try:
        est, act, src = (np.asarray(d[k], dtype=float) for k in ("estimated", "actual", "source"))
    except KeyError as e:
        raise ConfigError(f"{args.priors}: missing key {e.args[0]}") from None
    preds = labels = None
    if args.preds:
        if not args.labels:
            raise ConfigError("--preds needs --labels")
        preds = read_matrix(args.preds)
        labels = _load_data(args.labels).labels
    rep = evaluate(args.method or "eval", est, act, src, preds, labels, args.seed)
    print(f"quantification score {rep.score:.6g}")
    if preds is not None:
        print(f"top1 {rep.top1:.4f} top3 {rep.top3:.4f}")
    if args.out:
        out = _out_dir(args)
        write_json(os.path.join(out, "eval.json"), rep.to_dict())
        _write_meta(out, "eval")


def _experiment_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out:
        cfg.out = args.out
    if args.dims is not None:
        cfg.partition = {**cfg.partition, "dims": args.dims}
    if args.clusters is not None:
        cfg.partition = {**cfg.partition, "clusters": args.clusters}
    if args.method:
        cfg.methods = ["none", args.method] if args.method != "none" else ["none"]
    cfg.validate()
    return cfg


def _print_summary(summary):
    print(f"{'method':<15}{'score':>10}{'top1':>8}{'top3':>8}{'failed':>8}")
    for m, s in summary.items():
        t1 = "" if s["median_top1"] is None else f"{s['median_top1']:.3f}"
        t3 = "" if s["median_top3"] is None else f"{s['median_top3']:.3f}"
        sc = "" if not np.isfinite(s["median_score"]) else f"{s['median_score']:.4f}"
        print(f"{m:<15}{sc:>10}{t1:>8}{t3:>8}{s['failures']:>8}")


def cmd_exp_label_shift(args):
    cfg = _experiment_config(args)
    _, summary = run_label_shift(cfg)
    _print_summary(summary)
    if cfg.out:
        _write_meta(cfg.out, "exp-label-shift")


def cmd_exp_cond_shift(args):
    cfg = _experiment_config(args)
    _, summary = run_conditional_shift(cfg)
    _print_summary(summary)
    if cfg.out:
        _write_meta(cfg.out, "exp-cond-shift")


def cmd_noise_scaling(args):
    cfg = _experiment_config(args)
    res = run_noise_scaling(cfg)
    for s in res["eps_sweep"]:
        if s["status"] == "ok":
            print(f"eps={s['achieved_eps']:.4f} std_hard={s['std_hard']:.5f} "
                  f"std_soft={s['std_soft']:.5f} ratio={s['ratio']:.3f}")
        else:
            print(f"eps={s['eps']}: {s['status']}")
    print(f"monotone trend: {res['monotone']}")
    if cfg.out:
        _write_meta(cfg.out, "noise-scaling")


def build_parser():
    p = argparse.ArgumentParser(prog="softquant", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=0):
        sp.add_argument("--config", help="JSON config / spec file")
        sp.add_argument("--seed", type=int, default=seed)
        sp.add_argument("--out", help="output directory")
        return sp

    g = common(sub.add_parser("generate", help="sample a synthetic dataset"))
    g.add_argument("--scenario", choices=["label-shift", "subclass"], default="label-shift")
    g.add_argument("--n", type=int, default=100_000)
    g.add_argument("--shift", help="ShiftSpec JSON to apply after sampling")
    g.add_argument("--name", help="output file stem (default: dataset)")
    g.set_defaults(func=cmd_generate)

    t = common(sub.add_parser("train", help="train the softmax classifier"))
    t.add_argument("--data", required=True)
    t.add_argument("--classes", type=int, help="number of classes (default: max label + 1)")
    t.add_argument("--hidden", type=int, nargs="*", default=[64])
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=128)
    t.add_argument("--learning-rate", type=float, default=0.1)
    t.set_defaults(func=cmd_train)

    q = common(sub.add_parser("quantify", help="estimate a target label distribution"))
    q.add_argument("--confusion", help="confusion matrix JSON")
    q.add_argument("--phat", help="target mean prediction JSON")
    q.add_argument("--model")
    q.add_argument("--source")
    q.add_argument("--target")
    q.add_argument("--method", choices=["soft", "hard"], default="soft")
    q.add_argument("--min-support", type=int, default=5)
    q.add_argument("--cond-threshold", type=float, default=1e8)
    q.set_defaults(func=cmd_quantify)

    a = common(sub.add_parser("adapt", help="adapt a trained model to an unlabeled target"))
    a.add_argument("--model", required=True)
    a.add_argument("--source", required=True)
    a.add_argument("--target", required=True)
    a.add_argument("--method", choices=METHODS[1:])
    a.add_argument("--dims", type=int, default=6)
    a.add_argument("--clusters", type=int, default=5)
    a.add_argument("--min-support", type=int, default=5)
    a.set_defaults(func=cmd_adapt)

    e = common(sub.add_parser("eval", help="quantification score and top-k accuracy"))
    e.add_argument("--priors", required=True, help='JSON with "estimated", "actual", "source"')
    e.add_argument("--preds", help="prediction CSV")
    e.add_argument("--labels", help="dataset CSV holding the true labels")
    e.add_argument("--method")
    e.set_defaults(func=cmd_eval)

    for name, fn, text in (
        ("exp-label-shift", cmd_exp_label_shift, "label-shift experiment"),
        ("exp-cond-shift", cmd_exp_cond_shift, "label + conditional shift experiment"),
        ("noise-scaling", cmd_noise_scaling, "hard vs soft noise as overlap grows"),
    ):
        x = common(sub.add_parser(name, help=text), seed=None)
        x.add_argument("--method", choices=METHODS)
        x.add_argument("--dims", type=int)
        x.add_argument("--clusters", type=int)
        x.set_defaults(func=fn)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except QuantificationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        if isinstance(e.cause, QuantificationError):
            return EXIT_NUMERICAL
        return EXIT_VALIDATION
    except (ConfigError, datagen.SpecError, ValueError, KeyError, OSError, TrainingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
