"""``ttc-tune`` command line.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
``TTC_THREADS`` caps the number of worker threads used for scoring.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import checkpoint as ckpt_io
from . import diagnostics as dg
from . import runlog
from .autograd import NumericError
from .config import ConfigError, RunConfig, load_config, parse_config, to_text
from .data import DatasetSpec, TaskData, generate, load_dataset, save_dataset
from .pipeline import (ConfigurationError, dataset_loss, evaluate, features, pretrained_backbone,
                       run_method, run_stage2, score_stage1)
from .tis import ImportanceReport, exact_removal_scores, taylor_scores
from .ttc import stage2_trainable
from .vit import count_params

log = logging.getLogger("ttc_tuning")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class SpecMismatch(ValueError):
    pass


# ---------------------------------------------------------------- helpers


def thread_cap(requested: int) -> int:
    env = os.environ.get("TTC_THREADS", "").strip()
    if not env:
        return requested
    try:
        cap = int(env)
    except ValueError:
        raise ConfigError(f"TTC_THREADS must be an integer, got {env!r}", "TTC_THREADS") from None
    return max(1, min(requested, cap))


def _overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = val.strip()
    return out


def _config(args) -> RunConfig:
    over = _overrides(getattr(args, "set", None))
    if getattr(args, "method", None):
        over["method"] = args.method
    if args.config:
        return load_config(args.config, over)
    return parse_config("", over)


def build_data(cfg: RunConfig) -> TaskData:
    if cfg.data.path:
        return load_dataset(cfg.data.path, val=cfg.data.val)
    spec = DatasetSpec(**{k: getattr(cfg.data, k) for k in DatasetSpec.__dataclass_fields__})
    return generate(spec)


def build_backbone(cfg: RunConfig):
    if cfg.pretrain.checkpoint:
        model, _ = ckpt_io.load_model(cfg.pretrain.checkpoint)
        if model.spec != cfg.model:
            raise SpecMismatch(f"backbone checkpoint spec {model.spec} differs from model.* config")
        return model
    return pretrained_backbone(cfg.model, cfg.pretrain, model_seed=cfg.seed)


def check_data(model, data: TaskData) -> None:
    s = model.spec
    expect = (s.channels, s.image_size, s.image_size)
    for name, ds in (("train", data.train), ("test", data.test)):
        if ds.images.shape[1:] != expect:
            raise SpecMismatch(f"{name} images have shape {ds.images.shape[1:]}, model expects {expect}")
        if len(ds) and (ds.labels.min() < 0 or ds.labels.max() >= s.num_classes):
            raise SpecMismatch(f"{name} labels exceed the model's {s.num_classes} classes")


def write_reports(out: str, method: str, backbone, tuned, model, data: TaskData) -> dg.Complexity:
    comp = dg.complexity_report(model, method)
    dg.write_complexity(os.path.join(out, "complexity.txt"), [comp])
    dg.write_jsd_hist(os.path.join(out, "jsd_hist.csv"), dg.feature_shift_report(backbone, tuned, data.test))
    train_f0, test_f0 = features(backbone, data.train), features(backbone, data.test)
    train_f1, test_f1 = features(model, data.train), features(model, data.test)
    acc0 = dg.knn_probe(train_f0, data.train.labels, test_f0, data.test.labels, 1)
    acc1 = dg.knn_probe(train_f1, data.train.labels, test_f1, data.test.labels, 1)
    dg.write_knn(os.path.join(out, "knn.txt"), 1, acc0, acc1)
    dg.write_ln_shift(os.path.join(out, "ln_shift.csv"), dg.ln_shift_report(backbone, tuned))
    dg.export_embeddings(os.path.join(out, "embeddings.csv"), test_f1, data.test.labels)
    return comp


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = _config(args)
    cfg.threads = thread_cap(cfg.threads)
    out = args.out
    os.makedirs(out, exist_ok=True)
    cfg_text = to_text(cfg)
    backbone = build_backbone(cfg)
    data = build_data(cfg)
    check_data(backbone, data)
    ckpt_io.save_model(os.path.join(out, "backbone.ckpt"), backbone, "backbone", cfg_text, cfg.seed)
    res = run_method(cfg.method, backbone, data, cfg.method_config())
    rec = res.record
    if cfg.method == "ttc":
        paths = ["stage1.ckpt", "scores.json", "stage2.ckpt"]
        ckpt_io.save_model(os.path.join(out, paths[0]), res.stage1_model, "stage1", cfg_text, cfg.seed)
        res.report.save(os.path.join(out, paths[1]))
        ckpt_io.save_model(os.path.join(out, paths[2]), res.model, "stage2", cfg_text, cfg.seed)
        tuned = res.stage1_model
        trainable = res.model.params.keys() & set(rec.trainable)
    else:
        paths = ["stage1.ckpt"]
        ckpt_io.save_model(os.path.join(out, paths[0]), res.model, cfg.method, cfg_text, cfg.seed)
        tuned = res.model
        trainable = set(rec.trainable)
    rec.checkpoints = paths
    if count_params(res.model, trainable) != rec.trainable_params:
        raise RuntimeError("trainable parameter count changed between training and saving")
    runlog.write_run_csv(os.path.join(out, "run.csv"), res.stage_records)
    comp = write_reports(out, cfg.method, backbone, tuned, res.model, data)
    runlog.write_run_txt(os.path.join(out, "run.txt"), rec, comp.params_counted, cfg_text)
    print(f"{cfg.method}: test accuracy {100 * rec.metrics['test_acc']:.2f}% "
          f"({rec.trainable_params} trainable, {comp.params_counted} extra) -> {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    model = pretrained_backbone(cfg.model, cfg.pretrain, model_seed=cfg.seed)
    ckpt_io.save_model(args.out, model, "backbone", to_text(cfg), cfg.seed)
    print(f"backbone -> {args.out}")
    return EXIT_OK


def _data_for(args, model) -> TaskData:
    if args.data:
        data = load_dataset(args.data)
    else:
        data = build_data(_config(args))
    check_data(model, data)
    return data


def cmd_score(args) -> int:
    model, meta = ckpt_io.load_model(args.checkpoint)
    data = _data_for(args, model)
    depth = model.spec.depth if args.depth is None else args.depth
    if args.k < 1 or args.k > model.spec.dim:
        raise ConfigError(f"--k {args.k} outside [1, {model.spec.dim}]", "k")
    report = score_stage1(model, data.train, args.k, selector=args.selector, position=args.position,
                          depth=depth, aggregate=args.aggregate, max_batches=args.batches,
                          seed=args.seed, threads=thread_cap(args.threads))
    report.save(args.out)
    for (layer, site), s in report.sites.items():
        print(f"layer {layer} {site}: {s.selected}")
    if args.oracle:
        from scipy.stats import spearmanr

        if model.spec.dim > 128:
            raise ConfigError("--oracle is limited to models with dim <= 128", "oracle")
        batch = next(data.train.batches(100))
        table = taylor_scores(model, [batch], list(report.sites), args.aggregate)
        for site, scores in table.items():
            exact = exact_removal_scores(model, batch, report.sites[site].weight)
            rho = spearmanr(scores, exact)[0]
            print(f"oracle layer {site[0]} {site[1]}: spearman {rho:.4f}")
    return EXIT_OK


def cmd_stage2(args) -> int:
    cfg = _config(args)
    model, _ = ckpt_io.load_model(args.checkpoint)
    report = ImportanceReport.load(args.scores)
    data = build_data(cfg)
    check_data(model, data)
    mc = cfg.method_config()
    plan = mc.stage2.with_(trainable=stage2_trainable(mc.tune_ln))
    tuned, rec = run_stage2(model, data.train, report, plan, data.test, depth=mc.depth,
                            position=mc.position, bias=mc.bias, mode=mc.mode, tune_ln=mc.tune_ln)
    rec.metrics["test_acc"] = evaluate(tuned, data.test)
    os.makedirs(args.out, exist_ok=True)
    ckpt_io.save_model(os.path.join(args.out, "stage2.ckpt"), tuned, "stage2", to_text(cfg), cfg.seed)
    runlog.write_run_csv(os.path.join(args.out, "stage2.csv"), [rec])
    print(f"stage2: test accuracy {100 * rec.metrics['test_acc']:.2f}%")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = ckpt_io.load_model(args.checkpoint)
    data = _data_for(args, model)
    acc = evaluate(model, data.test)
    loss = dataset_loss(model, data.test)
    print(f"stage={meta.get('stage', '')} test_acc={acc:.6f} test_loss={loss:.6f} n={len(data.test)}")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = runlog.report_table(args.run_dir)
    if not rows:
        print(f"no runs found under {args.run_dir}", file=sys.stderr)
        return EXIT_IO
    runlog.write_report(args.run_dir, rows)
    sys.stdout.write(runlog.format_table(rows))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    if args.config:
        cfg = _config(args)
        spec = DatasetSpec(**{k: getattr(cfg.data, k) for k in DatasetSpec.__dataclass_fields__})
    else:
        try:
            spec = DatasetSpec(task=args.task, classes=args.classes, image_size=args.image_size,
                               train=args.train, val=args.val, test=args.test, shift=args.shift,
                               noise=args.noise, variant=args.variant, seed=args.seed)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    save_dataset(generate(spec), args.out, spec)
    print(f"{spec.task}: {spec.train} train / {spec.test} test images -> {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ttc-tune", description="Two-stage LayerNorm + channel tuning toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required, help="flat key = value run config")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    t = sub.add_parser("train", help="run a method end to end and write checkpoints and reports")
    with_config(t)
    t.add_argument("--method", help="override the config's method")
    t.add_argument("--out", default="run", help="output directory")
    t.set_defaults(func=cmd_train)

    pt = sub.add_parser("pretrain", help="pretrain a backbone on the source task")
    with_config(pt)
    pt.add_argument("--out", default="backbone.ckpt")
    pt.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("score", help="score channels of a checkpoint and select top-K")
    s.add_argument("--checkpoint", required=True)
    with_config(s)
    s.add_argument("--data", help="dataset directory (default: the config's data section)")
    s.add_argument("--selector", choices=("tis", "l2norm", "random"), default="tis")
    s.add_argument("--aggregate", choices=("row", "element", "signed"), default="row")
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--position", choices=("after_mhsa", "after_mlp", "both"), default="after_mlp")
    s.add_argument("--depth", type=int)
    s.add_argument("--batches", type=int, help="score on the first N batches only")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--oracle", action="store_true", help="compare against exact row removal")
    s.add_argument("--out", default="scores.json")
    s.set_defaults(func=cmd_score)

    s2 = sub.add_parser("stage2", help="resume stage 2 from a stage-1 checkpoint and scores")
    s2.add_argument("--checkpoint", required=True)
    s2.add_argument("--scores", required=True)
    with_config(s2)
    s2.add_argument("--out", default="run")
    s2.set_defaults(func=cmd_stage2)

    e = sub.add_parser("eval", help="test accuracy of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    with_config(e)
    e.add_argument("--data")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="tabulate every run under a directory")
    r.add_argument("run_dir")
    r.set_defaults(func=cmd_report)

    g = sub.add_parser("gen-data", help="write a synthetic dataset to disk")
    with_config(g)
    d = DatasetSpec()
    g.add_argument("--out", required=True)
    g.add_argument("--task", default=d.task, choices=("texture", "count"))
    g.add_argument("--classes", type=int, default=d.classes)
    g.add_argument("--image-size", type=int, default=d.image_size)
    g.add_argument("--train", type=int, default=d.train)
    g.add_argument("--val", type=int, default=d.val)
    g.add_argument("--test", type=int, default=d.test)
    g.add_argument("--shift", type=float, default=d.shift)
    g.add_argument("--noise", type=float, default=d.noise)
    g.add_argument("--variant", type=int, default=d.variant)
    g.add_argument("--seed", type=int, default=d.seed)
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, SpecMismatch) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ckpt_io.CheckpointError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
