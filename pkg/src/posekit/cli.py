"""``posekit`` command line: train, eval, analyze, bench and synth.

One config file holds both model and training keys (``key=value`` lines);
``posekit --dump-config`` prints every key with its default. ``--set k=v``
overrides a single key after the file is read.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""
import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import config as cfgtext
from . import cost, kernels
from .bench import run_bench
from .codec import gaussian_encode, apply_affine_points, input_to_heatmap
from .config import ConfigError
from .dataio import DataFormatError, TensorFileError, load_dataset, synth_generate
from .model import CheckpointError, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .tensor import ShapeError
from .train import NumericError, TrainConfig, evaluate_heatmaps, predict_heatmaps, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

CHECKPOINT_NAME = "checkpoint.pkpt"


def load_run_config(path=None, overrides=()):
    """``(ModelConfig, TrainConfig)`` from an optional config file plus ``k=v`` overrides."""
    pairs = {}
    if path is not None:
        try:
            with open(path) as fh:
                pairs.update(cfgtext.parse_pairs(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for item in overrides:
        pairs.update(cfgtext.parse_pairs(item))
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(pairs) - model_keys - train_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    mcfg = cfgtext.build(ModelConfig, {k: v for k, v in pairs.items() if k in model_keys}).validate()
    tcfg = cfgtext.build(TrainConfig, {k: v for k, v in pairs.items() if k in train_keys}).validate()
    return mcfg, tcfg


def dump_config():
    return ("# model\n" + ModelConfig().to_text()
            + "# training\n" + TrainConfig().to_text())


def _emit(text, out=None):
    sys.stdout.write(text)
    if out is not None:
        with open(out, "a") as fh:
            fh.write(text)


def _check_dataset(ds, mcfg):
    m = ds.manifest
    if tuple(m.input_size) != tuple(mcfg.input_size) or m.joints != mcfg.num_joints or m.channels != mcfg.in_channels:
        raise DataFormatError(
            f"dataset (input {m.input_size}, {m.joints} joints, {m.channels} channels) does not match model "
            f"(input {mcfg.input_size}, {mcfg.num_joints} joints, {mcfg.in_channels} channels)")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    mcfg, tcfg = load_run_config(args.config, args.set)
    seed = tcfg.seed if args.seed is None else args.seed
    manifest = synth_generate(args.out, args.n, mcfg, seed=seed, sigma=args.sigma)
    sys.stdout.write(manifest.to_text())
    return EXIT_OK


def cmd_train(args):
    mcfg, tcfg = load_run_config(args.config, args.set)
    ds = load_dataset(args.data)
    _check_dataset(ds, mcfg)
    os.makedirs(args.out, exist_ok=True)
    log_path = os.path.join(args.out, "train_log.txt")
    open(log_path, "w").close()
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(mcfg.to_text() + tcfg.to_text())
    model = build_model(mcfg, seed=tcfg.seed)

    def log(e):
        _emit(f"epoch={e['epoch']} loss={e['loss']:.8g} lr={e['lr']:.6g} "
              f"mean_error={e['mean_error']:.6f} pck={e['pck']:.6f}\n", log_path)

    start = time.perf_counter()
    history = train(model, ds, tcfg, log=log)
    save_checkpoint(model, os.path.join(args.out, CHECKPOINT_NAME))
    _emit(f"initial_loss={history[0]['loss']:.8g}\nfinal_loss={history[-1]['loss']:.8g}\n"
          f"final_mean_error={history[-1]['mean_error']:.6f}\nseconds={time.perf_counter() - start:.2f}\n", log_path)
    return EXIT_OK


def _oracle_heatmaps(ds, mcfg):
    to_hm = input_to_heatmap(mcfg.feature_stride)
    return np.stack([gaussian_encode(apply_affine_points(to_hm, k, "heatmap"), mcfg.output_size,
                                     ds.manifest.sigma)[0] for k in ds.keypoints])


def cmd_eval(args):
    mcfg, tcfg = load_run_config(args.config, args.set)
    if args.oracle:
        model = None
    else:
        if args.checkpoint is None:
            raise ConfigError("eval needs --checkpoint unless --oracle is given")
        model = load_checkpoint(args.checkpoint)
        mcfg = model.config
    ds = load_dataset(args.data)
    _check_dataset(ds, mcfg)
    flip = tcfg.flip_test and not args.no_flip
    runs = {}
    if model is None:
        runs["oracle"] = _oracle_heatmaps(ds, mcfg)
    else:
        runs["flip_off"] = predict_heatmaps(model, ds.inputs, flip_test=False)
        if flip:
            runs["flip_on"] = predict_heatmaps(model, ds.inputs, flip_test=True,
                                               flip_pairs=tcfg.pairs_for(mcfg.num_joints))
    dump = {}
    for name, hm in runs.items():
        result, rows = evaluate_heatmaps(hm, ds, mcfg)
        errs = [r["mean_error_hm"] for r in rows]
        sys.stdout.write(f"[{name}]\n" + result.to_text() + f"mean_error_hm={float(np.mean(errs)):.6f}\n")
        dump[name] = {"summary": result.to_dict(), "samples": rows}
    if len(runs) == 2:
        delta = {k: dump["flip_on"]["summary"][k] - dump["flip_off"]["summary"][k] for k in ("AP", "AR")}
        sys.stdout.write(f"flip_delta_AP={delta['AP']:+.6f}\nflip_delta_AR={delta['AR']:+.6f}\n")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.json"), "w") as fh:
            json.dump(dump, fh, indent=1)
    return EXIT_OK


def analyze_report(mcfg, variant=None):
    """Text lines for the analyze command; split out so tests can call it directly."""
    variant = variant or mcfg.head_variant
    mcfg = dataclasses.replace(mcfg, head_variant=variant).validate()
    spec = cost.head_spec(mcfg)
    formula = cost.formula_report(spec)
    inst = cost.count_instantiated(build_model(mcfg))
    no_att = cost.count_instantiated(build_model(dataclasses.replace(mcfg, attention_enabled=False)))
    lines = [f"variant={variant}"]
    lines += [f"formula.{l.name}.weights={l.weights}\nformula.{l.name}.macs={l.macs}" for l in formula.per_layer]
    lines += [
        f"formula.head.params={cost.head_params(spec)}",
        f"formula.head.macs={cost.head_macs(spec)}",
        f"formula.standard.params={cost.standard_head_params(spec)}",
        f"formula.standard.macs={cost.standard_head_macs(spec)}",
        f"formula.lightweight.params={cost.lightweight_head_params(spec)}",
        f"formula.lightweight.macs={cost.lightweight_head_macs(spec)}",
    ]
    lines += [f"instantiated.{k}={v}" for k, v in inst.summary().items() if k != "ratio"]
    lines += [
        f"instantiated.matches_formula={str(inst.bucket_weights('head') == cost.head_params(spec) and inst.bucket_macs('head') == cost.head_macs(spec)).lower()}",
        f"attention.delta_params={inst.params_total - no_att.params_total}",
        f"attention.delta_macs={inst.macs_total - no_att.macs_total}",
    ]
    if formula.ratio is not None:
        r = formula.ratio
        lines += [f"ratio={r.numerator}/{r.denominator}", f"ratio_decimal={float(r):.10f}"]
    return lines, formula, inst, no_att


def cmd_analyze(args):
    mcfg, _ = load_run_config(args.config, args.set)
    lines, formula, inst, no_att = analyze_report(mcfg, args.variant)
    if args.json:
        doc = {
            "variant": args.variant or mcfg.head_variant,
            "formula": json.loads(formula.to_json()),
            "instantiated": json.loads(inst.to_json()),
            "attention_delta": {"params": str(inst.params_total - no_att.params_total),
                                "macs": str(inst.macs_total - no_att.macs_total)},
        }
        if formula.ratio is not None:
            doc["ratio"] = f"{formula.ratio.numerator}/{formula.ratio.denominator}"
            doc["ratio_decimal"] = float(formula.ratio)
        sys.stdout.write(json.dumps(doc, indent=2) + "\n")
    else:
        sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_bench(args):
    mcfg, tcfg = load_run_config(args.config, args.set)
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        if args.input_size:
            h, w = (int(v) for v in args.input_size.lower().split("x"))
            mcfg = dataclasses.replace(mcfg, input_size=(h, w)).validate()
        model = build_model(mcfg, seed=tcfg.seed)
    c = model.config
    x = np.random.default_rng(tcfg.seed).random((1, c.in_channels, *c.input_size))
    pre = None
    if args.preprocess_delay > 0:
        def pre(batch):
            time.sleep(args.preprocess_delay)
            return batch
    report = run_bench(model, x, rounds=args.rounds, warmup=args.warmup, preprocess=pre, backend=args.backend)
    sys.stdout.write(report.to_text(top=args.top))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    p = argparse.ArgumentParser(prog="posekit", description=__doc__.splitlines()[0])
    p.add_argument("--dump-config", action="store_true", help="print every config key with its default and exit")
    sub = p.add_subparsers(dest="command")

    def common(sp):
        sp.add_argument("--config", help="key=value config file (model and training keys)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("-n", type=int, default=32)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--sigma", type=float, default=2.0)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train on a dataset and write a checkpoint")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a checkpoint (or ground-truth heatmaps) on a dataset")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--no-flip", action="store_true", help="skip the flip-test pass")
    sp.add_argument("--oracle", action="store_true", help="score ground-truth-encoded heatmaps instead of a model")
    sp.add_argument("--out", help="directory for the per-sample dump")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze", help="head parameter and MAC counts")
    common(sp)
    sp.add_argument("--variant", choices=("lightweight", "standard"))
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("bench", help="time single-image inference")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--rounds", type=int, default=50)
    sp.add_argument("--warmup", type=int, default=5)
    sp.add_argument("--preprocess-delay", type=float, default=0.0, metavar="SECONDS",
                    help="untimed sleep before each round")
    sp.add_argument("--backend", choices=kernels.available())
    sp.add_argument("--input-size", metavar="HxW")
    sp.add_argument("--top", type=int, default=12, help="layer shares to print")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_config:
        sys.stdout.write(dump_config())
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataFormatError, TensorFileError, CheckpointError, ShapeError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
