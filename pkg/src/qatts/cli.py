"""Command-line entry point.

Exit codes: 0 ok, 1 unexpected error, 2 invalid config/usage, 3 data error,
4 config/checkpoint mismatch, 5 nothing to lower (float-only checkpoint),
6 window index out of range. Results go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .data import Scaler
from .errors import CheckpointMismatchError, IndexOutOfRangeError, LoweringError, QattsError
from .intinfer import equivalence_check, lower_model
from .model import TransformerModel
from .persistence import (
    append_metrics,
    dump_text,
    export_quantized,
    import_quantized,
    read_checkpoint,
    save_checkpoint,
)
from .quant import QuantPolicy, compression_rate, stage_policies
from .train import EpochRecord, fit, split_mse

def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    return cfg.override(**{"training.seed": args.seed, "data.synthetic": args.synthetic})


def cmd_train(args) -> int:
    cfg = _config(args)
    data = cfg.dataset()
    model = TransformerModel(cfg.model_config())
    policy = cfg.policy(model)
    tcfg = cfg.train_config()
    metrics = cfg.output("metrics")
    ckpt = cfg.output("checkpoint")
    metrics.parent.mkdir(parents=True, exist_ok=True)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    metrics.unlink(missing_ok=True)
    result = fit(model, data, tcfg, policy, lambda rec: append_metrics(metrics, rec))
    meta = {"data": cfg.data_meta(data), "epochs": tcfg.epochs_float + tcfg.epochs_qat}
    save_checkpoint(model, ckpt, result.optimizer, meta, seed=tcfg.seed)
    print(f"test mse {result.last('test'):.6g}")
    print(f"checkpoint {ckpt}")
    return 0


def _load_matching(cfg: RunConfig, path: Path):
    ck = read_checkpoint(path)
    if ck.model.config.to_dict() != cfg.model_config().to_dict():
        raise CheckpointMismatchError(f"{path}: model configuration differs from the config file")
    return ck


def cmd_eval(args) -> int:
    cfg = _config(args)
    ck = _load_matching(cfg, Path(args.checkpoint) if args.checkpoint else cfg.output("checkpoint"))
    model = ck.model.eval()
    model.freeze_observers()
    data = cfg.dataset()
    scores = split_mse(model, data)
    metrics = cfg.output("metrics")
    metrics.parent.mkdir(parents=True, exist_ok=True)
    for split, mse in scores.items():
        print(f"{split} mse {mse:.6g}")
        append_metrics(metrics, EpochRecord(ck.meta.get("epochs", 0), split, mse, 0.0))
    return 0


def cmd_export(args) -> int:
    cfg = _config(args)
    ck = _load_matching(cfg, Path(args.checkpoint) if args.checkpoint else cfg.output("checkpoint"))
    model = ck.model.eval()
    if cfg["quant.policy"] == "none":
        policy = QuantPolicy.empty(model.roles())
    elif model.policy is None:
        raise LoweringError("checkpoint holds a float-only model without observers; train with QAT first")
    else:
        policy = model.policy
    lowered = lower_model(model, policy)
    lowered.meta = {"data": ck.meta.get("data", {})}
    out = Path(args.output) if args.output else cfg.output("quantized")
    out.parent.mkdir(parents=True, exist_ok=True)
    export_quantized(lowered, out)
    report = compression_rate(model, policy)
    print(report.table())
    print(f"exempt roles ({len(report.exempt())}): {', '.join(report.exempt())}")
    eq = equivalence_check(model, lowered, args.samples, seed=cfg["training.seed"])
    print(eq.summary())
    print(f"quantized model {out}")
    return 0


def cmd_predict(args) -> int:
    lowered = import_quantized(args.model)
    meta = lowered.meta.get("data", {})
    n = lowered.config.n
    base = RunConfig.from_dict({})
    values = {"data.csv": args.csv, "data.synthetic": args.synthetic, "data.column": meta.get("column", "OT")}
    frame = base.override(**values).load_frame()
    scaler = Scaler(**meta.get("scaler", {"mean": 0.0, "std": 1.0}))
    series = scaler.apply(frame.values)
    last = len(series) - n
    if not 0 <= args.index <= last:
        raise IndexOutOfRangeError(f"window index {args.index} outside [0, {last}]")
    pred = lowered.forward(series[args.index : args.index + n][None, :])[0]
    print(",".join(f"{v:.6f}" for v in scaler.invert(pred)))
    return 0


def cmd_report(args) -> int:
    if args.dump:
        print(dump_text(args.dump))
        return 0
    cfg = _config(args)
    model = TransformerModel(cfg.model_config())
    bits = cfg["quant.weight_bits"]
    print(f"parameters: {model.param_count()}")
    for name, policy in stage_policies(model, bits).items():
        report = compression_rate(model, policy)
        print(f"{name:<22} ratio {report.ratio:.5f}x  ({report.quant_bits_total} of {report.fp_bits_total} bits)")
    policy = cfg.policy(model)
    if policy is not None:
        print()
        print(compression_rate(model, policy).table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--seed", type=int, help="override training.seed")
    common.add_argument("--synthetic", help="use generated data, e.g. sine:2000,0.05")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="qatts", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="float training then QAT fine-tuning")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="MSE per split for a checkpoint")
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", parents=[common], help="lower to integer records and write the quantized file")
    p.add_argument("--checkpoint")
    p.add_argument("--output")
    p.add_argument("--samples", type=int, default=100, help="random windows for the equivalence check")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("predict", parents=[common], help="24-step forecast with the integer engine")
    p.add_argument("--model", required=True, help="quantized model file")
    p.add_argument("--csv")
    p.add_argument("--index", type=int, required=True, help="start of the 48-point history window")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", parents=[common], help="compression report, or a text dump of a model file")
    p.add_argument("--dump", help="checkpoint or quantized file to print")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except QattsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
