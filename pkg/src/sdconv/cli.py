"""Command-line entry point: ``sdconv <command> [options]``.

Commands
--------
verify     decomposition and smoothing equivalence suites
gradcheck  analytic backward vs. central finite differences for every operator
params     parameter-count audit (or a single count with ``--method``)
erf        effective receptive field map, hole census, PGM + ``.t4`` output
train      desk-scale training run on synthetic data
eval       mean IoU of a saved model on the held-out synthetic split

Every command exits 0 iff all checks it runs pass; malformed configuration
exits 2.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from sdconv.attention import AttentionParams, count_attention_params, dilated_output_params
from sdconv.checks import CheckResult, gradcheck_suite, verify_suite
from sdconv.erf import (
    analysis_input_size,
    cascade_block,
    erf_aggregate,
    erf_render,
    holes,
    support_outside,
    theoretical_rf,
)
from sdconv.harness.config import (
    PRESETS,
    ConfigError,
    Preset,
    dump_config,
    load_config,
    resolve,
)
from sdconv.harness.data import synth_dataset
from sdconv.harness.model import SegmentationModel
from sdconv.harness.train import TrainingDiverged, evaluate, train, write_log
from sdconv.smoothing import METHODS, count_extra_params

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# Output-head comparison: 2048 input channels, 512 output / key channels.
HEAD_D, HEAD_OUT = 2048, 512

ERF_BLOCKS = {
    "cascade": (2, 2),
    "single-r4": (4,),
}


def _report(results: List[CheckResult]) -> int:
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def _preset(args) -> Preset:
    flat = load_config(args.config) if args.config else {}
    preset = resolve(args.preset, flat)
    model = preset.model
    if args.method:
        model = model.with_smoothing(args.method)
    if args.window is not None:
        model = replace(model, window=args.window)
    train_cfg = preset.train
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    return Preset(model.validate(), train_cfg, preset.data)


def cmd_verify(args) -> int:
    return _report(verify_suite(seed=args.seed or 0, trials=args.trials))


def cmd_gradcheck(args) -> int:
    return _report(gradcheck_suite(seed=args.seed or 0))


def _exact(name: str, value: int, expected: int) -> CheckResult:
    # value 0 passes (< 1), anything else fails
    return CheckResult(f"{name} = {value:,} (expected {expected:,})", float(abs(value - expected)), 1.0)


def cmd_params(args) -> int:
    model = _preset(args).model
    layers = [(lc.smoothing, lc.rate) for lc in model.layers]
    if args.method:
        print(count_extra_params(layers))
        return EXIT_OK

    results = []
    full_encoder = args.preset == "paper-encoder"
    for method, expected in (("GI", 1136), ("SS", 354)):
        count = count_extra_params([(method, lc.rate) for lc in model.layers])
        if full_encoder:
            results.append(_exact(f"{method} extra parameters", count, expected))
        else:
            print(f"{method} extra parameters: {count:,}")
    largefov = dilated_output_params(HEAD_D, HEAD_OUT, branches=1)
    aspp = dilated_output_params(HEAD_D, HEAD_OUT, branches=4)
    window = args.window or model.window
    ss_head = count_attention_params(HEAD_D, HEAD_OUT, HEAD_OUT)
    rng = np.random.default_rng(0)
    by_window = [AttentionParams.init(64, 16, 16, 1, s, rng).num_params() for s in (window, 31)]
    results += [
        _exact("LargeFOV output layer", largefov, 9_437_696),
        _exact("ASPP output layer", aspp, 37_750_784),
        CheckResult(f"SS output layer {ss_head:,} < LargeFOV {largefov:,} < ASPP {aspp:,}",
                    0.0 if ss_head < largefov < aspp else 1.0, 1.0),
        CheckResult(f"SS attention parameters, window {window} vs 31: {by_window[0]} vs {by_window[1]}",
                    float(by_window[0] != by_window[1]), 1.0),
    ]
    print(f"model parameters ({args.preset or 'desk'}): {SegmentationModel.build(model).num_params():,}"
          if not full_encoder else "model parameters: not instantiated for paper-encoder")
    return _report(results)


def cmd_erf(args) -> int:
    if args.preset in ERF_BLOCKS:
        rates = ERF_BLOCKS[args.preset]
    else:
        model = _preset(args).model
        rates = tuple(lc.rate for lc in model.layers)
    method = args.method or "none"
    block = cascade_block(rates, method)
    n = analysis_input_size(block)
    rng = np.random.default_rng(args.seed or 0)
    dataset = [rng.uniform(0.0, 1.0, size=(1, 1, n, n)) for _ in range(args.samples)]
    description = f"rates={','.join(map(str, rates))} method={method}"
    erf = erf_aggregate(block, dataset, description)
    box = theoretical_rf(block, (n, n), block.forward(dataset[0]).shape[2:])
    census = holes(erf, box)
    outside = support_outside(erf, box)
    print(f"block: {description}, input {n}x{n}, {args.samples} samples")
    print(f"theoretical receptive field (top, left, bottom, right): {box}")
    print(f"holes inside receptive field: {census}")
    print(f"support outside receptive field: {outside}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        stem = f"erf_{args.preset or 'desk'}_{method}"
        pgm, raw = erf_render(erf, out / stem)
        print(f"wrote {pgm} and {raw}")
    return EXIT_OK if outside == 0 else EXIT_FAIL


def _split(preset: Preset, seed: int):
    data = synth_dataset(seed, preset.data.n, preset.data.size, preset.model.classes)
    held = preset.data.holdout
    return data[:-held], data[-held:]


def cmd_train(args) -> int:
    preset = _preset(args)
    seed = preset.train.seed
    train_data, val_data = _split(preset, seed)
    try:
        result = train(preset.model, train_data, preset.train, val_data)
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for row in result.log:
        print(f"iter {row['iter']:5d}  lr {row['lr']:.3e}  loss {row['loss']:.4f}  miou {row['miou']:.4f}")
    chance = 1.0 / preset.model.classes
    print(f"final held-out mean IoU {result.final_miou:.4f} (chance {chance:.3f})")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_log(result.log, out / "metrics.csv")
        result.model.save(out / "model")
        run = {**preset.train.to_flat(), **preset.data.to_flat()}
        (out / "run.cfg").write_text(dump_config(run), encoding="utf-8")
        print(f"wrote {out / 'metrics.csv'} and {out / 'model'}")
    return EXIT_OK if np.isfinite(result.final_miou) else EXIT_FAIL


def cmd_eval(args) -> int:
    if not args.out:
        raise ConfigError("eval needs --out DIR pointing at a directory written by 'train --out'")
    out = Path(args.out)
    model_dir = out / "model" if (out / "model").is_dir() else out
    if not (model_dir / "model.cfg").is_file():
        raise ConfigError(f"no saved model under {out}")
    model = SegmentationModel.load(model_dir)
    flat = load_config(out / "run.cfg") if (out / "run.cfg").is_file() else {}
    if args.config:
        flat.update(load_config(args.config))
    flat = {k: v for k, v in flat.items() if k.startswith(("train.", "data."))}
    preset = resolve("desk", flat)
    seed = args.seed if args.seed is not None else preset.train.seed
    _, val_data = _split(Preset(model.config, preset.train, preset.data), seed)
    miou = evaluate(model, val_data)
    print(f"held-out mean IoU {miou:.4f} over {len(val_data)} samples")
    return EXIT_OK if np.isfinite(miou) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdconv", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help, *, model=False, trials=False, erf=False):
        p = sub.add_parser(name, help=help)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--out", metavar="DIR")
        if model:
            presets = sorted(PRESETS) + (sorted(ERF_BLOCKS) if erf else [])
            p.add_argument("--preset", metavar="NAME", choices=presets,
                           help=f"one of {', '.join(presets)}")
            p.add_argument("--method", choices=METHODS)
            p.add_argument("--window", type=int, help="SS output layer window side")
        if trials:
            p.add_argument("--trials", type=int, default=108)
        if erf:
            p.add_argument("--samples", type=int, default=4)
        p.set_defaults(func=func)
        return p

    add("verify", cmd_verify, "equivalence suites", trials=True)
    add("gradcheck", cmd_gradcheck, "finite-difference gradient checks")
    add("params", cmd_params, "parameter-count audit", model=True)
    add("erf", cmd_erf, "effective receptive field census and images", model=True, erf=True)
    add("train", cmd_train, "desk-scale training run", model=True)
    add("eval", cmd_eval, "evaluate a saved model", model=True)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"sdconv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
