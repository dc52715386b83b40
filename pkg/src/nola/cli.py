"""``nola <subcommand> [flags]``: desk-scale experiments with JSON, CSV and PNG output.

Exit status is 0 on success, 2 for usage errors (bad flags, missing data)
and 1 for runtime failures such as a corrupt checkpoint.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .errors import DomainError, FormatError, UsageError
from .train import TrainConfig

log = logging.getLogger("nola")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out-dir", type=Path, default=Path("nola-runs"), help="directory for JSON, CSV and figures")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figure")
    p.add_argument("--seed", type=int, default=0)


def _add_train(p: argparse.ArgumentParser, method: bool = True) -> None:
    if method:
        p.add_argument("--method", choices=("dense", "nola", "lora", "pranc"), default="nola")
    p.add_argument("--params-per-layer", type=int, default=32)
    p.add_argument("--rank", type=int, default=4, help="NOLA rank")
    p.add_argument("--lora-rank", type=int, default=1)
    p.add_argument("--epochs", type=int, default=None, help=f"default {ex.CI_EPOCHS}, or {ex.FULL_EPOCHS} with --full")
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--data", default=None, help="synth, mnist (uses $NOLA_DATA_DIR) or mnist:<dir>")
    p.add_argument("--samples", type=int, default=None, help=f"training examples (default {ex.CI_SAMPLES} synthetic, all of MNIST)")
    p.add_argument("--full", action="store_true", help="full settings: MNIST, 200 epochs")
    p.add_argument("--synth-fallback", action="store_true", help="use synthetic data when MNIST is missing")
    _add_output(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nola", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-toy", help="train the 784-256-10 MLP")
    _add_train(p)

    p = sub.add_parser("rank-coverage", help="numerical rank of sampled deltas")
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--total-params", type=_int_list, default=None, help="sweep, e.g. 4,8,16 (default powers of two up to 2*d^2)")
    p.add_argument("--rank", type=int, default=2)
    p.add_argument("--samples", type=int, default=None, help="default 4*d^2")
    p.add_argument("--method", choices=("nola", "pranc", "both"), default="both")
    _add_output(p)

    p = sub.add_parser("bench", help="per-batch time of one NOLA and one PRANC layer")
    p.add_argument("--d", type=int, default=1024)
    p.add_argument("--k", type=int, default=1000, help="total basis count (NOLA splits it between A and B)")
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--batches", type=int, default=1)
    p.add_argument("--chunk-size", type=int, default=16)
    p.add_argument("--batch-rows", type=int, default=128)
    p.add_argument("--method", choices=("nola", "pranc", "both"), default="both")
    _add_output(p)

    p = sub.add_parser("quant-sweep", help="loss against coefficient bits for NOLA and LoRA")
    p.add_argument("--bits", type=_int_list, default=[8, 4, 3, 2])
    p.add_argument("--mode", choices=("ptq", "qat"), default="ptq")
    _add_train(p, method=False)
    p.set_defaults(params_per_layer=None)

    p = sub.add_parser("rank-ablation", help="NOLA at several ranks with a fixed coefficient count")
    p.add_argument("--ranks", type=_int_list, default=[1, 2, 4, 8])
    _add_train(p, method=False)

    p = sub.add_parser("export", help="train and write the adaptation as a .nola file")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--encoding", default="float32", help="float64, float32 or quantized:<bits>")
    _add_train(p)

    p = sub.add_parser("info", help="describe a .nola file")
    p.add_argument("file", type=Path)
    _add_output(p)
    return parser


def _config(args, **overrides) -> TrainConfig:
    epochs = args.epochs if args.epochs is not None else (ex.FULL_EPOCHS if args.full else ex.CI_EPOCHS)
    kw = dict(epochs=epochs, batch_size=args.batch_size, learning_rate=args.lr, optimizer=args.optimizer,
              params_per_layer=args.params_per_layer or 32, rank=args.rank, seed=args.seed, lora_rank=args.lora_rank)
    kw.update(overrides)
    return TrainConfig(**kw)


def _data(args):
    return ex.load_data(args.data, args.full, args.samples, args.synth_fallback, seed=args.seed)


def _methods(choice: str) -> tuple[str, ...]:
    return ("nola", "pranc") if choice == "both" else (choice,)


def write_table(path: Path, res: ex.ExperimentResult) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(res.columns)
        for row in res.rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def render_figure(path: Path, res: ex.ExperimentResult):
    from . import plotting

    if res.name == "train-toy" and res.rows:
        return plotting.loss_curve(path, [r[0] for r in res.rows], [r[1] for r in res.rows], res.params["method"])
    if res.name == "rank-coverage":
        series = {}
        for method, p, _, cov in res.rows:
            xs, ys = series.setdefault(method, ([], []))
            xs.append(p)
            ys.append(cov)
        return plotting.coverage_curve(path, series, res.params["d"])
    if res.name == "bench" and res.rows:
        timings = {m: res.metrics[f"{m}_ms_per_batch"] for m in res.params["methods"]}
        return plotting.timing_bars(path, timings)
    if res.name == "quant-sweep":
        bits = res.params["bits"]
        series = {m: [r[3] for r in res.rows if r[0] == m] for m in dict.fromkeys(r[0] for r in res.rows)}
        return plotting.metric_lines(path, bits, series, "bits", f"train loss ({res.params['mode']})")
    if res.name == "rank-ablation" and res.rows:
        return plotting.metric_lines(path, [r[0] for r in res.rows], {"nola": [r[3] for r in res.rows]}, "rank", "train loss", log_x=True)
    return None


def emit(res: ex.ExperimentResult, out_dir: Path, figures: bool = True) -> dict:
    """Write ``<name>.csv`` (and ``<name>.png``) under ``out_dir``; print and save the JSON summary."""
    out_dir.mkdir(parents=True, exist_ok=True)
    res.artifacts.append(str(write_table(out_dir / f"{res.name}.csv", res)))
    if figures:
        fig = render_figure(out_dir / f"{res.name}.png", res)
        if fig is not None:
            res.artifacts.append(str(fig))
    json_path = out_dir / f"{res.name}.json"
    res.artifacts.append(str(json_path))
    summary = res.to_dict()
    ex.validate_summary(summary)
    json_path.write_text(res.to_json() + "\n")
    if res.text:
        print(res.text)
    print(res.to_json())
    return summary


def run(args) -> ex.ExperimentResult:
    cmd = args.command
    if cmd == "train-toy":
        data, desc = _data(args)
        res, _ = ex.train_toy(args.method, _config(args), data, desc)
        return res
    if cmd == "rank-coverage":
        return ex.rank_coverage(args.d, args.total_params, args.rank, args.samples, _methods(args.method), args.seed)
    if cmd == "bench":
        return ex.bench(args.d, args.k, args.rank, args.batches, args.chunk_size, args.batch_rows, _methods(args.method), args.seed)
    if cmd == "quant-sweep":
        ex.check_bits(args.bits, args.mode)
        data, desc = _data(args)
        matched = args.params_per_layer is None
        return ex.quant_sweep(args.bits, args.mode, _config(args), data, desc, matched=matched)
    if cmd == "rank-ablation":
        ex.check_ranks(args.ranks)
        data, desc = _data(args)
        return ex.rank_ablation(args.ranks, _config(args), data, desc)
    if cmd == "export":
        ex.check_encoding(args.encoding)
        if args.method == "dense":
            raise UsageError("dense training has no adaptation to export")
        data, desc = _data(args)
        return ex.export(args.out, args.method, _config(args), data, args.encoding, desc)
    if cmd == "info":
        return ex.info(args.file)
    raise AssertionError(cmd)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        res = run(args)
        emit(res, args.out_dir, figures=not args.no_figures)
    except DomainError as err:
        print(f"nola {args.command}: usage error: {err}", file=sys.stderr)
        return 2
    except (FormatError, OSError, RuntimeError) as err:
        print(f"nola {args.command}: error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
