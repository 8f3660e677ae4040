"""Command line entry point: ``python -m app <command>``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from tacq.correction import VARIANTS
from tacq.errors import ConfigError, TacqError

from . import pipelines
from .config import load_config, resolve_output_dir
from .schemas import RunConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2
EXIT_THRESHOLD = 3
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: Fehler: {message}\n")


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Konfigurationsdatei (dotted.key = value)")
    parser.add_argument("--seed", type=int, help="Wurzel-Seed")
    parser.add_argument("--out", type=Path, help="Ausgabeverzeichnis")
    parser.add_argument("--bits-w", type=int, dest="bits_w", help="Gewichtsbits")
    parser.add_argument("--bits-a", type=int, dest="bits_a", help="Aktivierungsbits")
    parser.add_argument("--lambda1", type=float, help="Gewicht des rQNSR-Terms")
    parser.add_argument("--lambda2", type=float, help="Regularisierung von K")
    parser.add_argument("--k-threshold", type=float, dest="k_threshold", help="Faktor der Maskenschwelle")
    parser.add_argument("--variant", choices=VARIANTS, help="Korrekturvariante")
    parser.add_argument("--log-level", default="INFO", help="Log-Level (Standard: INFO)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tacq", description="Zeitschrittabhängige Korrektur quantisierter Diffusionsmodelle")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    train = commands.add_parser("train", help="Rauschschätzer trainieren")
    _common(train)

    quantize = commands.add_parser("quantize", help="Modell quantisieren und kalibrieren")
    _common(quantize)
    quantize.add_argument("--model", type=Path, help="Modell-Checkpoint")

    correct = commands.add_parser("correct", help="Korrekturtabelle vorberechnen")
    _common(correct)
    correct.add_argument("--model", type=Path, help="Modell-Checkpoint")
    correct.add_argument("--qmodel", type=Path, help="Checkpoint des quantisierten Modells")

    sample = commands.add_parser("sample", help="Proben erzeugen")
    _common(sample)
    sample.add_argument("--model", type=Path, required=True, help="Modell- oder qmodel-Checkpoint")
    sample.add_argument("--table", type=Path, help="Korrekturtabelle")
    sample.add_argument("--n", type=int, help="Anzahl der Proben")
    sample.add_argument("--label", default="samples", help="Name der Ausgabedatei")
    sample.add_argument("--dump-trace", action="store_true", help="Trajektorie und Aktivierungen mitschneiden")

    evaluate = commands.add_parser("eval", help="Proben mit Referenz vergleichen")
    _common(evaluate)
    evaluate.add_argument("--samples", type=Path, required=True)
    evaluate.add_argument("--reference", type=Path)
    evaluate.add_argument("--threshold", type=float, help="Maximale Energiedistanz")

    ablate = commands.add_parser("ablate", help="Ablation über die Korrekturvarianten")
    _common(ablate)

    sweep = commands.add_parser("sweep-lambda", help="lambda1-Sweep")
    _common(sweep)
    sweep.add_argument("--values", type=float, nargs="+", help="lambda1-Werte")

    hist = commands.add_parser("hist", help="Aktivierungshistogramme aus einem Mitschnitt")
    _common(hist)
    hist.add_argument("--trace", type=Path, required=True)
    hist.add_argument("--layer")
    hist.add_argument("--position", type=int)
    hist.add_argument("--bins", type=int)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, object]:
    return {
        "seed": args.seed,
        "quant.weight_bits": args.bits_w,
        "quant.act_bits": args.bits_a,
        "correction.lambda1": args.lambda1,
        "correction.lambda2": args.lambda2,
        "correction.k_threshold": args.k_threshold,
        "correction.variant": args.variant,
    }


def _dispatch(args: argparse.Namespace, config: RunConfig, out: Path) -> int:
    command = args.command
    if command == "train":
        pipelines.run_train(config, out)
    elif command == "quantize":
        pipelines.run_quantize(config, out, args.model)
    elif command == "correct":
        pipelines.run_correct(config, out, args.model, args.qmodel)
    elif command == "sample":
        pipelines.run_sample(config, out, args.model, args.table, label=args.label, n=args.n, dump_trace=args.dump_trace)
    elif command == "eval":
        outcome = pipelines.run_eval(config, out, args.samples, args.reference, threshold=args.threshold)
        if not outcome.passed:
            print(f"Energiedistanz {outcome.report.energy:.6g} über der Schwelle", file=sys.stderr)
            return EXIT_THRESHOLD
    elif command == "ablate":
        summary = pipelines.run_ablate(config, out)
        sys.stdout.write(summary.to_text())
    elif command == "sweep-lambda":
        pipelines.run_sweep_lambda(config, out, args.values)
    elif command == "hist":
        pipelines.run_hist(
            args.trace, out, layer=args.layer, position=args.position, bins=args.bins or config.eval.hist_bins
        )
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=str(args.log_level).upper(), format=LOG_FORMAT)
    try:
        config = load_config(args.config, _overrides(args))
        out = resolve_output_dir(config, args.out)
        return _dispatch(args, config, out)
    except ConfigError as exc:
        print(f"Konfigurationsfehler: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TacqError as exc:
        print(f"Fehler: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
