"""Command-line pipeline driver.

Subcommands: synth, pretrain, crossval, saliency, filters. Each run writes
its fully resolved config and a timestamped log next to its outputs; all
numeric artifacts (images, CSVs, SVGs, checkpoints) are bit-identical across
re-runs with the same config and seed - only the log carries timestamps.

Exit codes: 0 success, 2 config error, 3 missing input, 4 runtime failure.
stderr carries a one-line machine-parseable reason.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import evaluate as E
from . import interpret as I
from . import model as M
from . import train as TR
from .config import ConfigError, RunConfig, parse_config_file
from .data import generate_dataset, load_dataset, load_pgm, save_dataset

log = logging.getLogger("lucenet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4


class MissingInputError(FileNotFoundError):
    pass


def _load_config(args) -> RunConfig:
    file_values = None
    if args.config:
        if not Path(args.config).exists():
            raise MissingInputError(f"config file {args.config}")
        file_values = parse_config_file(args.config)
    overrides = {"out": args.out, "seed": args.seed, "jobs": args.jobs}
    return RunConfig.resolve(file_values, overrides)


_log_handler: logging.Handler | None = None


def _prepare_out(config: RunConfig) -> Path:
    global _log_handler
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    config.write_resolved(out / "config.resolved.txt")
    root = logging.getLogger()
    if _log_handler is not None:
        root.removeHandler(_log_handler)
        _log_handler.close()
    _log_handler = logging.FileHandler(out / "run.log", encoding="utf-8")
    _log_handler.setFormatter(
        logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    root.setLevel(logging.INFO)
    root.addHandler(_log_handler)
    return out


def cmd_synth(config: RunConfig) -> int:
    out = _prepare_out(config)
    samples = generate_dataset(config.synth_params())
    manifest = save_dataset(samples, out / "dataset")
    n_loose = sum(1 for s in samples if s.label == "loose")
    n_fixed = len(samples) - n_loose
    print(f"wrote {len(samples)} images (loose {n_loose}, well_fixed {n_fixed}) "
          f"-> {manifest}")
    log.info("synth: %d images at %s", len(samples), manifest)
    return EXIT_OK


def cmd_pretrain(config: RunConfig) -> int:
    out = _prepare_out(config)
    path = out / "pretext.ckpt"
    _, accuracy = TR.pretext_pretrain(config.model_config(),
                                      config.pretext_config(), path)
    print(f"pretext backbone -> {path} (held-out accuracy {accuracy:.3f})")
    log.info("pretrain: accuracy %.4f -> %s", accuracy, path)
    return EXIT_OK


def _resolve_manifest(config: RunConfig, out: Path) -> Path:
    manifest = config["data.manifest"]
    path = Path(manifest) if manifest else out / "dataset" / "manifest.csv"
    if not path.exists():
        raise MissingInputError(f"dataset manifest {path}")
    return path


def cmd_crossval(config: RunConfig) -> int:
    out = _prepare_out(config)
    dataset = load_dataset(_resolve_manifest(config, out))
    regime = config["train.regime"]
    regimes = ("pretrained", "retrained") if regime == "both" else (regime,)
    if regime not in ("pretrained", "retrained", "both"):
        raise ConfigError(f"train.regime must be pretrained/retrained/both, "
                          f"got {regime!r}")
    if "pretrained" in regimes:
        ckpt = config["train.pretext_checkpoint"]
        if not ckpt:
            raise ConfigError("pretrained regime needs train.pretext_checkpoint")
        if not Path(ckpt).exists():
            raise MissingInputError(f"pretext checkpoint {ckpt}")

    mean_aucs: dict[str, float] = {}
    for reg in regimes:
        result = E.cross_validate(dataset, config.model_config(),
                                  config.train_config(reg), k=config["eval.k"],
                                  seed=config["seed"],
                                  stratified=config["eval.stratified"],
                                  jobs=config["jobs"])
        E.report_to_csv(result.report, out / f"report_{reg}.csv")
        E.report_to_svg(result.report, out / f"roc_{reg}.svg",
                        reader_point=config.reader_point())
        for fold, model in enumerate(result.models):
            M.save_checkpoint(model, out / f"fold{fold}_{reg}.ckpt")
        mean_aucs[reg] = result.report.mean_auc
        print(f"{reg}: mean AUC {result.report.mean_auc:.4f} over "
              f"{config['eval.k']} folds -> report_{reg}.csv")
        log.info("crossval %s: mean auc %.4f", reg, result.report.mean_auc)
    if len(regimes) == 2:
        print(f"comparison: pretrained mean AUC {mean_aucs['pretrained']:.4f} "
              f"vs retrained mean AUC {mean_aucs['retrained']:.4f}")
    return EXIT_OK


def _load_model(args) -> M.Model:
    if not args.checkpoint or not Path(args.checkpoint).exists():
        raise MissingInputError(f"checkpoint {args.checkpoint}")
    return M.load_checkpoint(args.checkpoint)


def cmd_saliency(config: RunConfig, args) -> int:
    out = _prepare_out(config)
    model = _load_model(args)
    if not args.image or not Path(args.image).exists():
        raise MissingInputError(f"image {args.image}")
    pixels = load_pgm(args.image)
    sal = I.saliency(model, pixels)
    stem = Path(args.image).stem
    ppm = out / f"saliency_{stem}.ppm"
    pgm = out / f"saliency_{stem}.pgm"
    I.save_heatmap(sal, pixels, ppm, pgm)
    print(f"saliency heatmap -> {ppm} (+ {pgm})")
    return EXIT_OK


def _panel_grid(n: int) -> tuple[int, int]:
    if n % 8 == 0:
        return (n // 8, 8)
    rows = max(1, int(n ** 0.5))
    cols = -(-n // rows)
    return (rows, cols)


def cmd_filters(config: RunConfig, args) -> int:
    out = _prepare_out(config)
    model = _load_model(args)
    panel = I.build_panel(model, args.layer, config.ascent_config())
    grid = _panel_grid(len(panel.images))
    path = out / f"filters_{panel.layer.replace('.', '_')}.ppm"
    I.save_panel(panel, grid, path)
    print(f"{len(panel.images)}-tile panel for {panel.layer} -> {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--out", help="output directory (overrides config)")
    common.add_argument("--seed", type=int, help="master seed (overrides config)")
    common.add_argument("--jobs", type=int, help="parallel fold workers")

    parser = argparse.ArgumentParser(
        prog="lucenet",
        description="synthetic-radiograph implant-loosening pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common],
                   help="generate the synthetic dataset")
    sub.add_parser("pretrain", parents=[common],
                   help="train the pretext backbone checkpoint")
    sub.add_parser("crossval", parents=[common],
                   help="k-fold cross-validated training and ROC report")
    p_sal = sub.add_parser("saliency", parents=[common],
                           help="saliency heatmap for one image")
    p_sal.add_argument("--checkpoint", required=True)
    p_sal.add_argument("--image", required=True, help="input PGM")
    p_fil = sub.add_parser("filters", parents=[common],
                           help="activation-maximisation filter panel")
    p_fil.add_argument("--checkpoint", required=True)
    p_fil.add_argument("--layer", default="first",
                       help='"first", "last", or a conv layer name')
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse errors are config errors
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        config = _load_config(args)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "pretrain":
            return cmd_pretrain(config)
        if args.command == "crossval":
            return cmd_crossval(config)
        if args.command == "saliency":
            return cmd_saliency(config, args)
        if args.command == "filters":
            return cmd_filters(config, args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingInputError as exc:
        print(f"error: missing-input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except Exception as exc:  # noqa: BLE001 - single boundary for exit code 4
        print(f"error: runtime: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
