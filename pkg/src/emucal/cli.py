"""Command-line interface.

Subcommands mirror the pipeline stages (gen-targets, doe, train, calibrate,
imis, compare, pipeline).  Exit codes are a stable contract: 0 success,
1 stage failure, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import ann, crc, doe, pipeline
from . import calibrate as cal
from .posterior import Posterior

log = logging.getLogger("emucal")

EXIT_OK = 0
EXIT_STAGE_FAILURE = 1
EXIT_CONFIG_ERROR = 2

LOCK_FILE = ".emucal.lock"


class _OutputDirLock:
    """One pipeline instance per output directory."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / LOCK_FILE
        self.fd = None

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise pipeline.ConfigError(
                f"output directory is locked by another run ({self.path}); "
                "remove the lock file if no emucal process is active")
        os.write(self.fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)
        return False


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emucal",
        description="Bayesian calibration of a colorectal-cancer natural-history "
                    "model through a neural-network emulator, with an "
                    "importance-sampling baseline.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="debug-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", type=str, default=None,
                       help="JSON config file (keys as in config_resolved.json)")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--out-dir", type=str, default=None,
                       help="output directory override")
        p.add_argument("--scale", choices=sorted(pipeline.SCALE_PRESETS),
                       default=None, help="size preset override")

    for name, descr in [
        ("gen-targets", "generate synthetic calibration targets"),
        ("doe", "run the Latin hypercube design through the simulator"),
        ("train", "train the emulator on an existing design"),
        ("calibrate", "sample the emulator posterior with HMC"),
        ("imis", "calibrate the simulator directly with IMIS"),
        ("pipeline", "run every stage end to end"),
    ]:
        p = sub.add_parser(name, help=descr)
        add_common(p)

    p = sub.add_parser("compare",
                       help="compare two posterior CSVs against true values")
    p.add_argument("posterior_a", type=str, help="posterior CSV of method A")
    p.add_argument("posterior_b", type=str, help="posterior CSV of method B")
    p.add_argument("truth", type=str,
                   help="JSON file with true parameter values (flat mapping or "
                        "a 'parameters' object)")
    p.add_argument("--out", type=str, default=None,
                   help="also write the report JSON here")
    return parser


def _resolve(args) -> dict:
    user = pipeline.load_config_file(args.config) if args.config else {}
    return pipeline.resolve_config(user, scale=args.scale, seed=args.seed,
                                   out_dir=args.out_dir)


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cmd_gen_targets(cfg: dict) -> int:
    with _OutputDirLock(cfg["out_dir"]):
        pipeline.run_gen_targets(cfg, _out_dir(cfg))
    return EXIT_OK


def _cmd_doe(cfg: dict) -> int:
    with _OutputDirLock(cfg["out_dir"]):
        pipeline.run_doe_stage(cfg, _out_dir(cfg))
    return EXIT_OK


def _require_artifact(out_dir: Path, key: str, hint: str) -> Path:
    path = out_dir / pipeline.ARTIFACTS[key]
    if not path.exists():
        raise pipeline.ConfigError(f"missing {path}; run `emucal {hint}` first")
    return path


def _cmd_train(cfg: dict) -> int:
    with _OutputDirLock(cfg["out_dir"]):
        out = _out_dir(cfg)
        design = doe.Design.from_csv(_require_artifact(out, "design", "doe"))
        pipeline.run_train_stage(cfg, out, design)
    return EXIT_OK


def _cmd_calibrate(cfg: dict) -> int:
    with _OutputDirLock(cfg["out_dir"]):
        out = _out_dir(cfg)
        model = ann.AnnModel.load(_require_artifact(out, "model", "train"))
        targets = crc.TargetSet.from_csv(
            _require_artifact(out, "targets", "gen-targets"))
        pipeline.run_calibrate_stage(cfg, out, model, targets)
    return EXIT_OK


def _cmd_imis(cfg: dict) -> int:
    with _OutputDirLock(cfg["out_dir"]):
        out = _out_dir(cfg)
        targets = crc.TargetSet.from_csv(
            _require_artifact(out, "targets", "gen-targets"))
        pipeline.run_imis_stage(cfg, out, targets)
    return EXIT_OK


def _cmd_pipeline(cfg: dict) -> int:
    with _OutputDirLock(cfg["out_dir"]):
        result = pipeline.run_pipeline(cfg)
    print(pipeline.format_comparison_table(result.comparison))
    return EXIT_OK


def _load_truth(path: str) -> dict:
    if not Path(path).exists():
        raise pipeline.ConfigError(f"truth file not found: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    if "parameters" in doc and isinstance(doc["parameters"], dict):
        doc = doc["parameters"]
    return {k: float(v) for k, v in doc.items()}


def _cmd_compare(args) -> int:
    for p in (args.posterior_a, args.posterior_b):
        if not Path(p).exists():
            raise pipeline.ConfigError(f"posterior file not found: {p}")
    post_a = Posterior.from_csv(args.posterior_a, method="a")
    post_b = Posterior.from_csv(args.posterior_b, method="b")
    if post_a.param_names != post_b.param_names:
        raise pipeline.ConfigError(
            f"posterior parameter columns differ: {post_a.param_names} "
            f"vs {post_b.param_names}")
    truth = _load_truth(args.truth)
    missing = [n for n in post_a.param_names if n not in truth]
    if missing:
        raise pipeline.ConfigError(f"truth file lacks parameters: {missing}")
    report = pipeline.compare_posteriors(post_a.draws, post_b.draws, truth,
                                         post_a.param_names)
    print(pipeline.format_comparison_table(report))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr)

    try:
        if args.command == "compare":
            return _cmd_compare(args)
        cfg = _resolve(args)
        handler = {
            "gen-targets": _cmd_gen_targets,
            "doe": _cmd_doe,
            "train": _cmd_train,
            "calibrate": _cmd_calibrate,
            "imis": _cmd_imis,
            "pipeline": _cmd_pipeline,
        }[args.command]
        return handler(cfg)
    except pipeline.ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG_ERROR
    except Exception as exc:  # stage failure: keep partial artifacts
        log.error("stage failed: %s", exc, exc_info=True)
        return EXIT_STAGE_FAILURE


if __name__ == "__main__":
    sys.exit(main())
