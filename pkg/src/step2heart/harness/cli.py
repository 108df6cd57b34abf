"""``step2heart`` command line.

Exit codes: 0 success, 1 runtime failure, 2 missing upstream artifact (the
message names the stage to run first), 3 invalid configuration (the message
names the field).
"""

import os

# BLAS thread caps must be in the environment before numpy is first imported
_threads = os.environ.get("STEP2HEART_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402

from ..errors import ConfigError, MissingArtifactError, Step2HeartError  # noqa: E402
from .config import SHIPPED_CONFIGS, ExperimentConfig, load_config, shipped_config_path  # noqa: E402
from . import pipeline  # noqa: E402
from .report import report  # noqa: E402

EXIT_OK, EXIT_FAIL, EXIT_MISSING, EXIT_CONFIG = 0, 1, 2, 3
COMMANDS = ("generate", "pretrain", "extract", "evaluate", "report", "all")


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage, which would collide with
    "missing artifact"; report usage errors as configuration errors instead."""

    def error(self, message):
        raise ConfigError(message, field="argv")


def _cutoffs(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty cutoff list")
    return vals


def build_parser():
    parser = _Parser(prog="step2heart", description="Step2Heart pre-training and transfer runs")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default="desk",
                       help=f"JSON config path or a shipped name {SHIPPED_CONFIGS} (default: desk)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=".", help="output root; runs go to <out>/runs/<run_id>")
        if name in ("pretrain", "extract", "evaluate", "all"):
            p.add_argument("--variant", choices=("at", "art", "ae"), default=None,
                           help="restrict to one model variant")
        if name in ("pretrain", "all"):
            p.add_argument("--jobs", type=int, default=None,
                           help="variants trained in parallel processes "
                                "(default: one per CPU, at most one per variant)")
        if name in ("evaluate", "all"):
            p.add_argument("--cutoff", type=_cutoffs, default=None,
                           help="comma-separated explained-variance cutoffs")
    return parser


def resolve_config(arg, seed=None):
    path = shipped_config_path(arg) if arg in SHIPPED_CONFIGS and not os.path.exists(arg) else arg
    config = load_config(path)
    if seed is not None:
        config = config.with_seed(seed)
    return config


def run(args, stdout=sys.stdout):
    config = resolve_config(args.config, args.seed)
    out = args.out
    variant = getattr(args, "variant", None)
    cutoffs = getattr(args, "cutoff", None)
    cmd = args.command
    jobs = getattr(args, "jobs", None)
    if jobs is None:
        jobs = os.cpu_count() or 1
    elif jobs < 1:
        raise ConfigError(f"--jobs must be at least 1, got {jobs}", field="--jobs")
    if cmd in ("generate", "all"):
        pipeline.stage_generate(config, out)
    if cmd in ("pretrain", "all"):
        pipeline.stage_pretrain(config, out, variant, jobs)
    if cmd in ("extract", "all"):
        pipeline.stage_extract(config, out, variant)
    if cmd in ("evaluate", "all"):
        pipeline.stage_evaluate(config, out, variant, cutoffs)
    if cmd in ("report", "all"):
        run_dir, manifest = pipeline.open_run(config, out)
        manifest.require(run_dir, "evaluate", ["results.csv"])
        report(os.path.join(run_dir, "results.csv"), out_dir=run_dir, stream=stdout)
        manifest.mark(run_dir, "report", ["summary.json", "report.txt"])
    stdout.write(f"{cmd}: ok ({pipeline.run_dir_for(config, out)})\n")
    return EXIT_OK


def main(argv=None, stdout=None, stderr=None):
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=stderr)
        return run(args, stdout)
    except ConfigError as exc:
        stderr.write(f"error: invalid configuration field '{exc.field or '?'}': {exc}\n")
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        stderr.write(f"error: {exc} (missing stage: {exc.stage})\n")
        return EXIT_MISSING
    except Step2HeartError as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_FAIL
    except OSError as exc:
        stderr.write(f"error: {exc}\n")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
