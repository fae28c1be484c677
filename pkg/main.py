"""
HLSIRM - Command-Line Entry Point

Hierarchical latent space item response model: simulate data, fit the
model by MCMC and analyze the posterior.

Exit codes: 0 success, 1 error, 2 sampler health check failed.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from commands import COMMANDS
from commands.context import ERROR_DUMP_JSON
from config import load_run_config, settings
import storage
from utils.errors import HlsirmError

logger = logging.getLogger("hlsirm")

EXIT_OK = 0
EXIT_ERROR = 1

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def configure_logging(level: str) -> None:
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT, stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Run-config JSON document")
    common.add_argument("--seed", type=int, help="Override the run seed")
    common.add_argument("--threads", type=int, help="Worker threads for group updates")
    common.add_argument("--out", help="Output directory")

    parser = argparse.ArgumentParser(prog=settings.APP_NAME, description=__doc__.strip().splitlines()[2])
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.APP_VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers, [common])
    return parser


def write_error_dump(out: Optional[str], exc: HlsirmError) -> Optional[Path]:
    """Persist structured error details (e.g. the offending state) next to the artifacts."""
    if not exc.details or out is None:
        return None
    path = Path(out) / ERROR_DUMP_JSON
    try:
        storage.write_json(path, {"error": type(exc).__name__, "message": exc.message, "details": exc.details})
    except OSError:
        logger.exception("Could not write error dump to %s", path)
        return None
    return path


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(settings.LOG_LEVEL)
    logger.info("%s v%s: %s", settings.APP_NAME, settings.APP_VERSION, args.command)

    out = args.out
    try:
        config = load_run_config(args.config, {"seed": args.seed, "threads": args.threads, "out": args.out})
        out = config.out
        if getattr(args, "resume", None) is False:
            config.fit.resume = False
        return args.handler(config)
    except HlsirmError as exc:
        logger.error("%s: %s", type(exc).__name__, exc.message)
        for error in exc.details.get("errors", []):
            logger.error("  %s: %s", error.get("field"), error.get("message"))
        dump = write_error_dump(out, exc)
        if dump is not None:
            logger.error("Details written to %s", dump)
        return EXIT_ERROR
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
