from app.utils.rich_logger import attach_run_log, detach_run_log, setup_rich_logging
from config.settings import settings
import argparse
import json
import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import List, Optional

setup_rich_logging(getattr(logging, settings.LOG_LEVEL, logging.INFO))

from pydantic import ValidationError
from app.cli.commands import COMMANDS
from app.cli.config_loader import load_run_config, resolve_device, write_resolved_config
from app.utils.exceptions import PipelineError
from app.utils.error_handlers import (
    add_exception_handler,
    handle_exception,
    pipeline_error_handler,
    validation_exception_handler,
    general_exception_handler,
)
from app.utils.response import success_response

logger = logging.getLogger("vitiac-seg")

# Register exception handlers
add_exception_handler(PipelineError, pipeline_error_handler)
add_exception_handler(ValidationError, validation_exception_handler)
add_exception_handler(Exception, general_exception_handler)


def global_flags() -> argparse.ArgumentParser:
    """Flags accepted before or after the subcommand"""
    flags = argparse.ArgumentParser(add_help=False)
    flags.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    flags.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="YAML run config")
    flags.add_argument("--out-dir", type=Path, default=argparse.SUPPRESS, help="run directory for every output")
    flags.add_argument("--device", default=argparse.SUPPRESS, help="auto | cpu | cuda | cuda:N")
    flags.add_argument("--set", dest="overrides", action="append", default=argparse.SUPPRESS,
                       metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")
    flags.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)
    return flags


def build_parser() -> argparse.ArgumentParser:
    flags = global_flags()
    parser = argparse.ArgumentParser(prog=settings.PROJECT_TITLE, description=settings.PROJECT_DESCRIPTION,
                                     parents=[flags])
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.PROJECT_VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for module in COMMANDS:
        module.register(subparsers, [flags])
    return parser


def default_run_dir(command: str) -> Path:
    return settings.RUNS_DIR / f"{command}-{datetime.now().strftime('%Y%m%d-%H%M%S')}"


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "verbose", False) or settings.DEBUG:
        setup_rich_logging(logging.DEBUG)
    logger.debug(f"environment {settings.ENVIRONMENT}, deterministic={settings.DETERMINISTIC}")

    run_log = None
    try:
        cfg = load_run_config(
            config_path=getattr(args, "config", None),
            overrides=getattr(args, "overrides", None) or [],
            seed=getattr(args, "seed", None),
            device=getattr(args, "device", None),
        )
        out_dir = Path(getattr(args, "out_dir", None) or default_run_dir(args.command))
        run_log = attach_run_log(out_dir)
        resolved = write_resolved_config(cfg, out_dir)
        device = resolve_device(cfg.device)
        logger.info(f"[{args.command}] run directory {out_dir}, seed {cfg.seed}, device {device}")
        data = args.handler(args, cfg, out_dir, device)
    except Exception as exc:
        return handle_exception(args.command, exc)
    finally:
        if run_log is not None:
            detach_run_log(run_log)

    data = {"command": args.command, "out_dir": str(out_dir), "resolved_config": str(resolved), **data}
    sys.stdout.write(json.dumps(success_response(data), default=str) + "\n")
    sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
