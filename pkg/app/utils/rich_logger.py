from pathlib import Path
from rich.console import Console
from rich.logging import RichHandler
import logging

LOG_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
RUN_LOG = "run.log"


def setup_rich_logging(level=logging.INFO):
    """
    Sets up logging with RichHandler for pretty console output.
    Call this early in the entry point (main.py) before the pipeline modules are imported.
    Logs go to stderr; stdout carries only the JSON result.
    """
    logging.basicConfig(
        level=level,
        format=LOG_FORMAT,
        datefmt=DATE_FORMAT,
        handlers=[RichHandler(console=Console(stderr=True), rich_tracebacks=True, show_time=False, show_level=True, show_path=True)],
        force=True,
    )
    # matplotlib and PIL are chatty at DEBUG
    for noisy in ("matplotlib", "PIL"):
        logging.getLogger(noisy).setLevel(max(level, logging.WARNING))


def attach_run_log(out_dir: Path) -> logging.Handler:
    """
    Mirrors every record into <out_dir>/run.log, plain text, for the length of one command.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / RUN_LOG, encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    logging.getLogger().addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler) -> None:
    logging.getLogger().removeHandler(handler)
    handler.close()


def get_rich_logger(name: str) -> logging.Logger:
    """
    Returns a logger instance with the given name, using RichHandler.
    """
    return logging.getLogger(name)
