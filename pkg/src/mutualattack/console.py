"""Prefixed, coloured console output used by the CLI and long-running loops."""

import logging
import sys

PREFIX = "[mutualattack]"

_GREEN = "\033[92m"
_YELLOW = "\033[93m"
_RED = "\033[91m"
_RESET = "\033[0m"


def info(message: str) -> None:
    print(f"{PREFIX} {message}")


def success(message: str) -> None:
    print(f"{_GREEN}{PREFIX} {message}{_RESET}")


def warn(message: str) -> None:
    print(f"{_YELLOW}{PREFIX} Warning: {message}{_RESET}")


def error(message: str) -> None:
    print(f"{_RED}{PREFIX} Error: {message}{_RESET}", file=sys.stderr)


def configure_logging(verbose: bool = False) -> None:
    """Route library loggers to stderr; debug level when ``verbose``."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format=f"{PREFIX} %(name)s %(levelname)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )
