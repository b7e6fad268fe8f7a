"""Run directory layout, exclusive locking and the structured logs written into it."""

from __future__ import annotations

import json
import os
import re
import shutil
import stat
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Any

from .errors import RunDirectoryLockedError
from .models import PromptTemplate

LOCK_NAME = ".lock"
CACHE_INDEX = "cache.json"

_ITERATION = re.compile(r"_iter(\d+)\.\w+$")


def _safe_unlink(path: Path) -> bool:
    """Try to delete a file robustly across OSes; return True if removed."""
    try:
        path.unlink()
        return True
    except PermissionError:
        try:
            os.chmod(path, stat.S_IWUSR | stat.S_IRUSR)
            path.unlink()
            return True
        except OSError:
            return False
    except FileNotFoundError:
        return False


def _dumps(record: dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


class RunDirectory:
    """
    Paths of one run and helpers that write into them.

    ::

        config.yaml
        train_log.jsonl              one line per generator step
        iterations.jsonl             one line per outer iteration
        checkpoints/generator_iterNN.pt
        prompts/prompt_iterNN.txt
        prompts/prompt_history.json
        surrogate.pt                 tiny backend only
        targets/<name>.pt
        reports/
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    # --- paths ---

    @property
    def config_path(self) -> Path:
        return self.root / "config.yaml"

    @property
    def train_log(self) -> Path:
        return self.root / "train_log.jsonl"

    @property
    def iterations_log(self) -> Path:
        return self.root / "iterations.jsonl"

    @property
    def surrogate_path(self) -> Path:
        return self.root / "surrogate.pt"

    @property
    def reports_dir(self) -> Path:
        return self.root / "reports"

    @property
    def prompt_history_path(self) -> Path:
        return self.root / "prompts" / "prompt_history.json"

    def checkpoint_path(self, iteration: int) -> Path:
        return self.root / "checkpoints" / f"generator_iter{iteration:02d}.pt"

    def prompt_path(self, iteration: int) -> Path:
        return self.root / "prompts" / f"prompt_iter{iteration:02d}.txt"

    def target_path(self, name: str) -> Path:
        return self.root / "targets" / f"{name}.pt"

    def latest_checkpoint(self) -> Path | None:
        return _latest(self.root / "checkpoints", "generator_iter*.pt")

    def latest_prompt(self) -> PromptTemplate | None:
        found = _latest(self.root / "prompts", "prompt_iter*.txt")
        if found is None:
            return None
        return PromptTemplate.from_text(found.read_text(encoding="utf-8"))

    # --- locking ---

    @contextmanager
    def lock(self) -> Iterator[RunDirectory]:
        """Hold ``.lock`` for the duration of the block.

        Raises:
            RunDirectoryLockedError: If another invocation holds the lock.
        """
        self.root.mkdir(parents=True, exist_ok=True)
        lock_path = self.root / LOCK_NAME
        try:
            fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunDirectoryLockedError(
                f"{self.root} is in use by another run (remove {lock_path} if that run is gone)"
            ) from None
        try:
            os.write(fd, str(os.getpid()).encode())
        finally:
            os.close(fd)
        try:
            yield self
        finally:
            _safe_unlink(lock_path)

    # --- writers ---

    def reset_logs(self) -> None:
        for path in (self.train_log, self.iterations_log, self.prompt_history_path):
            _safe_unlink(path)

    def reset_outputs(self) -> None:
        """Remove logs, checkpoints, prompt snapshots and reports of an earlier run.

        Cached surrogate and target weights stay; :meth:`is_cached` decides
        whether they still fit.
        """
        self.reset_logs()
        for pattern in ("checkpoints/generator_iter*.pt", "prompts/prompt_iter*.txt"):
            for path in self.root.glob(pattern):
                _safe_unlink(path)
        if self.reports_dir.is_dir():
            shutil.rmtree(self.reports_dir, ignore_errors=True)

    # --- cached models ---

    def _cache_index(self) -> dict[str, str]:
        index_path = self.root / CACHE_INDEX
        if not index_path.is_file():
            return {}
        data = json.loads(index_path.read_text(encoding="utf-8"))
        return {str(k): str(v) for k, v in data.items()}

    def is_cached(self, path: Path, key: str) -> bool:
        """Whether ``path`` exists and was built from the settings digested in ``key``."""
        name = path.relative_to(self.root).as_posix()
        return path.is_file() and self._cache_index().get(name) == key

    def remember(self, path: Path, key: str) -> None:
        index = self._cache_index()
        index[path.relative_to(self.root).as_posix()] = key
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / CACHE_INDEX).write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def append_jsonl(self, path: Path, record: dict[str, Any]) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("a", encoding="utf-8") as fh:
            fh.write(_dumps(record) + "\n")

    def write_prompt(self, iteration: int, prompt: PromptTemplate, details: dict[str, Any] | None) -> Path:
        """Prompt snapshot plus an entry in the history sidecar."""
        out = self.prompt_path(iteration)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(str(prompt) + "\n", encoding="utf-8")

        history: list[dict[str, Any]] = []
        if self.prompt_history_path.is_file():
            history = json.loads(self.prompt_history_path.read_text(encoding="utf-8"))
        history.append({"iteration": iteration, "prompt": str(prompt), "defense": details})
        self.prompt_history_path.write_text(
            json.dumps(history, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        return out


def _latest(directory: Path, pattern: str) -> Path | None:
    """The file with the highest iteration number, not the last name in sort order."""
    numbered = [
        (int(match.group(1)), path)
        for path in directory.glob(pattern)
        if (match := _ITERATION.search(path.name))
    ]
    return max(numbered)[1] if numbered else None


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    src = Path(path)
    if not src.is_file():
        raise FileNotFoundError(f"log not found: {src}")
    with src.open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
