import json
import logging
import random
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import torch
from rich.logging import RichHandler

from app.config import LOG_LEVEL


def configure_logging(level: str = LOG_LEVEL) -> None:
    """Install a rich console handler on the root logger."""
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=False)],
        force=True,
    )


def seed_everything(seed: int) -> np.random.Generator:
    """Seed python, numpy and torch; return a fresh numpy generator."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def derive_seed(*parts: int) -> int:
    """Mix integers into one 32-bit seed, stable across processes."""
    return int(np.random.SeedSequence([abs(int(p)) for p in parts]).generate_state(1)[0])


def require_positive(name: str, values: Iterable[float]) -> None:
    for value in values:
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value}")


class JsonLinesWriter:
    """Append-only JSON-lines sink used for metrics and per-sample results."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8")
        self.count = 0

    def write(self, record: dict[str, Any]) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()
        self.count += 1

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "JsonLinesWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_json_lines(path: Path) -> list[dict[str, Any]]:
    with Path(path).open(encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
