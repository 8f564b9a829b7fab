import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from diffguard.harness import config_hash, execute, load_config  # noqa: E402
from diffguard.neural import load_checkpoint  # noqa: E402

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
CRITERIA = {}


def record_criterion(number: int, passed: bool, detail: str):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])


def _train_cached(cache_root: Path, name: str) -> Path:
    cfg = load_config(CONFIGS / f"{name}.json")
    out = cache_root / f"{name}-{config_hash(cfg)[:12]}"
    ckpt = out / "checkpoint.json"
    if not ckpt.exists():
        execute(cfg, out)
    return ckpt


@pytest.fixture(scope="session")
def trained_paths(request):
    """Checkpoints trained from the shipped configs, cached by config hash across sessions."""
    root = Path(request.config.cache.mkdir("trained-models"))
    return {
        "classifier": str(_train_cached(root, "train_classifier")),
        "denoiser": str(_train_cached(root, "train_denoiser")),
    }


@pytest.fixture(scope="session")
def trained_models(trained_paths):
    return load_checkpoint(trained_paths["denoiser"]), load_checkpoint(trained_paths["classifier"])


@pytest.fixture(scope="session")
def shipped_config(trained_paths):
    """Load a shipped config with its checkpoints pointed at the session's trained models."""

    def load(name, **overrides):
        cfg = load_config(CONFIGS / f"{name}.json")
        if "checkpoints" in cfg:
            cfg["checkpoints"] = dict(trained_paths)
        cfg.update(overrides)
        return cfg

    return load
