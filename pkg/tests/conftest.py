"""Shared fixtures.

The toy training runs take minutes, so their results are cached on disk
keyed by a hash of the package sources and configs. Set FSTA_NO_CACHE=1 to
force a fresh run.
"""

import hashlib
import json
import os
import pickle
import time
from pathlib import Path

import pytest

import fsta
from fsta.net import NetConfig
from fsta.train import DataConfig, TrainConfig, evaluate, train

TOY_MODES = ("fsta", "average")


def _source_digest(*configs) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(fsta.__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    h.update(json.dumps([repr(c) for c in configs]).encode())
    return h.hexdigest()[:16]


def _run_toy(mode, train_cfg, data_cfg, train_data, eval_data):
    net_cfg = NetConfig(fusion_mode=mode)
    start = time.perf_counter()
    res = train(net_cfg, train_cfg, train_data)
    seconds = time.perf_counter() - start
    return {
        "curve": res.curve,
        "seconds": seconds,
        "report": evaluate(res.params, net_cfg, eval_data),
        "params": {k: v.data for k, v in res.params.items()},
    }


@pytest.fixture(scope="session")
def toy_runs(request):
    """Default toy config trained with fsta and with average fusion, same seed and budget."""
    train_cfg, data_cfg = TrainConfig(), DataConfig()
    cache_dir = Path(request.config.rootpath) / ".pytest_cache" / "fsta-toy"
    key = _source_digest(train_cfg, data_cfg, NetConfig())
    cache = cache_dir / f"{key}.pkl"
    if cache.is_file() and not os.environ.get("FSTA_NO_CACHE"):
        with open(cache, "rb") as fh:
            return pickle.load(fh)
    train_data, eval_data = data_cfg.train_data(), data_cfg.eval_data()
    runs = {m: _run_toy(m, train_cfg, data_cfg, train_data, eval_data) for m in TOY_MODES}
    cache_dir.mkdir(parents=True, exist_ok=True)
    with open(cache, "wb") as fh:
        pickle.dump(runs, fh)
    return runs


@pytest.fixture(scope="session")
def criterion_log(request):
    lines = []
    request.config._fsta_criteria = lines
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_fsta_criteria", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
