"""Drive the whole command-line workflow in one call (used by scripts and tests)."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path
from typing import Optional

import yaml

from . import cli
from .pipeline import STAGES


def _run(argv: list[str]) -> float:
    t0 = time.perf_counter()
    code = cli.main(argv)
    if code != 0:
        raise RuntimeError(f"`meascascade {' '.join(argv)}` exited with {code}")
    return time.perf_counter() - t0


def end_to_end(workdir: str | Path, base: Optional[dict] = None, jobs: int = 1) -> dict:
    """generate, train x3, tune-threshold, predict on the test split, evaluate.

    ``base`` is a config mapping layered over the scratch preset. Returns
    timings, the evaluation report and the output locations.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    base_path = workdir / "base.yaml"
    base_path.write_text(yaml.safe_dump(base or {}, sort_keys=True))
    run, out = workdir / "run", workdir / "pred"
    config, tuned = run / "config.yaml", run / "config.tuned.yaml"
    times = {"generate": _run(["-q", "generate", "--out", str(run), "--config", str(base_path)])}
    for stage in STAGES:
        times[f"train_{stage}"] = _run(["-q", "train", "--stage", stage, "--config", str(config)])
    times["tune"] = _run(["-q", "tune-threshold", "--config", str(config), "--out", str(tuned)])
    times["predict"] = _run(["-q", "predict", "--config", str(tuned), "--in", str(run / "test"),
                             "--out", str(out / "pred.tsv"), "--jobs", str(jobs)])
    report_path = workdir / "report.json"
    times["evaluate"] = _run(["-q", "evaluate", "--pred", str(out / "pred.tsv"), "--gold", str(run / "test"),
                              "--json", str(report_path)])
    times["total"] = sum(times.values())
    return {"times": times, "report": json.loads(report_path.read_text()), "run": run, "pred": out,
            "report_path": report_path, "tuned_config": tuned}


def digest_tree(root: str | Path, patterns=("*",)) -> dict:
    """sha256 of every file under ``root`` (relative path -> hex digest)."""
    root = Path(root)
    out = {}
    for pattern in patterns:
        for p in sorted(root.rglob(pattern)):
            if p.is_file():
                out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return dict(sorted(out.items()))


def stage_history(run: str | Path, stage: str) -> list[dict]:
    path = Path(run) / "checkpoints" / f"{stage}_log.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
