#!/usr/bin/env python3
# Copyright 2026 The calibprune Authors
# SPDX-License-Identifier: Apache-2.0
"""Runs a small experiment through the CLI and recomputes every aggregate in
report.json from its per-replicate cells."""

import argparse
import json
import math
import statistics
import subprocess
import sys
import tempfile
from pathlib import Path


def run(cli, *args, cwd, ok=(0,)):
    proc = subprocess.run([cli, *args], cwd=cwd, capture_output=True, text=True)
    if proc.returncode not in ok:
        sys.exit(f"{' '.join(args)} exited {proc.returncode}: {proc.stderr}")
    return proc


def check(report):
    cells = report["cells"]
    cfg = report["config"]
    sources = [s["label"] for s in cfg["calib_sources"]]
    settings = cfg["pruning"]["sparsity"]
    expected = len(sources) * len(settings) * cfg["replicates"]
    assert len(cells) == expected, f"{len(cells)} cells, expected {expected}"
    assert len(report["aggregates"]) == len(sources) * len(settings)
    for agg in report["aggregates"]:
        values = [c["perplexity"] for c in cells
                  if c["source"] == agg["source"] and c["setting"] == agg["setting"] and c["perplexity"] is not None]
        failed = sum(1 for c in cells
                     if c["source"] == agg["source"] and c["setting"] == agg["setting"] and c["perplexity"] is None)
        assert agg["count"] == len(values), agg
        assert agg["failed"] == failed, agg
        assert agg["count"] + agg["failed"] == cfg["replicates"], agg
        if not values:
            continue
        mean = math.fsum(values) / len(values)
        std = statistics.stdev(values) if len(values) > 1 else 0.0
        for key, want in (("mean", mean), ("std", std), ("min", min(values)), ("max", max(values))):
            got = agg[key]
            assert math.isclose(got, want, rel_tol=1e-12, abs_tol=1e-12), f"{agg['source']}/{agg['setting']} {key}: {got} != {want}"
    return len(report["aggregates"])


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--cli", required=True)
    args = parser.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        cli = str(Path(args.cli).resolve())
        for kind, seed, size, name in (("english", 1, 8000, "a"), ("code", 3, 8000, "b"), ("english", 2, 3000, "h")):
            run(cli, "fixture", "--kind", kind, "--seed", str(seed), "--bytes", str(size), "--out", f"{name}.jsonl", cwd=tmp)
        run(cli, "train", "--corpus", "a.jsonl", "--out", "m.bin", "--steps", "20", "--batch", "4", "--seqlen", "32",
            "--d-model", "16", "--heads", "2", "--d-ff", "32", "--max-seq-len", "64", "--lr", "3e-3", cwd=tmp)
        config = {
            "model_path": "m.bin", "eval_corpus": "h.jsonl", "output_dir": "out",
            "calib_sources": [{"label": "A", "path": "a.jsonl"}, {"label": "B", "path": "b.jsonl"},
                              {"label": "G", "path": "b.jsonl", "mode": "self_generated"}],
            "pruning": {"method": "wanda", "sparsity": ["0.3", "0.6", "2:4"]},
            "n": 4, "L": 32, "replicates": 4, "seed": 3, "generation": {"N": 32},
        }
        Path(tmp, "cfg.json").write_text(json.dumps(config))
        run(cli, "experiment", "--config", "cfg.json", cwd=tmp)
        n = check(json.loads(Path(tmp, "out", "report.json").read_text()))
        # A source that cannot supply windows fails its cells but not the run.
        Path(tmp, "short.jsonl").write_text('{"text":"tiny"}\n')
        config["calib_sources"].append({"label": "S", "path": "short.jsonl"})
        config["output_dir"] = "partial"
        Path(tmp, "cfg.json").write_text(json.dumps(config))
        run(cli, "experiment", "--config", "cfg.json", cwd=tmp, ok=(2,))
        n += check(json.loads(Path(tmp, "partial", "report.json").read_text()))
    print(f"{n} aggregates match the per-replicate cells")


if __name__ == "__main__":
    main()
