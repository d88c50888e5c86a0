import json
from pathlib import Path

import pytest

from turnterm.config import RunConfig
from turnterm.pipeline import run_pipeline
from turnterm.synthetic import generate_synthetic


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Small synthetic corpus on disk: 240 samples over 4 shows, strong cue."""
    d = tmp_path_factory.mktemp("synth")
    generate_synthetic(240, 4, 1.0, 0.43, seed=3, out_dir=d)
    return d


@pytest.fixture(scope="session")
def small_run(tmp_path_factory, synth_dir):
    """Full pipeline over the small corpus, one seed, one train setting."""
    out = tmp_path_factory.mktemp("run")
    config = RunConfig(manifest=str(synth_dir / "manifest.jsonl"), out=str(out),
                       train_settings=["ref_auto"], n_seeds=1)
    results = run_pipeline(config)
    return config, results


def write_jsonl(path, rows):
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")
