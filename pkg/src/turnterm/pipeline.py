"""Stage runner: stats, chunk, transcribe, encode, train, evaluate, analyze, report.

Every stage writes under ``<out>/<stage>/`` together with the exact config
used and a ``.done`` marker carrying the config hash; a stage whose marker
matches the current config is skipped.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from .config import RunConfig
from .corpus import Corpus, corpus_stats, load_manifest
from .encoders import EmbeddingCache, encode_audio, encode_text, get_provider
from .errors import JobFailure, MissingPrerequisite
from .experiment import EmbeddingSet, GridSpec, ResultsStore, run_grid
from .preprocess import (
    ChunkMode,
    ChunkSpec,
    InputSetting,
    Transcript,
    TranscriptSource,
    get_asr,
    make_chunks,
    parse_setting,
    read_chunk_index,
    read_transcripts,
    transcribe,
    write_chunk_index,
    write_transcripts,
)

log = logging.getLogger(__name__)

STAGES = ("stats", "chunk", "transcribe", "encode", "train", "evaluate", "analyze", "report")


def stage_dir(config: RunConfig, stage: str) -> Path:
    return Path(config.out) / stage


def _done(config, stage) -> bool:
    marker = stage_dir(config, stage) / ".done"
    return marker.exists() and marker.read_text().strip() == config.hash()


def _mark(config, stage):
    d = stage_dir(config, stage)
    config.write(d)
    (d / ".done").write_text(config.hash() + "\n")


def _require(config, stage, needed):
    if not _done(config, needed):
        raise MissingPrerequisite(stage, f"run stage {needed!r} first")


def write_csv(path, rows, header, stamp=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if stamp:
            fh.write(f"# turnterm {stamp['version']} config={stamp['config_hash']}\n")
        w = csv.DictWriter(fh, fieldnames=header)
        w.writeheader()
        w.writerows(rows)


def run_stats(config: RunConfig, corpus: Corpus) -> dict:
    d = stage_dir(config, "stats")
    stats = corpus_stats(corpus)
    from .corpus import BUCKETS

    write_csv(d / "labels.csv", stats.label_table_rows(), ["label", "count", *BUCKETS], config.stamp())
    write_csv(d / "shows.csv", stats.show_table_rows(), ["show", "samples", "duration_s"], config.stamp())
    stamp = config.stamp()
    header = f"# turnterm {stamp['version']} config={stamp['config_hash']}\n"
    (d / "stats.txt").write_text(header + stats.format_table() + "\n", encoding="utf-8")
    return {"total": stats.total}


def _settings(config):
    return sorted({parse_setting(s).value for s in (*config.train_settings, *config.test_settings)})


def run_chunk(config, corpus) -> dict:
    d = stage_dir(config, "chunk")
    counts = {}
    for mode in sorted({parse_setting(s).chunk_mode.value for s in _settings(config)}):
        spec = ChunkSpec(ChunkMode(mode), config.window)
        chunks = make_chunks(corpus.samples, spec, config.media_root, d)
        write_chunk_index(chunks, d / f"chunks_{mode}.jsonl")
        counts[mode] = len(chunks)
    return counts


def run_transcribe(config, corpus) -> dict:
    d = stage_dir(config, "transcribe")
    client = None
    counts = {}
    for setting in map(InputSetting, _settings(config)):
        if setting.transcript_source is TranscriptSource.MANUAL:
            trs = [Transcript(s.sample_id, TranscriptSource.MANUAL, s.manual_transcript)
                   for s in corpus if s.manual_transcript is not None]
            missing = len(corpus) - len(trs)
            if missing:
                from .errors import ManualTranscriptMissing

                raise ManualTranscriptMissing(f"{missing} samples lack a manual transcript for {setting.value}")
        else:
            if client is None:
                client = get_asr(config.asr, **config.asr_params)
            chunks = read_chunk_index(stage_dir(config, "chunk") / f"chunks_{setting.chunk_mode.value}.jsonl")
            trs = [transcribe(c, client, config.asr_cache) for c in chunks]
        write_transcripts(trs, d / f"{setting.value}.jsonl")
        counts[setting.value] = len(trs)
    return counts


def run_encode(config, corpus) -> dict:
    d = stage_dir(config, "encode")
    audio_p = get_provider(config.audio_provider, **config.audio_params)
    text_p = get_provider(config.text_provider, **config.text_params)
    cache = EmbeddingCache(config.embedding_cache)
    labels = np.array([s.label.index for s in corpus], dtype=np.int64)
    ids = [s.sample_id for s in corpus]
    audio_by_mode = {}
    out = {}
    for setting in map(InputSetting, _settings(config)):
        mode = setting.chunk_mode.value
        if mode not in audio_by_mode:
            chunks = {c.sample_id: c for c in read_chunk_index(stage_dir(config, "chunk") / f"chunks_{mode}.jsonl")}
            audio_by_mode[mode] = np.stack([encode_audio(chunks[i], audio_p, cache) for i in ids])
        trs = {t.sample_id: t for t in read_transcripts(stage_dir(config, "transcribe") / f"{setting.value}.jsonl")}
        text = np.stack([encode_text(trs[i], text_p, cache) for i in ids])
        EmbeddingSet(ids, labels, audio_by_mode[mode], text).save(d / f"{setting.value}.npz", config.stamp())
        out[setting.value] = len(ids)
    return out


def load_embeddings(config) -> dict:
    d = stage_dir(config, "encode")
    return {s: EmbeddingSet.load(d / f"{s}.npz") for s in _settings(config)}


def _grid(config) -> GridSpec:
    return GridSpec(
        architectures=tuple(config.architectures),
        train_settings=tuple(parse_setting(s).value for s in config.train_settings),
        test_settings=tuple(parse_setting(s).value for s in config.test_settings),
        n_seeds=config.n_seeds,
        base_seed=config.seed,
    )


def run_train(config, corpus) -> dict:
    summary = run_grid(
        corpus, load_embeddings(config), stage_dir(config, "train"), _grid(config),
        head_defaults=config.head, train_defaults=config.train, workers=config.jobs, stamp=config.stamp(),
    )
    if summary["failures"]:
        raise JobFailure(f"{len(summary['failures'])} job(s) failed: {summary['failures'][:3]}")
    return summary


def run_evaluate(config, corpus) -> dict:
    # evaluation runs inside each grid job; this stage checks the store is complete
    store = ResultsStore(stage_dir(config, "train"), config.stamp())
    n = len(store.read_records())
    g = _grid(config)
    expected = len(corpus) * len(g.architectures) * len(g.train_settings) * len(g.test_settings) * g.n_seeds
    if n != expected:
        raise JobFailure(f"results store holds {n} records, expected {expected}")
    return {"records": n, "expected_records": expected}


def run_analyze(config, corpus) -> dict:
    from .report import write_analysis

    return write_analysis(stage_dir(config, "train"), stage_dir(config, "analyze"), config.stamp())


def run_report(config, corpus) -> dict:
    from .report import emit_report

    bundle = emit_report(stage_dir(config, "analyze"), stage_dir(config, "report"), config.stamp())
    return {"files": [str(p) for p in bundle]}


RUNNERS = {
    "stats": (run_stats, None),
    "chunk": (run_chunk, None),
    "transcribe": (run_transcribe, "chunk"),
    "encode": (run_encode, "transcribe"),
    "train": (run_train, "encode"),
    "evaluate": (run_evaluate, "train"),
    "analyze": (run_analyze, "evaluate"),
    "report": (run_report, "analyze"),
}


def run_pipeline(config: RunConfig, stages=STAGES, force: bool = False) -> dict:
    """Run ``stages`` in pipeline order; returns per-stage summaries."""
    config.validate()
    unknown = set(stages) - set(STAGES)
    if unknown:
        from .errors import ConfigInvalid

        raise ConfigInvalid(f"unknown stages {sorted(unknown)}")
    corpus = load_manifest(config.manifest)
    Path(config.out).mkdir(parents=True, exist_ok=True)
    config.write(config.out)
    results = {}
    for stage in [s for s in STAGES if s in stages]:
        fn, needed = RUNNERS[stage]
        if needed is not None:
            _require(config, stage, needed)
        if _done(config, stage) and not force:
            log.info("stage %s already done; skipping", stage)
            results[stage] = {"skipped": True}
            continue
        log.info("running stage %s", stage)
        summary = fn(config, corpus)
        _mark(config, stage)
        with open(stage_dir(config, stage) / "summary.json", "w", encoding="utf-8") as fh:
            json.dump({**summary, "_meta": config.stamp()}, fh, indent=2, sort_keys=True, default=str)
        results[stage] = summary
    return results
