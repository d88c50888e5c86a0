"""Command-line entry point: ``turnterm <group> <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 missing prerequisite,
4 job failure(s).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigInvalid, TurntermError

log = logging.getLogger("turnterm")

# outputs of standalone commands carry no run config
_STAMP = {"toolkit": "turnterm", "version": __version__, "config_hash": "none"}


def _kv(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigInvalid(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except ValueError:
            out[k] = v
    return out


def _csv_list(value):
    return [v.strip() for v in value.split(",") if v.strip()] if value else None


# --- corpus ------------------------------------------------------------------


def cmd_corpus_stats(args):
    from .corpus import corpus_stats, load_manifest
    from .pipeline import write_csv

    stats = corpus_stats(load_manifest(args.manifest))
    print(stats.format_table())
    if args.out:
        from .corpus import BUCKETS

        stamp = _STAMP
        out = Path(args.out)
        write_csv(out / "labels.csv", stats.label_table_rows(), ["label", "count", *BUCKETS], stamp)
        write_csv(out / "shows.csv", stats.show_table_rows(), ["show", "samples", "duration_s"], stamp)


def cmd_corpus_synth(args):
    from .synthetic import generate_synthetic

    corpus = generate_synthetic(args.n, args.shows, args.cue, args.terminal_frac, args.seed, out_dir=args.out)
    print(f"wrote {len(corpus)} samples over {len(corpus.shows)} shows to {args.out}")


# --- prep --------------------------------------------------------------------


def cmd_prep_chunks(args):
    from .corpus import load_manifest
    from .preprocess import ChunkMode, ChunkSpec, make_chunks, write_chunk_index

    corpus = load_manifest(args.manifest)
    media_root = args.media_root or str(Path(args.manifest).resolve().parent)
    spec = ChunkSpec(ChunkMode(args.mode), args.window)
    chunks = make_chunks(corpus.samples, spec, media_root, args.out)
    index = Path(args.out) / f"chunks_{args.mode}.jsonl"
    write_chunk_index(chunks, index)
    print(f"wrote {len(chunks)} chunks; index {index}")


def cmd_prep_transcribe(args):
    from .preprocess import get_asr, read_chunk_index, transcribe, write_transcripts

    params = _kv(args.asr_param)
    if args.asr == "synthetic" and "corpus_dir" not in params:
        raise ConfigInvalid("the synthetic ASR needs --asr-param corpus_dir=<synthetic corpus dir>")
    client = get_asr(args.asr, **params)
    chunks = read_chunk_index(args.chunks)
    trs = [transcribe(c, client, args.cache) for c in chunks]
    out = args.out or str(Path(args.chunks).with_suffix("")) + f".{args.asr}.transcripts.jsonl"
    write_transcripts(trs, out)
    print(f"wrote {len(trs)} transcripts to {out}")


# --- encode ------------------------------------------------------------------


def cmd_encode(args):
    from .encoders import EmbeddingCache, encode_audio, encode_text, get_provider
    from .preprocess import read_chunk_index, read_transcripts

    provider = get_provider(args.provider, **_kv(args.provider_param))
    cache = EmbeddingCache(args.cache) if args.cache else None
    if args.modality == "audio":
        items = read_chunk_index(args.inp)
        vecs = [encode_audio(c, provider, cache) for c in items]
    else:
        items = read_transcripts(args.inp)
        vecs = [encode_text(t, provider, cache) for t in items]
    out = args.out or str(Path(args.inp).with_suffix("")) + f".{args.modality}.npz"
    np.savez(out, sample_ids=np.array([i.sample_id for i in items]), vectors=np.stack(vecs).astype(np.float32))
    print(f"wrote {len(vecs)} {args.modality} embeddings to {out}")


# --- experiment / pipeline ---------------------------------------------------


def _config_from_args(args):
    from .config import load_config

    overrides = {
        "manifest": getattr(args, "manifest", None),
        "out": getattr(args, "out", None),
        "seed": getattr(args, "seed", None),
        "jobs": getattr(args, "jobs", None),
        "n_seeds": getattr(args, "seeds", None),
        "architectures": _csv_list(getattr(args, "archs", None)),
        "train_settings": _csv_list(getattr(args, "train_settings", None)),
        "test_settings": _csv_list(getattr(args, "test_settings", None)),
        "audio_provider": getattr(args, "audio_provider", None),
        "text_provider": getattr(args, "text_provider", None),
        "asr": getattr(args, "asr", None),
    }
    return load_config(getattr(args, "config", None), **overrides)


def _print_summary(results):
    for stage, summary in results.items():
        brief = {k: v for k, v in summary.items() if not isinstance(v, (list, dict))}
        print(f"{stage}: {json.dumps(brief, default=str)}")


def cmd_exp_run(args):
    from .pipeline import run_pipeline

    config = _config_from_args(args)
    _print_summary(run_pipeline(config, ("chunk", "transcribe", "encode", "train", "evaluate")))


def cmd_exp_status(args):
    from .corpus import load_manifest
    from .pipeline import _grid, stage_dir

    config = _config_from_args(args)
    config.validate()
    from .experiment import grid_status

    status = grid_status(load_manifest(config.manifest), stage_dir(config, "train"), _grid(config))
    print(f"{status['done']}/{status['jobs']} jobs done")
    for key in status["remaining"][: args.show]:
        print(f"  pending {key}")


def cmd_pipeline(args):
    from .pipeline import STAGES, run_pipeline

    config = _config_from_args(args)
    stages = _csv_list(args.stages) or list(STAGES)
    _print_summary(run_pipeline(config, stages, force=args.force))


# --- analyze / report --------------------------------------------------------


def cmd_analyze_tables(args):
    from .analysis.accuracy import aggregate_accuracy
    from .experiment import read_records

    group = {"show": "show", "duration": "duration_bucket", "overall": "overall"}[args.by]
    table = aggregate_accuracy(read_records(args.records), group)
    if args.out:
        from .report import write_frame

        write_frame(table.frame, args.out, _STAMP, float_format="%.2f")
    for line in table.format_rows():
        print(line)


def cmd_analyze_lmm(args):
    from .analysis.lmm import fit_lmm
    from .experiment import read_records

    fit = fit_lmm(read_records(args.records))
    stamp = _STAMP
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump({**json.loads(fit.to_json()), "_meta": stamp}, fh, indent=2, sort_keys=True)
    print(f"converged={fit.converged} variances={json.dumps(fit.variances)}")
    for c in fit.cells:
        print(f"{c['architecture']} / {c['train']} / {c['test']}: {c['mean']:.4f} "
              f"[{c['ci_low']:.4f}, {c['ci_high']:.4f}]")


def cmd_analyze_posthoc(args):
    import pandas as pd

    from .analysis.lmm import MixedModelFit
    from .analysis.posthoc import all_posthoc

    rows = [c.to_dict() for c in all_posthoc(MixedModelFit.from_json(args.fit))]
    df = pd.DataFrame(rows)
    if args.out:
        from .report import write_frame

        write_frame(df, args.out, _STAMP)
    print(df.to_string(index=False))


def cmd_analyze_kappa(args):
    from .analysis.kappa import agreement_summary, read_ratings_csv

    summary = agreement_summary(read_ratings_csv(args.ratings))
    print(json.dumps(summary, indent=2))


def cmd_report(args):
    from .report import emit_report

    for path in emit_report(args.results, args.out):
        print(path)


# --- parser ------------------------------------------------------------------


def _add_grid_flags(p):
    p.add_argument("--config", help="JSON or TOML run config; flags override its values")
    p.add_argument("--manifest")
    p.add_argument("--out", help="root of all outputs")
    p.add_argument("--archs", help="comma-separated, e.g. TO,AO,EF,LF,AF")
    p.add_argument("--train-settings", help="comma-separated subset of ref_auto,ref_man,3s_auto")
    p.add_argument("--test-settings")
    p.add_argument("--seeds", type=int, help="random initializations per (architecture, setting, fold)")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--jobs", type=int, help="parallel training workers")
    p.add_argument("--asr")
    p.add_argument("--audio-provider")
    p.add_argument("--text-provider")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="turnterm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"turnterm {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="group", required=True)

    corpus = sub.add_parser("corpus", help="manifest statistics and synthetic corpora").add_subparsers(
        dest="command", required=True)
    p = corpus.add_parser("stats", help="label/duration and per-show tables")
    p.add_argument("manifest")
    p.add_argument("--out", help="directory for the CSV tables")
    p.set_defaults(func=cmd_corpus_stats)
    p = corpus.add_parser("synth", help="generate a synthetic corpus with a controllable cue")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--shows", type=int, default=10)
    p.add_argument("--cue", type=float, default=1.0)
    p.add_argument("--terminal-frac", type=float, default=839 / 1954)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_corpus_synth)

    prep = sub.add_parser("prep", help="audio chunks and transcripts").add_subparsers(dest="command", required=True)
    p = prep.add_parser("chunks")
    p.add_argument("manifest")
    p.add_argument("--mode", choices=["ref", "fixed"], default="ref")
    p.add_argument("--window", type=float, default=3.0)
    p.add_argument("--media-root")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prep_chunks)
    p = prep.add_parser("transcribe")
    p.add_argument("chunks", help="chunk index written by `prep chunks`")
    p.add_argument("--asr", default="synthetic")
    p.add_argument("--asr-param", action="append", metavar="KEY=VALUE")
    p.add_argument("--cache", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_prep_transcribe)

    p = sub.add_parser("encode", help="embed chunks (audio) or transcripts (text)")
    p.add_argument("--modality", choices=["audio", "text"], required=True)
    p.add_argument("--provider", required=True)
    p.add_argument("--provider-param", action="append", metavar="KEY=VALUE")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--cache")
    p.add_argument("--out")
    p.set_defaults(func=cmd_encode)

    exp = sub.add_parser("exp", help="training grid").add_subparsers(dest="command", required=True)
    p = exp.add_parser("run")
    _add_grid_flags(p)
    p.set_defaults(func=cmd_exp_run)
    p = exp.add_parser("status")
    _add_grid_flags(p)
    p.add_argument("--show", type=int, default=10, help="pending jobs to list")
    p.set_defaults(func=cmd_exp_status)

    ana = sub.add_parser("analyze", help="accuracy tables, mixed model, contrasts, kappa").add_subparsers(
        dest="command", required=True)
    p = ana.add_parser("tables")
    p.add_argument("--records", required=True)
    p.add_argument("--by", choices=["show", "duration", "overall"], default="overall")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_tables)
    p = ana.add_parser("lmm")
    p.add_argument("--records", required=True)
    p.add_argument("--out", default="fit.json")
    p.set_defaults(func=cmd_analyze_lmm)
    p = ana.add_parser("posthoc")
    p.add_argument("--fit", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze_posthoc)
    p = ana.add_parser("kappa")
    p.add_argument("--ratings", required=True)
    p.set_defaults(func=cmd_analyze_kappa)

    p = sub.add_parser("report", help="tables and plots from analysis outputs")
    p.add_argument("results", help="run directory or its analyze/ subdirectory")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run all (or some) stages end to end")
    _add_grid_flags(p)
    p.add_argument("--stages", help="comma-separated subset; default all")
    p.add_argument("--force", action="store_true", help="rerun stages already marked done")
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except TurntermError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
