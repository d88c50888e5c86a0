import filecmp

import numpy as np
import pytest
from scipy.stats import binom

from turnterm.corpus import Label, corpus_stats, load_manifest
from turnterm.errors import InvalidFraction, TooFewSamples, TooFewShows
from turnterm.synthetic import CUE_NOISE, SyntheticASR, generate_synthetic, load_latent
from turnterm.preprocess import Chunk


def test_same_arguments_give_byte_identical_corpora(tmp_path):
    a = generate_synthetic(300, 5, 1.0, 0.43, seed=7, out_dir=tmp_path / "a")
    b = generate_synthetic(300, 5, 1.0, 0.43, seed=7, out_dir=tmp_path / "b")
    assert a == b
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for name in cmp.common_files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    for wav in (tmp_path / "a" / "media").iterdir():
        assert wav.read_bytes() == (tmp_path / "b" / "media" / wav.name).read_bytes()


def test_writing_artifacts_does_not_change_the_corpus(tmp_path):
    assert generate_synthetic(200, 4, 0.5, 0.4, seed=1) == generate_synthetic(200, 4, 0.5, 0.4, seed=1,
                                                                            out_dir=tmp_path)


def test_different_seeds_differ():
    assert generate_synthetic(100, 3, 1.0, 0.4, seed=1) != generate_synthetic(100, 3, 1.0, 0.4, seed=2)


def test_terminal_count_within_binomial_interval():
    corpus = generate_synthetic(2000, 10, 1.0, 0.43, seed=7)
    n_term = sum(s.label is Label.TERMINAL for s in corpus)
    lo, hi = binom.interval(0.99, 2000, 0.43)
    assert lo <= n_term <= hi


def test_shape_and_bucket_spread():
    corpus = generate_synthetic(2000, 10, 1.0, 0.43, seed=0)
    assert len(corpus) == 2000 and len(corpus.shows) == 10
    stats = corpus_stats(corpus)
    for label in ("Terminal", "NonTerminal"):
        assert all(c > 0 for c in stats.bucket_counts[label].values())
    assert all(0.2 <= s.duration <= 5.0 + 1e-9 for s in corpus)


def test_latent_cue_encodes_label(synth_dir):
    corpus = load_manifest(synth_dir / "manifest.jsonl")
    latent = load_latent(synth_dir)
    for s in corpus:
        sign = 1.0 if s.label is Label.TERMINAL else -1.0
        for key in ("audio_cue", "text_cue"):
            assert abs(latent[s.sample_id][key] - sign * 1.0) <= CUE_NOISE + 1e-4
        assert s.manual_transcript.endswith(f"[cue={latent[s.sample_id]['text_cue']:+.4f}]")


@pytest.mark.parametrize("kw,err", [
    (dict(cue_strength=1.5), InvalidFraction),
    (dict(terminal_fraction=0.0), InvalidFraction),
    (dict(terminal_fraction=1.0), InvalidFraction),
    (dict(n_shows=1), TooFewShows),
    (dict(n_samples=3, n_shows=4), TooFewSamples),
])
def test_invalid_arguments(kw, err):
    args = dict(n_samples=100, n_shows=4, cue_strength=1.0, terminal_fraction=0.4, seed=0)
    args.update(kw)
    with pytest.raises(err):
        generate_synthetic(**args)


def test_every_show_has_samples():
    corpus = generate_synthetic(12, 12, 0.0, 0.5, seed=4)
    assert len(corpus.shows) == 12


def test_synthetic_asr_reads_segment_words(synth_dir):
    corpus = load_manifest(synth_dir / "manifest.jsonl")
    asr = SyntheticASR(synth_dir)
    s = corpus.samples[5]
    text = asr.transcribe(Chunk(s.sample_id, s.segment_start, s.segment_end, None, s.media_path))
    assert text.split()[-1] == s.manual_transcript.split()[-1]
    assert len(text.split()) == len(s.manual_transcript.split())
    # a tiny interval away from any word midpoint transcribes to nothing
    assert asr.transcribe(Chunk(s.sample_id, s.segment_start, s.segment_start + 1e-4, None, s.media_path)) == ""
    assert np.isfinite(len(text))
