"""Synthetic broadcast corpora with a controllable terminality cue.

Each generated show is one 16 kHz WAV file holding alternating speaker
segments. Every annotated sample ends with a 0.2 s tail whose DC offset
encodes ``s * cue_strength + noise`` (s = +1 Terminal, -1 NonTerminal), and
its transcript ends with a ``[cue=+0.9341]`` marker carrying the same
quantity with independent noise. The stub encoders read those two places.
"""

from __future__ import annotations

import json
import re
import zlib
from pathlib import Path

import numpy as np

from .audio import TARGET_SR, write_wav
from .corpus import Corpus, Label, Sample, save_manifest
from .errors import InvalidFraction, TooFewSamples, TooFewShows

CUE_TAIL_SECONDS = 0.2
CUE_AMPLITUDE = 0.25
CUE_NOISE = 0.09
CUE_MARKER = re.compile(r"\[cue=([+-]\d+\.\d+)\]")
MIN_DURATION, MAX_DURATION = 0.2, 5.0

_VOCAB = (
    "alors donc oui non mais enfin voilà bon bah euh je tu il elle on nous vous ils "
    "le la les un une des ce cette est sont a ont fait dit pense crois sais vrai "
    "quand même effectivement justement écoutez attendez regardez c'est là aussi "
    "très bien peut-être toujours jamais rien tout"
).split()
_ASR_SUBSTITUTES = {"est": "et", "a": "à", "ce": "se", "là": "la", "ont": "on", "c'est": "s'est"}

TIMELINE_FILE = "timeline.jsonl"
LATENT_FILE = "latent.jsonl"
MANIFEST_FILE = "manifest.jsonl"


def format_cue(value: float) -> str:
    return f"[cue={value:+.4f}]"


def _ms(x: float) -> float:
    return round(float(x), 3)


def generate_synthetic(
    n_samples: int,
    n_shows: int,
    cue_strength: float,
    terminal_fraction: float,
    seed: int,
    out_dir=None,
) -> Corpus:
    """Build a synthetic corpus; when ``out_dir`` is given also write its artifacts.

    Written layout: ``manifest.jsonl``, ``timeline.jsonl`` (every speaker segment
    with its words), ``latent.jsonl`` (per-sample cue values) and ``media/*.wav``.
    Media paths in the manifest are relative to ``out_dir``.
    """
    if not 0.0 <= cue_strength <= 1.0:
        raise InvalidFraction(f"cue_strength must be in [0, 1], got {cue_strength}")
    if not 0.0 < terminal_fraction < 1.0:
        raise InvalidFraction(f"terminal_fraction must be in (0, 1), got {terminal_fraction}")
    if n_shows < 2:
        raise TooFewShows(f"need at least 2 shows, got {n_shows}")
    if n_samples < n_shows:
        raise TooFewSamples(f"need n_samples >= n_shows ({n_samples} < {n_shows})")

    rng = np.random.default_rng(seed)
    weights = rng.dirichlet(np.full(n_shows, 2.0))
    show_idx = np.concatenate([np.arange(n_shows), rng.choice(n_shows, size=n_samples - n_shows, p=weights)])
    rng.shuffle(show_idx)
    # exact label count, random placement: the realised fraction never drifts from the request
    n_terminal = int(np.floor(n_samples * terminal_fraction + 0.5))
    is_terminal = rng.permutation(np.arange(n_samples) < n_terminal)
    durations = np.exp(rng.uniform(np.log(MIN_DURATION), np.log(MAX_DURATION), size=n_samples))
    eps_audio = rng.uniform(-CUE_NOISE, CUE_NOISE, size=n_samples)
    eps_text = rng.uniform(-CUE_NOISE, CUE_NOISE, size=n_samples)

    samples, timeline, latent = [], [], []
    show_audio = {}
    width = len(str(n_shows - 1))
    for k in range(n_shows):
        show_id = f"show{k:0{width}d}"
        media_path = f"media/{show_id}.wav"
        speakers = [f"{show_id}_spk{j}" for j in range(4)]
        members = np.flatnonzero(show_idx == k)
        show_rng = np.random.default_rng([seed, k])
        t = _ms(show_rng.uniform(0.2, 0.6))
        segments = []
        for pos, i in enumerate(members):
            # another speaker's turn precedes each sample
            gap = _ms(show_rng.uniform(0.3, 2.0))
            other = speakers[pos % 2 + 2]
            segments.append(dict(show_id=show_id, speaker_id=other, start=t, end=_ms(t + gap), sample_id=None))
            t = _ms(t + gap)
            dur = max(_ms(durations[i]), MIN_DURATION)
            sign = 1.0 if is_terminal[i] else -1.0
            a_cue = round(sign * cue_strength + eps_audio[i], 4)
            t_cue = round(sign * cue_strength + eps_text[i], 4)
            sid = f"{show_id}-{pos:05d}"
            segments.append(
                dict(
                    show_id=show_id,
                    speaker_id=speakers[pos % 2],
                    start=t,
                    end=_ms(t + dur),
                    sample_id=sid,
                    audio_cue=a_cue,
                    text_cue=t_cue,
                    label=Label.TERMINAL.value if is_terminal[i] else Label.NON_TERMINAL.value,
                )
            )
            t = _ms(t + dur)
        total = t + 0.3
        for seg in segments:
            n_words = max(1, int(round(2.5 * (seg["end"] - seg["start"]))))
            seg["words"] = [str(w) for w in show_rng.choice(_VOCAB, size=n_words)]
            if seg["sample_id"] is not None:
                seg["marker"] = format_cue(seg["text_cue"])
        if out_dir is not None:
            show_audio[media_path] = _render_show(segments, total, np.random.default_rng([seed, k, 1]))
        for seg in segments:
            timeline.append({"media_path": media_path, **seg})
            if seg["sample_id"] is None:
                continue
            text = " ".join(seg["words"] + [seg["marker"]])
            samples.append(
                Sample(
                    sample_id=seg["sample_id"],
                    show_id=show_id,
                    speaker_id=seg["speaker_id"],
                    media_path=media_path,
                    segment_start=seg["start"],
                    segment_end=seg["end"],
                    label=seg["label"],
                    manual_transcript=text,
                )
            )
            latent.append({"sample_id": seg["sample_id"], "audio_cue": seg["audio_cue"], "text_cue": seg["text_cue"]})

    corpus = Corpus(tuple(samples))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for media_path, wav in show_audio.items():
            write_wav(out / media_path, wav, TARGET_SR)
        save_manifest(corpus, out / MANIFEST_FILE)
        _write_jsonl(out / TIMELINE_FILE, timeline)
        _write_jsonl(out / LATENT_FILE, latent)
    return corpus


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def _render_show(segments, total_seconds, rng) -> np.ndarray:
    sr = TARGET_SR
    wav = np.zeros(int(round(total_seconds * sr)), dtype=np.float64)
    wav += rng.normal(0.0, 0.003, size=wav.shape)
    tail = int(round(CUE_TAIL_SECONDS * sr))
    tail_t = np.arange(tail) / sr
    # 250 Hz over 0.2 s is 50 whole periods, so the carrier sums to zero
    carrier = 0.02 * np.sin(2 * np.pi * 250.0 * tail_t)
    for seg in segments:
        i0, i1 = int(round(seg["start"] * sr)), int(round(seg["end"] * sr))
        body_end = i1 - tail if seg["sample_id"] is not None else i1
        n = body_end - i0
        if n > 0:
            tt = np.arange(n) / sr
            f0 = rng.uniform(90.0, 240.0)
            env = np.abs(np.sin(np.pi * tt * rng.uniform(2.0, 5.0))) + 0.2
            voiced = np.sin(2 * np.pi * f0 * tt) + 0.5 * np.sin(4 * np.pi * f0 * tt)
            wav[i0:body_end] = 0.08 * env * voiced + rng.normal(0.0, 0.01, size=n)
        if seg["sample_id"] is not None:
            wav[i1 - tail:i1] = seg["audio_cue"] * CUE_AMPLITUDE + carrier
    return wav


def load_timeline(corpus_dir) -> list[dict]:
    with open(Path(corpus_dir) / TIMELINE_FILE, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_latent(corpus_dir) -> dict[str, dict]:
    with open(Path(corpus_dir) / LATENT_FILE, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return {r["sample_id"]: r for r in rows}


class SyntheticASR:
    """Deterministic stand-in for a speech recognizer over a synthetic corpus.

    Words are spread evenly over their segment; the transcript of an interval is
    every word whose time falls inside it, with a few homophone substitutions.
    """

    identity = "synthetic-asr-v1"

    def __init__(self, corpus_dir):
        self.corpus_dir = Path(corpus_dir)
        self._by_media: dict[str, list[dict]] = {}
        for seg in load_timeline(corpus_dir):
            self._by_media.setdefault(seg["media_path"], []).append(seg)

    def transcribe(self, chunk) -> str:
        segs = self._by_media.get(chunk.media_path)
        if segs is None:
            raise KeyError(f"no timeline for media {chunk.media_path!r}")
        out = []
        for seg in segs:
            if seg["end"] <= chunk.start or seg["start"] >= chunk.end:
                continue
            words = seg["words"]
            span = seg["end"] - seg["start"] - 0.01
            for i, w in enumerate(words):
                tw = seg["start"] + (i + 0.5) / len(words) * span
                if chunk.start <= tw < chunk.end:
                    if zlib.crc32(f"{seg['start']}:{i}".encode()) % 10 == 0:
                        w = _ASR_SUBSTITUTES.get(w, w)
                    out.append(w)
            marker = seg.get("marker")
            if marker and chunk.start <= seg["end"] - 0.005 < chunk.end:
                out.append(marker)
        return " ".join(out)
