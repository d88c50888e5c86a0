"""Model inputs derived from samples: audio chunks and transcripts."""

from __future__ import annotations

import enum
import hashlib
import io
import json
import os
import tempfile
import wave
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

from .audio import TARGET_SR, read_wav, slice_seconds, to_pcm16, write_wav
from .corpus import Sample
from .errors import (
    ASRUnavailable,
    EmptyInterval,
    ManualTranscriptMissing,
    MediaUnreadable,
    UnsupportedSetting,
)

ASR_ENDPOINT_ENV = "TRP_ASR_ENDPOINT"


class ChunkMode(str, enum.Enum):
    REF = "ref"
    FIXED = "fixed"


class TranscriptSource(str, enum.Enum):
    AUTO = "auto"
    MANUAL = "manual"


class InputSetting(str, enum.Enum):
    """The three train/test input settings: segmentation x transcript source."""

    REF_AUTO = "ref_auto"
    REF_MAN = "ref_man"
    FIXED_AUTO = "3s_auto"

    @property
    def chunk_mode(self) -> ChunkMode:
        return ChunkMode.FIXED if self is InputSetting.FIXED_AUTO else ChunkMode.REF

    @property
    def transcript_source(self) -> TranscriptSource:
        return TranscriptSource.MANUAL if self is InputSetting.REF_MAN else TranscriptSource.AUTO


ALL_SETTINGS = (InputSetting.REF_AUTO, InputSetting.REF_MAN, InputSetting.FIXED_AUTO)


def parse_setting(value) -> InputSetting:
    if isinstance(value, InputSetting):
        return value
    try:
        return InputSetting(value)
    except ValueError:
        raise UnsupportedSetting(
            f"unknown input setting {value!r}; expected one of {[s.value for s in ALL_SETTINGS]}"
        ) from None


@dataclass(frozen=True)
class ChunkSpec:
    mode: ChunkMode = ChunkMode.REF
    window: float = 3.0

    def __post_init__(self):
        object.__setattr__(self, "mode", ChunkMode(self.mode))
        if not self.window > 0:
            raise ValueError(f"window must be > 0, got {self.window}")


@dataclass(frozen=True)
class Chunk:
    sample_id: str
    start: float
    end: float
    waveform_ref: Optional[str]
    media_path: str = ""
    mode: str = ChunkMode.REF.value

    @property
    def duration(self) -> float:
        return round(self.end - self.start, 6)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Chunk":
        return cls(**{k: d.get(k) for k in ("sample_id", "start", "end", "waveform_ref", "media_path", "mode")})

    def load_waveform(self) -> np.ndarray:
        if self.waveform_ref is None:
            raise MediaUnreadable(f"chunk {self.sample_id} has no extracted waveform")
        data, _ = read_wav(self.waveform_ref)
        return data


class MediaReader:
    """Small LRU cache of decoded (16 kHz mono) media files."""

    def __init__(self, root=".", maxsize: int = 4):
        self.root = Path(root)
        self.maxsize = maxsize
        self._cache: OrderedDict[str, np.ndarray] = OrderedDict()

    def resolve(self, media_path: str) -> Path:
        p = Path(media_path)
        return p if p.is_absolute() else self.root / p

    def read(self, media_path: str) -> np.ndarray:
        key = str(self.resolve(media_path))
        if key in self._cache:
            self._cache.move_to_end(key)
            return self._cache[key]
        if not os.path.exists(key):
            raise MediaUnreadable(f"media file not found: {key}")
        data, _ = read_wav(key, TARGET_SR)
        self._cache[key] = data
        if len(self._cache) > self.maxsize:
            self._cache.popitem(last=False)
        return data


def chunk_interval(sample: Sample, spec: ChunkSpec) -> tuple[float, float]:
    end = sample.change_time
    if end <= 0:
        raise EmptyInterval(f"sample {sample.sample_id}: change_time is 0")
    if spec.mode is ChunkMode.REF:
        return sample.segment_start, sample.segment_end
    return round(max(0.0, end - spec.window), 6), end


def make_chunk(sample: Sample, spec: ChunkSpec, media=None, out_dir=None) -> Chunk:
    """Cut the chunk for ``sample``; write it as a WAV under ``out_dir`` if given.

    ``media`` is anything with ``read(media_path)``, or a root directory for a
    MediaReader. Fixed-mode chunks end at the speaker change and may include
    earlier speakers' speech.
    """
    start, end = chunk_interval(sample, spec)
    if not hasattr(media, "read"):
        media = MediaReader(media if media is not None else ".")
    data = media.read(sample.media_path)
    ref = None
    if out_dir is not None:
        wav = slice_seconds(data, TARGET_SR, start, end)
        if len(wav) == 0:
            raise MediaUnreadable(f"sample {sample.sample_id}: interval [{start}, {end}) lies outside the media")
        ref = str(Path(out_dir) / spec.mode.value / f"{sample.sample_id}.wav")
        write_wav(ref, wav, TARGET_SR)
    return Chunk(sample.sample_id, start, end, ref, sample.media_path, spec.mode.value)


def make_chunks(samples, spec: ChunkSpec, media_root=".", out_dir=None) -> list[Chunk]:
    reader = MediaReader(media_root)
    ordered = sorted(samples, key=lambda s: (s.media_path, s.segment_start))
    made = {s.sample_id: make_chunk(s, spec, reader, out_dir) for s in ordered}
    return [made[s.sample_id] for s in samples]


def write_chunk_index(chunks, path) -> None:
    _atomic_write_lines(path, (json.dumps(c.to_dict(), sort_keys=True) for c in chunks))


def read_chunk_index(path) -> list[Chunk]:
    with open(path, encoding="utf-8") as fh:
        return [Chunk.from_dict(json.loads(line)) for line in fh if line.strip()]


@dataclass(frozen=True)
class Transcript:
    sample_id: str
    source: TranscriptSource
    text: str

    def __post_init__(self):
        object.__setattr__(self, "source", TranscriptSource(self.source))

    def to_dict(self) -> dict:
        return {"sample_id": self.sample_id, "source": self.source.value, "text": self.text}


def write_transcripts(transcripts, path) -> None:
    _atomic_write_lines(path, (json.dumps(t.to_dict(), ensure_ascii=False) for t in transcripts))


def read_transcripts(path) -> list[Transcript]:
    with open(path, encoding="utf-8") as fh:
        return [Transcript(**json.loads(line)) for line in fh if line.strip()]


# --- ASR clients -------------------------------------------------------------


class ASRClient(Protocol):
    identity: str

    def transcribe(self, chunk: Chunk) -> str: ...


class ReplayASR:
    """Recording/replay fake.

    With ``inner`` set, forwards every call and appends (key, text) to the
    recording file. Without it, answers only from the recording.
    """

    def __init__(self, recording, inner: Optional[ASRClient] = None, identity: Optional[str] = None):
        self.recording = Path(recording)
        self.inner = inner
        self.identity = identity or (inner.identity if inner is not None else "replay")
        self.calls = 0
        self._table: dict[str, str] = {}
        if self.recording.exists():
            with open(self.recording, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        row = json.loads(line)
                        self._table[row["key"]] = row["text"]

    @staticmethod
    def key(chunk: Chunk) -> str:
        return f"{chunk.sample_id}|{chunk.start!r}|{chunk.end!r}"

    def transcribe(self, chunk: Chunk) -> str:
        self.calls += 1
        k = self.key(chunk)
        if self.inner is None:
            if k not in self._table:
                raise KeyError(f"no recorded transcript for {k}")
            return self._table[k]
        text = self.inner.transcribe(chunk)
        self._table[k] = text
        self.recording.parent.mkdir(parents=True, exist_ok=True)
        with open(self.recording, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"key": k, "text": text}, ensure_ascii=False) + "\n")
        return text


class RemoteASR:
    """POSTs the chunk as a WAV body; expects ``{"text": ...}`` back."""

    def __init__(self, endpoint: Optional[str] = None, timeout: float = 120.0, client=None, model: str = ""):
        self.endpoint = endpoint or os.environ.get(ASR_ENDPOINT_ENV)
        if not self.endpoint:
            raise ASRUnavailable(f"no ASR endpoint configured (set {ASR_ENDPOINT_ENV})")
        self.identity = f"remote:{self.endpoint}" + (f":{model}" if model else "")
        self.timeout = timeout
        self._client = client

    def transcribe(self, chunk: Chunk) -> str:
        import httpx

        data = chunk.load_waveform()
        buf = io.BytesIO()
        with wave.open(buf, "wb") as wf:
            wf.setnchannels(1)
            wf.setsampwidth(2)
            wf.setframerate(TARGET_SR)
            wf.writeframes(to_pcm16(data))
        client = self._client or httpx.Client(timeout=self.timeout)
        resp = client.post(
            self.endpoint,
            content=buf.getvalue(),
            headers={"Content-Type": "audio/wav", "X-Sample-Id": chunk.sample_id},
        )
        resp.raise_for_status()
        return resp.json()["text"]


class WhisperASR:
    """Local Whisper through the transformers ASR pipeline (loaded lazily)."""

    def __init__(self, model: str = "openai/whisper-large-v2", language: str = "french", device: str = "cpu"):
        self.model = model
        self.language = language
        self.device = device
        self.identity = f"whisper:{model}:{language}"
        self._pipe = None

    def transcribe(self, chunk: Chunk) -> str:
        if self._pipe is None:
            from transformers import pipeline

            self._pipe = pipeline("automatic-speech-recognition", model=self.model, device=self.device)
        data = chunk.load_waveform()
        out = self._pipe(
            {"raw": data, "sampling_rate": TARGET_SR},
            generate_kwargs={"language": self.language, "task": "transcribe"},
        )
        return out["text"]


def get_asr(name: str, **params) -> ASRClient:
    if name == "synthetic":
        from .synthetic import SyntheticASR

        return SyntheticASR(params["corpus_dir"])
    if name == "whisper":
        return WhisperASR(**params)
    if name == "remote":
        return RemoteASR(**params)
    if name == "replay":
        return ReplayASR(**params)
    raise ValueError(f"unknown ASR client {name!r}")


# --- transcript cache --------------------------------------------------------


def transcript_cache_key(chunk: Chunk, identity: str) -> str:
    raw = f"{chunk.sample_id}\x1f{chunk.start!r}\x1f{chunk.end!r}\x1f{identity}"
    return hashlib.sha256(raw.encode("utf-8")).hexdigest()


def transcribe(chunk: Chunk, client: ASRClient, cache_dir) -> Transcript:
    """Automatic transcript of ``chunk``, served from the on-disk cache when present.

    Text is stored exactly as the client returned it, artifacts included.
    """
    key = transcript_cache_key(chunk, client.identity)
    path = Path(cache_dir) / key[:2] / f"{key}.json"
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            return Transcript(**json.load(fh))
    try:
        text = client.transcribe(chunk)
    except Exception as exc:
        raise ASRUnavailable(f"ASR client {client.identity!r} failed on {chunk.sample_id}: {exc}") from exc
    if not isinstance(text, str):
        raise ASRUnavailable(f"ASR client {client.identity!r} returned {type(text).__name__}, expected str")
    tr = Transcript(chunk.sample_id, TranscriptSource.AUTO, text)
    _atomic_write_lines(path, [json.dumps(tr.to_dict(), ensure_ascii=False)])
    return tr


def resolve_transcript(
    sample: Sample,
    setting,
    client: Optional[ASRClient] = None,
    cache_dir=None,
    chunk: Optional[Chunk] = None,
    media_root=".",
    window: float = 3.0,
) -> Transcript:
    setting = parse_setting(setting)
    if setting.transcript_source is TranscriptSource.MANUAL:
        if sample.manual_transcript is None:
            raise ManualTranscriptMissing(f"sample {sample.sample_id} has no manual transcript")
        return Transcript(sample.sample_id, TranscriptSource.MANUAL, sample.manual_transcript)
    if client is None or cache_dir is None:
        raise ASRUnavailable(f"setting {setting.value} needs an ASR client and a cache directory")
    if chunk is None:
        chunk = make_chunk(sample, ChunkSpec(setting.chunk_mode, window), media_root)
    return transcribe(chunk, client, cache_dir)


def _atomic_write_lines(path, lines) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
