"""768-dim utterance embeddings from audio chunks and transcripts.

Providers share one small interface: ``embed(inputs) -> (n, 768) float32``.
The stub providers are deterministic and read the synthetic cue; the
pretrained providers wrap transformers models and pool their hidden states.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import EmptyWaveform, ProviderFailure
from .preprocess import Chunk, Transcript
from .synthetic import CUE_AMPLITUDE, CUE_MARKER, CUE_TAIL_SECONDS

EMBED_DIM = 768


@dataclass
class EmbeddingPair:
    sample_id: str
    audio_vec: Optional[np.ndarray] = None
    text_vec: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("audio_vec", "text_vec"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=np.float32)
            if v.shape != (EMBED_DIM,) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} of {self.sample_id} must be {EMBED_DIM} finite values, got shape {v.shape}")
            setattr(self, name, v)


class EncoderProvider:
    name = "base"
    version = "0"
    modality = "audio"
    trainable = False
    dim = EMBED_DIM

    @property
    def cache_id(self) -> str:
        return f"{self.name}@{self.version}"

    def embed(self, inputs: Sequence) -> np.ndarray:
        raise NotImplementedError


def _seeded_noise(digest: bytes, n: int, scale: float) -> np.ndarray:
    rng = np.random.default_rng(np.frombuffer(digest[:16], dtype=np.uint32))
    return (rng.standard_normal(n) * scale).astype(np.float32)


class StubAudioEncoder(EncoderProvider):
    """Coordinate 0 is the DC level of the last 0.2 s divided by the cue amplitude.

    The other coordinates are Gaussian noise seeded by the waveform bytes.
    """

    name = "stub-audio"
    version = "1"
    modality = "audio"

    def __init__(self, noise_scale: float = 0.1, sample_rate: int = 16_000):
        self.noise_scale = noise_scale
        self.sample_rate = sample_rate

    def embed_one(self, waveform: np.ndarray) -> np.ndarray:
        w = np.asarray(waveform, dtype=np.float32)
        if w.size == 0:
            raise EmptyWaveform("cannot embed an empty waveform")
        tail = w[-int(round(CUE_TAIL_SECONDS * self.sample_rate)):]
        out = np.empty(EMBED_DIM, dtype=np.float32)
        out[0] = float(np.mean(tail.astype(np.float64))) / CUE_AMPLITUDE
        out[1:] = _seeded_noise(hashlib.sha256(w.tobytes()).digest(), EMBED_DIM - 1, self.noise_scale)
        return out

    def embed(self, inputs):
        return np.stack([self.embed_one(w) for w in inputs]) if len(inputs) else np.zeros((0, EMBED_DIM), np.float32)


class StubTextEncoder(EncoderProvider):
    """Coordinate 0 is the value of the last ``[cue=...]`` marker (0 when absent).

    Empty text maps to the all-zero null embedding.
    """

    name = "stub-text"
    version = "1"
    modality = "text"

    def __init__(self, noise_scale: float = 0.1):
        self.noise_scale = noise_scale

    def embed_one(self, text: str) -> np.ndarray:
        out = np.zeros(EMBED_DIM, dtype=np.float32)
        if text == "":
            return out
        found = CUE_MARKER.findall(text)
        out[0] = float(found[-1]) if found else 0.0
        out[1:] = _seeded_noise(hashlib.sha256(text.encode("utf-8")).digest(), EMBED_DIM - 1, self.noise_scale)
        return out

    def embed(self, inputs):
        return np.stack([self.embed_one(t) for t in inputs]) if len(inputs) else np.zeros((0, EMBED_DIM), np.float32)


class _TorchProvider(EncoderProvider):
    """Shared plumbing for transformers-backed providers."""

    def __init__(self, model_name: str, model=None, trainable: bool = False, device: str = "cpu", pooling: str = "mean"):
        self.model_name = model_name
        self.trainable = trainable
        self.device = device
        self.pooling = pooling
        self._model = model
        self._proj = None
        self.version = model_name if model is None else f"{model_name}:injected"

    @property
    def module(self):
        if self._model is None:
            self._model = self._load()
        if not self.trainable:
            self._model.eval()
            for p in self._model.parameters():
                p.requires_grad_(False)
        return self._model

    def _project(self, hidden):
        import torch

        if hidden.shape[-1] == EMBED_DIM:
            return hidden
        if self._proj is None:
            g = torch.Generator().manual_seed(0)
            w = torch.randn(hidden.shape[-1], EMBED_DIM, generator=g) / hidden.shape[-1] ** 0.5
            self._proj = w.to(hidden.device, hidden.dtype)
        return hidden @ self._proj

    def _pool(self, hidden, mask):
        if self.pooling == "first":
            return hidden[:, 0]
        m = mask.unsqueeze(-1).to(hidden.dtype)
        return (hidden * m).sum(1) / m.sum(1).clamp(min=1.0)

    def embed(self, inputs):
        import torch

        if len(inputs) == 0:
            return np.zeros((0, EMBED_DIM), np.float32)
        with torch.no_grad():
            out = self.forward(inputs)
        arr = out.detach().cpu().numpy().astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ProviderFailure(f"{self.name} produced non-finite embeddings")
        return arr


class Wav2Vec2Encoder(_TorchProvider):
    """Audio "CLS": mean of the last hidden states (pooling="first" for the first frame)."""

    modality = "audio"

    def __init__(self, model_name: str = "facebook/wav2vec2-base", **kw):
        super().__init__(model_name, **kw)
        self.name = f"wav2vec2:{model_name}:{self.pooling}"

    def _load(self):
        try:
            from transformers import AutoModel

            return AutoModel.from_pretrained(self.model_name).to(self.device)
        except Exception as exc:
            raise ProviderFailure(f"cannot load audio model {self.model_name!r}: {exc}") from exc

    def forward(self, waveforms):
        import torch

        lens = [len(w) for w in waveforms]
        if min(lens) == 0:
            raise EmptyWaveform("cannot embed an empty waveform")
        batch = torch.zeros(len(waveforms), max(lens))
        for i, w in enumerate(waveforms):
            w = torch.as_tensor(np.asarray(w, dtype=np.float32))
            batch[i, : len(w)] = (w - w.mean()) / (w.std(unbiased=False) + 1e-7)
        model = self.module
        group_norm = getattr(model.config, "feat_extract_norm", "layer") != "layer"
        if group_norm and len(waveforms) > 1:
            # group norm spans the padded time axis, so padding would leak into
            # the features; run such models one waveform at a time
            return torch.cat([self.forward([w]) for w in waveforms])
        attn = (torch.arange(max(lens))[None, :] < torch.tensor(lens)[:, None]).long()
        kwargs = {} if group_norm else {"attention_mask": attn.to(self.device)}
        hidden = model(batch.to(self.device), **kwargs).last_hidden_state
        frames = hidden.shape[1]
        # frame-level mask from the sample-level one
        frame_lens = torch.tensor([max(1, int(round(n / max(lens) * frames))) for n in lens])
        fmask = torch.arange(frames)[None, :] < frame_lens[:, None]
        return self._project(self._pool(hidden, fmask.to(hidden.device)))


class FlaubertEncoder(_TorchProvider):
    """Text "CLS": hidden state of the first token. Empty text gives the zero vector."""

    modality = "text"

    def __init__(self, model_name: str = "flaubert/flaubert_base_cased", tokenizer=None, **kw):
        kw.setdefault("pooling", "first")
        super().__init__(model_name, **kw)
        self.name = f"flaubert:{model_name}:{self.pooling}"
        self._tokenizer = tokenizer

    def _load(self):
        try:
            from transformers import AutoModel

            return AutoModel.from_pretrained(self.model_name).to(self.device)
        except Exception as exc:
            raise ProviderFailure(f"cannot load text model {self.model_name!r}: {exc}") from exc

    @property
    def tokenizer(self):
        if self._tokenizer is None:
            from transformers import AutoTokenizer

            self._tokenizer = AutoTokenizer.from_pretrained(self.model_name)
        return self._tokenizer

    def forward(self, texts):
        import torch

        out = torch.zeros(len(texts), EMBED_DIM)
        idx = [i for i, t in enumerate(texts) if t != ""]
        if not idx:
            return out
        enc = self.tokenizer([texts[i] for i in idx], return_tensors="pt", padding=True, truncation=True)
        enc = {k: v.to(self.device) for k, v in enc.items()}
        hidden = self.module(**enc).last_hidden_state
        pooled = self._project(self._pool(hidden, enc["attention_mask"]))
        out = out.to(pooled.dtype).to(pooled.device)
        out[idx] = pooled
        return out


PROVIDERS = {
    "stub-audio": StubAudioEncoder,
    "stub-text": StubTextEncoder,
    "wav2vec2-base": lambda **kw: Wav2Vec2Encoder("facebook/wav2vec2-base", **kw),
    "flaubert_base": lambda **kw: FlaubertEncoder("flaubert/flaubert_base_cased", **kw),
}


def get_provider(name: str, **params) -> EncoderProvider:
    if name in PROVIDERS:
        return PROVIDERS[name](**params)
    if name.startswith("wav2vec2:"):
        return Wav2Vec2Encoder(name.split(":", 1)[1], **params)
    if name.startswith("flaubert:"):
        return FlaubertEncoder(name.split(":", 1)[1], **params)
    raise ValueError(f"unknown encoder provider {name!r}")


class EmbeddingCache:
    """Append-only store: raw float32 rows in ``vectors.f32`` plus a JSONL index."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._vec_path = self.dir / "vectors.f32"
        self._idx_path = self.dir / "index.jsonl"
        self._index: dict[str, int] = {}
        if self._idx_path.exists():
            with open(self._idx_path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        row = json.loads(line)
                        self._index[row["key"]] = row["row"]
        # drop rows whose vector bytes never made it to disk
        n_rows = self._vec_path.stat().st_size // (4 * EMBED_DIM) if self._vec_path.exists() else 0
        self._index = {k: r for k, r in self._index.items() if r < n_rows}
        self._rows = n_rows

    @staticmethod
    def key(provider: EncoderProvider, payload: bytes) -> str:
        h = hashlib.sha256(provider.cache_id.encode("utf-8") + b"\x1f" + payload).hexdigest()
        return h

    def __contains__(self, key):
        return key in self._index

    def __len__(self):
        return len(self._index)

    def get(self, key) -> Optional[np.ndarray]:
        row = self._index.get(key)
        if row is None:
            return None
        with open(self._vec_path, "rb") as fh:
            fh.seek(row * 4 * EMBED_DIM)
            return np.frombuffer(fh.read(4 * EMBED_DIM), dtype="<f4").copy()

    def put(self, key, vec: np.ndarray, **meta) -> None:
        if key in self._index:
            return
        vec = np.asarray(vec, dtype="<f4").reshape(EMBED_DIM)
        with open(self._vec_path, "ab") as fh:
            fh.write(vec.tobytes())
            fh.flush()
            os.fsync(fh.fileno())
        row = self._rows
        self._rows += 1
        with open(self._idx_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"key": key, "row": row, **meta}) + "\n")
        self._index[key] = row


def _check(provider: EncoderProvider, modality: str):
    if provider.modality != modality:
        raise ValueError(f"provider {provider.name!r} has modality {provider.modality}, expected {modality}")


def encode_audio(chunk: Chunk, provider: EncoderProvider, cache: Optional[EmbeddingCache] = None) -> np.ndarray:
    _check(provider, "audio")
    wav = chunk.load_waveform()
    if wav.size == 0:
        raise EmptyWaveform(f"chunk {chunk.sample_id} has an empty waveform")
    return _cached(provider, wav, wav.astype("<f4").tobytes(), cache, chunk.sample_id)


def encode_text(transcript: Transcript, provider: EncoderProvider, cache: Optional[EmbeddingCache] = None) -> np.ndarray:
    _check(provider, "text")
    return _cached(provider, transcript.text, transcript.text.encode("utf-8"), cache, transcript.sample_id)


def _cached(provider, item, payload, cache, sample_id):
    key = EmbeddingCache.key(provider, payload) if cache is not None and not provider.trainable else None
    if key is not None:
        hit = cache.get(key)
        if hit is not None:
            return hit
    try:
        vec = provider.embed([item])[0]
    except (EmptyWaveform, ProviderFailure):
        raise
    except Exception as exc:
        raise ProviderFailure(f"{provider.name} failed on {sample_id}: {exc}") from exc
    vec = np.asarray(vec, dtype=np.float32)
    if vec.shape != (EMBED_DIM,) or not np.all(np.isfinite(vec)):
        raise ProviderFailure(f"{provider.name} returned an invalid vector for {sample_id}")
    if key is not None:
        cache.put(key, vec, sample_id=sample_id, provider=provider.cache_id)
    return vec
