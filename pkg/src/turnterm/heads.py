"""Classification heads over 768-dim audio/text embeddings.

TO/AO: three linear layers on one modality. EF: one projection per modality,
concatenation, then three linear layers. LF: one 4->2 layer over the
concatenated TO and AO logits. AF: mean of the TO and AO logits.
Logit index 0 is Terminal, index 1 NonTerminal.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import nn

from .corpus import Label
from .encoders import EMBED_DIM, EmbeddingPair
from .errors import BadDims, MissingBaseModels, MissingModality

ARCHITECTURES = ("TO", "AO", "EF", "LF", "AF")
BASE_ARCHITECTURES = ("TO", "AO", "EF")
FUSION_OF_BASES = ("LF", "AF")
REQUIRED_MODALITIES = {
    "TO": ("text",),
    "AO": ("audio",),
    "EF": ("audio", "text"),
    "LF": ("audio", "text"),
    "AF": ("audio", "text"),
}
CHECKPOINT_FORMAT = "turnterm-head/1"


@dataclass
class HeadConfig:
    architecture: str
    hidden_dims: tuple = (256, 64)
    ef_modality_dim: int = 256
    dropout: float = 0.30
    seed: int = 0
    input_dim: int = EMBED_DIM

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if self.architecture in BASE_ARCHITECTURES and not self.hidden_dims:
            raise BadDims(f"{self.architecture} needs at least one hidden layer size")
        if any(h <= 0 for h in self.hidden_dims) or self.ef_modality_dim <= 0 or self.input_dim <= 0:
            raise BadDims(f"layer sizes must be positive: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d


def _mlp(dims, dropout) -> nn.Sequential:
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        if i:
            layers += [nn.ReLU(), nn.Dropout(dropout)]
        layers.append(nn.Linear(a, b))
    return nn.Sequential(*layers)


class SingleModalityHead(nn.Module):
    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        self.modality = "text" if config.architecture == "TO" else "audio"
        self.net = _mlp((config.input_dim, *config.hidden_dims, 2), config.dropout)

    def forward(self, audio=None, text=None):
        x = text if self.modality == "text" else audio
        if x is None:
            raise MissingModality(f"{self.config.architecture} needs the {self.modality} embedding")
        return self.net(x)


class EarlyFusionHead(nn.Module):
    def __init__(self, config: HeadConfig):
        super().__init__()
        self.config = config
        d = config.ef_modality_dim
        self.audio_proj = nn.Linear(config.input_dim, d)
        self.text_proj = nn.Linear(config.input_dim, d)
        self.act = nn.Sequential(nn.ReLU(), nn.Dropout(config.dropout))
        self.net = _mlp((2 * d, *config.hidden_dims, 2), config.dropout)

    def forward(self, audio=None, text=None):
        if audio is None or text is None:
            raise MissingModality("EF needs both audio and text embeddings")
        z = torch.cat([self.act(self.audio_proj(audio)), self.act(self.text_proj(text))], dim=-1)
        return self.net(z)


class _BaseFusion(nn.Module):
    """Holds trained TO/AO outside the module tree so they stay frozen and
    out of this head's parameters and checkpoint."""

    def __init__(self, config: HeadConfig, text_model, audio_model):
        super().__init__()
        if text_model is None or audio_model is None:
            raise MissingBaseModels(f"{config.architecture} needs trained TO and AO models")
        if text_model.config.architecture != "TO" or audio_model.config.architecture != "AO":
            raise MissingBaseModels(f"{config.architecture} bases must be (TO, AO)")
        self.config = config
        self.bases = (text_model, audio_model)
        for m in self.bases:
            m.eval()
            for p in m.parameters():
                p.requires_grad_(False)

    def base_logits(self, audio, text):
        if audio is None or text is None:
            raise MissingModality(f"{self.config.architecture} needs both audio and text embeddings")
        to, ao = self.bases
        with torch.no_grad():
            return to(text=text), ao(audio=audio)


class LateFusionHead(_BaseFusion):
    def __init__(self, config, text_model, audio_model):
        super().__init__(config, text_model, audio_model)
        self.fuse = nn.Linear(4, 2)

    def forward(self, audio=None, text=None):
        lt, la = self.base_logits(audio, text)
        return self.fuse(torch.cat([lt, la], dim=-1))


class AverageFusionHead(_BaseFusion):
    def forward(self, audio=None, text=None):
        lt, la = self.base_logits(audio, text)
        return (lt + la) / 2


def _seeded_init(module: nn.Module, seed: int) -> None:
    g = torch.Generator().manual_seed(int(seed))
    for layer in module.modules():
        if isinstance(layer, nn.Linear):
            bound = 1.0 / layer.in_features ** 0.5
            with torch.no_grad():
                layer.weight.copy_(torch.empty_like(layer.weight).uniform_(-bound, bound, generator=g))
                layer.bias.copy_(torch.empty_like(layer.bias).uniform_(-bound, bound, generator=g))


def init_head(config: HeadConfig, text_model=None, audio_model=None) -> nn.Module:
    arch = config.architecture
    if arch in ("TO", "AO"):
        model = SingleModalityHead(config)
    elif arch == "EF":
        model = EarlyFusionHead(config)
    elif arch == "LF":
        model = LateFusionHead(config, text_model, audio_model)
    else:
        model = AverageFusionHead(config, text_model, audio_model)
    _seeded_init(model, config.seed)
    return model


def layer_shapes(model: nn.Module) -> list[tuple[int, int]]:
    return [(m.in_features, m.out_features) for m in model.modules() if isinstance(m, nn.Linear)]


def expected_parameter_count(config: HeadConfig) -> int:
    """Closed-form parameter count (weights + biases) for a head's own layers."""

    def dense(dims):
        return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))

    if config.architecture in ("TO", "AO"):
        return dense((config.input_dim, *config.hidden_dims, 2))
    if config.architecture == "EF":
        d = config.ef_modality_dim
        return 2 * (config.input_dim * d + d) + dense((2 * d, *config.hidden_dims, 2))
    if config.architecture == "LF":
        return 4 * 2 + 2
    return 0


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _as_tensor(v):
    if v is None:
        return None
    t = torch.as_tensor(np.asarray(v, dtype=np.float32))
    return t.unsqueeze(0) if t.dim() == 1 else t


def _param_dtype(model):
    for p in model.parameters():
        return p.dtype
    bases = getattr(model, "bases", ())
    return _param_dtype(bases[0]) if bases else torch.float32


def batch_logits(model: nn.Module, audio=None, text=None, training: bool = False) -> torch.Tensor:
    arch = model.config.architecture
    for needed in REQUIRED_MODALITIES[arch]:
        if (audio if needed == "audio" else text) is None:
            raise MissingModality(f"{arch} needs the {needed} embedding")
    dtype = _param_dtype(model)
    audio = _as_tensor(audio)
    text = _as_tensor(text)
    audio = audio.to(dtype) if audio is not None else None
    text = text.to(dtype) if text is not None else None
    model.train(training)
    if training:
        return model(audio=audio, text=text)
    with torch.no_grad():
        return model(audio=audio, text=text)


def forward(model: nn.Module, emb: EmbeddingPair, training: bool = False) -> np.ndarray:
    """Logits (length 2) for one embedding pair; dropout only when ``training``."""
    out = batch_logits(model, emb.audio_vec, emb.text_vec, training=training)
    return out[0].detach().cpu().numpy()


def decide(logits) -> np.ndarray:
    """Argmax with ties going to NonTerminal (index 1)."""
    logits = np.asarray(logits)
    return np.where(logits[..., 0] > logits[..., 1], 0, 1)


def predict(model: nn.Module, emb: EmbeddingPair) -> Label:
    return Label.from_index(int(decide(forward(model, emb, training=False))))


def checkpoint_name(architecture: str, train_setting: str, fold, seed: int) -> str:
    return f"{architecture}__{train_setting}__fold-{fold}__seed-{seed}.safetensors"


def save_head(model: nn.Module, path, base_refs: Optional[dict] = None, extra: Optional[dict] = None) -> None:
    """Write config JSON + raw tensors in one safetensors container (atomic)."""
    from safetensors.torch import save

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": json.dumps(model.config.to_dict(), sort_keys=True),
        "base_refs": json.dumps(base_refs or {}, sort_keys=True),
        "extra": json.dumps(extra or {}, sort_keys=True),
    }
    tensors = {k: v.detach().cpu().contiguous() for k, v in model.state_dict().items()}
    if not tensors:
        # safetensors refuses an empty file body; AF has no parameters of its own
        tensors = {"__empty__": torch.zeros(0)}
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_canonical(save(tensors, metadata=meta)))
    tmp.replace(path)


def _canonical(blob: bytes) -> bytes:
    """Rewrite the safetensors JSON header with sorted keys.

    The library emits header keys in hash-map order, which varies between
    runs; data offsets are relative to the end of the header so only the
    header bytes change.
    """
    n = int.from_bytes(blob[:8], "little")
    header = json.loads(blob[8:8 + n])
    text = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    text += b" " * (-len(text) % 8)
    return len(text).to_bytes(8, "little") + text + blob[8 + n:]


def read_checkpoint_meta(path) -> dict:
    from safetensors import safe_open

    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata()
    return {k: json.loads(v) if k != "format" else v for k, v in meta.items()}


def load_head(path, text_model=None, audio_model=None) -> nn.Module:
    """Rebuild a head from its checkpoint; LF/AF bases are loaded from their
    recorded references (relative to the checkpoint directory) unless given."""
    from safetensors.torch import load_file

    path = Path(path)
    meta = read_checkpoint_meta(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    config = HeadConfig(**meta["config"])
    if config.architecture in FUSION_OF_BASES:
        refs = meta["base_refs"]
        if text_model is None:
            text_model = load_head(path.parent / refs["TO"])
        if audio_model is None:
            audio_model = load_head(path.parent / refs["AO"])
    model = init_head(config, text_model, audio_model)
    state = load_file(str(path))
    state.pop("__empty__", None)
    model.load_state_dict(state)
    model.eval()
    return model
