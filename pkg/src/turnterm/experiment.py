"""Leave-one-show-out training/evaluation grid over architectures, settings and seeds."""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Corpus, Label, round_half_up
from .errors import (
    MissingEmbedding,
    MissingModality,
    NonFiniteLoss,
    TooFewSamples,
    TooFewShows,
)
from .heads import (
    ARCHITECTURES,
    FUSION_OF_BASES,
    REQUIRED_MODALITIES,
    HeadConfig,
    batch_logits,
    checkpoint_name,
    decide,
    init_head,
    load_head,
    save_head,
)
from .preprocess import ALL_SETTINGS, InputSetting, parse_setting

log = logging.getLogger(__name__)

__all__ = [
    "InputSetting",
    "ALL_SETTINGS",
    "Fold",
    "FoldPlan",
    "TrainConfig",
    "PredictionRecord",
    "EmbeddingSet",
    "Job",
    "plan_folds",
    "split_train_val",
    "train_model",
    "enumerate_jobs",
    "evaluate_model",
    "run_grid",
]


@dataclass(frozen=True)
class Fold:
    index: int
    test_show: str
    train_shows: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]

    def __len__(self):
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)


def plan_folds(corpus: Corpus) -> FoldPlan:
    shows = corpus.shows
    if len(shows) < 2:
        raise TooFewShows(f"leave-one-show-out needs at least 2 shows, got {len(shows)}")
    return FoldPlan(tuple(Fold(i, s, tuple(x for x in shows if x != s)) for i, s in enumerate(shows)))


def fold_samples(corpus: Corpus, fold: Fold):
    train = [s for s in corpus if s.show_id != fold.test_show]
    test = [s for s in corpus if s.show_id == fold.test_show]
    return train, test


def split_train_val(samples: Sequence, seed: int, val_fraction: float = 0.30, stratify: bool = False):
    """Random split; |val| = round(val_fraction * n), half rounding up.

    Both halves keep the input order. With ``stratify`` each label is split
    separately (totals may then differ from the plain rule by one).
    """
    n = len(samples)
    if n < 4:
        raise TooFewSamples(f"need at least 4 samples to split, got {n}")
    rng = np.random.default_rng(seed)
    if stratify:
        labels = np.array([Label(s.label).index for s in samples])
        val_idx = []
        for lab in (0, 1):
            idx = np.flatnonzero(labels == lab)
            k = int(round_half_up(val_fraction * len(idx)))
            val_idx.extend(rng.permutation(idx)[:k].tolist())
        val_set = set(val_idx)
    else:
        n_val = int(round_half_up(val_fraction * n))
        val_set = set(rng.permutation(n)[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_set]
    val = [s for i, s in enumerate(samples) if i in val_set]
    return train, val


@dataclass
class TrainConfig:
    val_fraction: float = 0.30
    patience: int = 5
    max_epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-4
    seed: int = 0
    stratify: bool = False
    # LF trains a 10-parameter layer over small frozen logits; at 1e-4 its
    # validation accuracy cannot move within the patience window
    lf_learning_rate: Optional[float] = 1e-2

    def to_dict(self):
        return asdict(self)

    def lr_for(self, architecture: str) -> float:
        if architecture == "LF" and self.lf_learning_rate is not None:
            return self.lf_learning_rate
        return self.learning_rate


@dataclass
class EmbeddingSet:
    """Row-aligned embeddings for a list of samples under one input setting."""

    sample_ids: list
    labels: np.ndarray
    audio: Optional[np.ndarray] = None
    text: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.sample_ids)

    def take(self, idx) -> "EmbeddingSet":
        idx = np.asarray(idx, dtype=int)
        return EmbeddingSet(
            [self.sample_ids[i] for i in idx],
            self.labels[idx],
            None if self.audio is None else self.audio[idx],
            None if self.text is None else self.text[idx],
        )

    def select(self, sample_ids) -> "EmbeddingSet":
        pos = {sid: i for i, sid in enumerate(self.sample_ids)}
        missing = [s for s in sample_ids if s not in pos]
        if missing:
            raise MissingEmbedding(f"no embedding for {len(missing)} samples, e.g. {missing[:3]}")
        return self.take([pos[s] for s in sample_ids])

    def save(self, path, stamp: Optional[dict] = None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {"sample_ids": np.array(self.sample_ids), "labels": self.labels}
        if stamp:
            arrays["_meta"] = np.array(json.dumps(stamp, sort_keys=True))
        if self.audio is not None:
            arrays["audio"] = self.audio
        if self.text is not None:
            arrays["text"] = self.text
        tmp = path.with_name(path.name + ".tmp.npz")
        np.savez(tmp, **arrays)
        tmp.replace(path)

    @classmethod
    def load(cls, path) -> "EmbeddingSet":
        with np.load(path, allow_pickle=False) as z:
            return cls(
                [str(s) for s in z["sample_ids"]],
                z["labels"],
                z["audio"] if "audio" in z.files else None,
                z["text"] if "text" in z.files else None,
            )


@dataclass
class TrainingLog:
    val_accuracy: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    stopped_early: bool = False

    def to_dict(self):
        return asdict(self)


class EarlyStopping:
    """Stop once ``patience`` consecutive epochs bring no strict improvement."""

    def __init__(self, patience: int = 5):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.epoch = 0
        self.bad_epochs = 0

    def update(self, score: float) -> bool:
        self.epoch += 1
        if score > self.best:
            self.best = score
            self.best_epoch = self.epoch
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def _check_modalities(arch, data: EmbeddingSet):
    for m in REQUIRED_MODALITIES[arch]:
        if getattr(data, m) is None:
            raise MissingModality(f"{arch} needs {m} embeddings")


def _accuracy(model, data: EmbeddingSet, featurizer=None) -> float:
    if len(data) == 0:
        return float("nan")
    if featurizer is None:
        logits = batch_logits(model, data.audio, data.text, training=False)
    else:
        featurizer.eval()
        model.eval()
        with torch.no_grad():
            a, t = featurizer(np.arange(len(data)), data)
            logits = model(audio=a, text=t)
    pred = decide(logits.detach().cpu().numpy())
    return float(np.mean(pred == data.labels))


def train_model(
    head_config: HeadConfig,
    train_config: TrainConfig,
    train: EmbeddingSet,
    val: EmbeddingSet,
    text_model=None,
    audio_model=None,
    featurizer: Optional[torch.nn.Module] = None,
    val_hook: Optional[Callable[[int], float]] = None,
):
    """Fit one head with early stopping on validation accuracy.

    Returns ``(model, TrainingLog)`` with the parameters of the best validation
    epoch. ``featurizer`` (optional, trainable encoders) maps ``(row indices,
    EmbeddingSet)`` to ``(audio, text)`` tensors; its parameters are optimized
    together with the head. ``val_hook`` replaces the measured validation
    accuracy (used to script the stopping rule in tests).
    """
    arch = head_config.architecture
    if len(train) == 0 or len(val) == 0:
        raise TooFewSamples("training and validation splits must be non-empty")
    if featurizer is None:
        _check_modalities(arch, train)
        _check_modalities(arch, val)
    model = init_head(head_config, text_model, audio_model)
    tlog = TrainingLog()
    if arch == "AF":
        tlog.val_accuracy.append(_accuracy(model, val, featurizer))
        return model, tlog

    params = [p for p in model.parameters() if p.requires_grad]
    if featurizer is not None:
        params += [p for p in featurizer.parameters() if p.requires_grad]
    lr = train_config.lr_for(arch)
    opt = torch.optim.Adam(params, lr=lr)
    labels = torch.as_tensor(np.asarray(train.labels), dtype=torch.long)
    audio = None if train.audio is None else torch.as_tensor(np.asarray(train.audio, dtype=np.float32))
    text = None if train.text is None else torch.as_tensor(np.asarray(train.text, dtype=np.float32))
    stopper = EarlyStopping(train_config.patience)
    best_state = copy.deepcopy(model.state_dict())
    best_feat = copy.deepcopy(featurizer.state_dict()) if featurizer is not None else None
    gen = torch.Generator().manual_seed(int(train_config.seed))

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(train_config.seed))
        for epoch in range(1, train_config.max_epochs + 1):
            model.train()
            if featurizer is not None:
                featurizer.train()
            order = torch.randperm(len(train), generator=gen)
            total, count = 0.0, 0
            for start in range(0, len(train), train_config.batch_size):
                idx = order[start:start + train_config.batch_size]
                if featurizer is None:
                    a = audio[idx] if audio is not None else None
                    t = text[idx] if text is not None else None
                else:
                    a, t = featurizer(idx.numpy(), train)
                loss = F.cross_entropy(model(audio=a, text=t), labels[idx])
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(
                        f"{arch}: non-finite loss {loss.item()} at epoch {epoch}, batch starting {start} "
                        f"(lr={lr}, seed={train_config.seed})"
                    )
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                count += len(idx)
            tlog.train_loss.append(total / count)
            acc = val_hook(epoch) if val_hook is not None else _accuracy(model, val, featurizer)
            tlog.val_accuracy.append(acc)
            stop = stopper.update(acc)
            if stopper.best_epoch == epoch:
                best_state = copy.deepcopy(model.state_dict())
                if featurizer is not None:
                    best_feat = copy.deepcopy(featurizer.state_dict())
            if stop:
                tlog.stopped_early = True
                break
    tlog.best_epoch = stopper.best_epoch
    tlog.stopped_epoch = stopper.epoch
    model.load_state_dict(best_state)
    model.eval()
    if featurizer is not None:
        featurizer.load_state_dict(best_feat)
        featurizer.eval()
    return model, tlog


class EncoderFeaturizer(torch.nn.Module):
    """Runs trainable encoders on raw inputs; frozen modalities use the cached vectors.

    ``raw_audio`` / ``raw_text`` map sample_id to waveform / transcript text.
    """

    def __init__(self, audio_provider=None, text_provider=None, raw_audio=None, raw_text=None):
        super().__init__()
        self.audio_provider = audio_provider
        self.text_provider = text_provider
        self.raw_audio = raw_audio or {}
        self.raw_text = raw_text or {}
        if audio_provider is not None and audio_provider.trainable:
            self.audio_module = audio_provider.module
        if text_provider is not None and text_provider.trainable:
            self.text_module = text_provider.module

    def forward(self, idx, data: EmbeddingSet):
        ids = [data.sample_ids[i] for i in idx]
        if hasattr(self, "audio_module"):
            a = self.audio_provider.forward([self.raw_audio[s] for s in ids])
        else:
            a = None if data.audio is None else torch.as_tensor(data.audio[idx])
        if hasattr(self, "text_module"):
            t = self.text_provider.forward([self.raw_text[s] for s in ids])
        else:
            t = None if data.text is None else torch.as_tensor(data.text[idx])
        return a, t


@dataclass(frozen=True)
class Job:
    architecture: str
    train_setting: str
    fold: int
    test_show: str
    seed_index: int
    seed: int

    @property
    def key(self) -> str:
        return f"{self.architecture}__{self.train_setting}__fold-{self.fold}__seed-{self.seed_index}"

    @property
    def checkpoint(self) -> str:
        return checkpoint_name(self.architecture, self.train_setting, self.fold, self.seed_index)


def derive_seed(base_seed: int, architecture: str, train_setting: str, fold: int, seed_index: int) -> int:
    ident = f"{base_seed}|{architecture}|{train_setting}|{fold}|{seed_index}"
    return int.from_bytes(hashlib.sha256(ident.encode()).digest()[:4], "little")


def enumerate_jobs(architectures, train_settings, fold_plan: FoldPlan, n_seeds: int, base_seed: int = 0) -> list[Job]:
    """Cartesian product (architecture, train setting, fold, seed).

    Every job's model is later evaluated under all three test settings.
    """
    archs = list(architectures)
    settings = [parse_setting(s).value for s in train_settings]
    if not archs or not settings or len(fold_plan) == 0 or n_seeds < 1:
        raise ValueError("architectures, train settings, folds and seeds must all be non-empty")
    for a in archs:
        if a not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {a!r}")
    jobs = []
    for arch, setting, fold, k in itertools.product(archs, settings, fold_plan, range(n_seeds)):
        jobs.append(Job(arch, setting, fold.index, fold.test_show, k, derive_seed(base_seed, arch, setting, fold.index, k)))
    return jobs


def evaluation_configs(jobs: Sequence[Job], test_settings=ALL_SETTINGS) -> list[tuple]:
    """(architecture, train_setting, test_setting, fold, seed_index) for every evaluation."""
    return [
        (j.architecture, j.train_setting, parse_setting(t).value, j.fold, j.seed_index)
        for j in jobs
        for t in test_settings
    ]


@dataclass(frozen=True)
class PredictionRecord:
    sample_id: str
    show_id: str
    architecture: str
    train_setting: str
    test_setting: str
    fold: int
    seed: int
    predicted_label: str
    true_label: str
    correct: int
    duration: float

    def __post_init__(self):
        if self.correct != int(self.predicted_label == self.true_label):
            raise ValueError(f"inconsistent record for {self.sample_id}: correct={self.correct}")

    def to_dict(self):
        return asdict(self)


def evaluate_model(model, samples, data: EmbeddingSet, test_setting, job: Job) -> list[PredictionRecord]:
    """One record per test sample; ``data`` holds embeddings under ``test_setting``."""
    test_setting = parse_setting(test_setting).value
    if not samples:
        return []
    sub = data.select([s.sample_id for s in samples])
    _check_modalities(model.config.architecture, sub)
    pred = decide(batch_logits(model, sub.audio, sub.text, training=False).numpy())
    out = []
    for s, p in zip(samples, pred):
        plab = Label.from_index(int(p)).value
        out.append(
            PredictionRecord(
                sample_id=s.sample_id,
                show_id=s.show_id,
                architecture=job.architecture,
                train_setting=job.train_setting,
                test_setting=test_setting,
                fold=job.fold,
                seed=job.seed_index,
                predicted_label=plab,
                true_label=s.label.value,
                correct=int(plab == s.label.value),
                duration=s.duration,
            )
        )
    return out


# --- results store -----------------------------------------------------------


class ResultsStore:
    """Per-job record files (``records/<job>.jsonl``) merged on read, plus checkpoints."""

    def __init__(self, root, stamp: Optional[dict] = None):
        self.root = Path(root)
        self.stamp = stamp
        self.records_dir = self.root / "records"
        self.ckpt_dir = self.root / "checkpoints"
        self.logs_dir = self.root / "logs"

    def record_path(self, job: Job) -> Path:
        return self.records_dir / f"{job.key}.jsonl"

    def is_done(self, job: Job) -> bool:
        return self.record_path(job).exists() and (self.ckpt_dir / job.checkpoint).exists()

    def write_records(self, job: Job, records) -> None:
        self.records_dir.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=self.records_dir, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
        os.replace(tmp, self.record_path(job))

    def write_log(self, job: Job, tlog: TrainingLog, split: Optional[dict] = None) -> None:
        self.logs_dir.mkdir(parents=True, exist_ok=True)
        with open(self.logs_dir / f"{job.key}.json", "w", encoding="utf-8") as fh:
            meta = {"_meta": self.stamp} if self.stamp else {}
            json.dump({**tlog.to_dict(), "split": split or {}, **meta}, fh, sort_keys=True)

    def read_log(self, job: Job) -> dict:
        with open(self.logs_dir / f"{job.key}.json", encoding="utf-8") as fh:
            return json.load(fh)

    def read_records(self) -> list[PredictionRecord]:
        return read_records(self.root)


def read_records(root) -> list[PredictionRecord]:
    root = Path(root)
    rec_dir = root / "records" if (root / "records").is_dir() else root
    out = []
    for path in sorted(rec_dir.glob("*.jsonl")):
        with open(path, encoding="utf-8") as fh:
            out.extend(PredictionRecord(**json.loads(line)) for line in fh if line.strip())
    return out


# --- grid runner -------------------------------------------------------------


@dataclass
class GridSpec:
    architectures: tuple = ARCHITECTURES
    train_settings: tuple = tuple(s.value for s in ALL_SETTINGS)
    test_settings: tuple = tuple(s.value for s in ALL_SETTINGS)
    n_seeds: int = 10
    base_seed: int = 0


def _job_order(jobs):
    # TO/AO must exist before LF/AF of the same (train setting, fold, seed)
    return sorted(jobs, key=lambda j: (j.architecture in FUSION_OF_BASES, j.key))


def _run_job(job: Job, corpus: Corpus, embeddings: dict, out_dir, head_defaults: dict, train_defaults: dict,
             test_settings, base_seed: int, stamp: Optional[dict] = None) -> int:
    torch.set_num_threads(1)
    store = ResultsStore(out_dir, stamp)
    fold_train = [s for s in corpus if s.show_id != job.test_show]
    test = [s for s in corpus if s.show_id == job.test_show]
    tcfg = TrainConfig(**{**train_defaults, "seed": job.seed})
    hcfg = HeadConfig(architecture=job.architecture, **{**head_defaults, "seed": job.seed})
    tr, va = split_train_val(fold_train, seed=job.seed, val_fraction=tcfg.val_fraction, stratify=tcfg.stratify)
    leak = {s.show_id for s in tr + va} & {job.test_show}
    assert not leak, f"test show {job.test_show} leaked into training of {job.key}"
    data = embeddings[job.train_setting]
    bases, base_refs = {}, {}
    if job.architecture in FUSION_OF_BASES:
        for arch in ("TO", "AO"):
            base = Job(arch, job.train_setting, job.fold, job.test_show, job.seed_index,
                       derive_seed(base_seed, arch, job.train_setting, job.fold, job.seed_index))
            path = store.ckpt_dir / base.checkpoint
            if not path.exists():
                raise FileNotFoundError(f"{job.key} needs base checkpoint {path.name}")
            bases[arch] = load_head(path)
            base_refs[arch] = base.checkpoint
    model, tlog = train_model(
        hcfg, tcfg, data.select([s.sample_id for s in tr]), data.select([s.sample_id for s in va]),
        text_model=bases.get("TO"), audio_model=bases.get("AO"),
    )
    records = []
    for ts in test_settings:
        records.extend(evaluate_model(model, test, embeddings[parse_setting(ts).value], ts, job))
    save_head(model, store.ckpt_dir / job.checkpoint, base_refs=base_refs,
              extra={"train_config": tcfg.to_dict(), "job": asdict(job), **({"_meta": stamp} if stamp else {})})
    split = {
        "test_show": job.test_show,
        "train_shows": sorted({s.show_id for s in tr}),
        "val_shows": sorted({s.show_id for s in va}),
        "n_train": len(tr),
        "n_val": len(va),
        "n_test": len(test),
    }
    store.write_log(job, tlog, split)
    store.write_records(job, records)
    return len(records)


def run_grid(corpus: Corpus, embeddings: dict, out_dir, grid: GridSpec = GridSpec(),
             head_defaults: Optional[dict] = None, train_defaults: Optional[dict] = None,
             workers: int = 1, progress: Optional[Callable[[Job], None]] = None,
             stamp: Optional[dict] = None) -> dict:
    """Train and evaluate every job of the grid, skipping jobs already done.

    ``embeddings`` maps each input-setting name to an EmbeddingSet covering the
    corpus. ``stamp`` (toolkit version and config hash) is embedded in every
    checkpoint and job log. Returns a summary dict with job and record counts.
    """
    head_defaults = dict(head_defaults or {})
    train_defaults = dict(train_defaults or {})
    plan = plan_folds(corpus)
    jobs = enumerate_jobs(grid.architectures, grid.train_settings, plan, grid.n_seeds, grid.base_seed)
    store = ResultsStore(out_dir)
    todo = [j for j in _job_order(jobs) if not store.is_done(j)]
    args = (corpus, embeddings, str(out_dir), head_defaults, train_defaults, tuple(grid.test_settings), grid.base_seed,
            stamp)
    failures = []
    phases = [[j for j in todo if j.architecture not in FUSION_OF_BASES],
              [j for j in todo if j.architecture in FUSION_OF_BASES]]
    for phase in phases:
        if workers > 1 and len(phase) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futs = {pool.submit(_run_job, j, *args): j for j in phase}
                for fut, j in futs.items():
                    try:
                        fut.result()
                    except Exception as exc:
                        failures.append((j.key, repr(exc)))
                    if progress:
                        progress(j)
        else:
            for j in phase:
                try:
                    _run_job(j, *args)
                except Exception as exc:
                    log.exception("job %s failed", j.key)
                    failures.append((j.key, repr(exc)))
                if progress:
                    progress(j)
    expected = len(corpus) * len(grid.architectures) * len(grid.train_settings) * len(grid.test_settings) * grid.n_seeds
    n_records = len(store.read_records())
    return {
        "jobs": len(jobs),
        "ran": len(todo),
        "skipped": len(jobs) - len(todo),
        "failures": failures,
        "records": n_records,
        "expected_records": expected,
        "complete": not failures and n_records == expected,
    }


def grid_status(corpus: Corpus, out_dir, grid: GridSpec = GridSpec()) -> dict:
    jobs = enumerate_jobs(grid.architectures, grid.train_settings, plan_folds(corpus), grid.n_seeds, grid.base_seed)
    store = ResultsStore(out_dir)
    remaining = [j.key for j in jobs if not store.is_done(j)]
    return {"jobs": len(jobs), "done": len(jobs) - len(remaining), "remaining": remaining}
