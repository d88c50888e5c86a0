"""Annotated speaker-change samples: data model, manifest I/O and corpus statistics."""

from __future__ import annotations

import enum
import json
from collections import Counter, OrderedDict
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional

from .errors import (
    DuplicateSampleId,
    EmptyCorpus,
    MalformedTime,
    ManifestError,
    MissingField,
    NonPositiveDuration,
)


class Label(str, enum.Enum):
    TERMINAL = "Terminal"
    NON_TERMINAL = "NonTerminal"

    @property
    def index(self) -> int:
        # logit index used by every head: 0 = Terminal, 1 = NonTerminal
        return 0 if self is Label.TERMINAL else 1

    @classmethod
    def from_index(cls, idx: int) -> "Label":
        return cls.TERMINAL if idx == 0 else cls.NON_TERMINAL


class TurnCategory(str, enum.Enum):
    INTERRUPTION = "interruption"
    BACKCHANNEL = "backchannel"
    SMOOTH = "smooth"


BUCKETS = ("≤0.5", "0.5<x≤1", "1<x≤2", ">2")
_BUCKET_UPPER = (0.5, 1.0, 2.0)

REQUIRED_FIELDS = (
    "sample_id",
    "show_id",
    "speaker_id",
    "media_path",
    "segment_start",
    "segment_end",
    "label",
)


@dataclass(frozen=True)
class Sample:
    """The last speech segment of one speaker before a speaker change."""

    sample_id: str
    show_id: str
    speaker_id: str
    media_path: str
    segment_start: float
    segment_end: float
    label: Label
    change_time: Optional[float] = None
    manual_transcript: Optional[str] = None
    turn_category: Optional[TurnCategory] = None

    def __post_init__(self):
        object.__setattr__(self, "label", Label(self.label))
        if self.turn_category is not None:
            object.__setattr__(self, "turn_category", TurnCategory(self.turn_category))
        object.__setattr__(self, "segment_start", float(self.segment_start))
        object.__setattr__(self, "segment_end", float(self.segment_end))
        if self.change_time is None:
            object.__setattr__(self, "change_time", self.segment_end)
        else:
            object.__setattr__(self, "change_time", float(self.change_time))
        if self.segment_start < 0 or not self.segment_end > self.segment_start:
            raise MalformedTime(
                f"sample {self.sample_id!r}: need segment_end > segment_start >= 0, "
                f"got [{self.segment_start}, {self.segment_end}]"
            )
        if self.change_time != self.segment_end:
            raise MalformedTime(
                f"sample {self.sample_id!r}: change_time {self.change_time} != segment_end {self.segment_end}"
            )

    @property
    def duration(self) -> float:
        # microsecond rounding keeps annotation times like 10.2 -> 10.7 on the 0.5 boundary
        return round(self.segment_end - self.segment_start, 6)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label"] = self.label.value
        d["turn_category"] = self.turn_category.value if self.turn_category else None
        return d

    @classmethod
    def from_dict(cls, data: dict, record=None) -> "Sample":
        for name in REQUIRED_FIELDS:
            if data.get(name) is None:
                raise MissingField(record if record is not None else data.get("sample_id"), name)
        try:
            return cls(
                sample_id=str(data["sample_id"]),
                show_id=str(data["show_id"]),
                speaker_id=str(data["speaker_id"]),
                media_path=str(data["media_path"]),
                segment_start=data["segment_start"],
                segment_end=data["segment_end"],
                change_time=data.get("change_time"),
                label=data["label"],
                manual_transcript=data.get("manual_transcript"),
                turn_category=data.get("turn_category"),
            )
        except MalformedTime:
            raise
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"record {record}: {exc}") from exc


@dataclass(frozen=True)
class Corpus:
    samples: tuple[Sample, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen = set()
        for s in self.samples:
            if s.sample_id in seen:
                raise DuplicateSampleId(s.sample_id)
            seen.add(s.sample_id)

    @property
    def shows(self) -> list[str]:
        return sorted({s.show_id for s in self.samples})

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def by_id(self) -> dict[str, Sample]:
        return {s.sample_id: s for s in self.samples}

    def subset(self, show_ids: Iterable[str]) -> "Corpus":
        keep = set(show_ids)
        return Corpus(tuple(s for s in self.samples if s.show_id in keep))


def load_manifest(path) -> Corpus:
    """Read a JSON-Lines manifest (one Sample per line).

    Blank lines are skipped; every other line must parse into a valid Sample.
    """
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            samples.append(Sample.from_dict(data, record=f"{path}:{lineno}"))
    return Corpus(tuple(samples))


def save_manifest(corpus: Corpus, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for s in corpus.samples:
            fh.write(json.dumps(s.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def duration_bucket(duration: float) -> str:
    if not duration > 0:
        raise NonPositiveDuration(f"duration must be > 0, got {duration}")
    for name, upper in zip(BUCKETS, _BUCKET_UPPER):
        if duration <= upper:
            return name
    return BUCKETS[-1]


def round_half_up(value, ndigits: int = 0) -> Decimal:
    if isinstance(value, Fraction):
        value = Decimal(value.numerator) / Decimal(value.denominator)
    elif isinstance(value, float):
        value = Decimal(repr(value))
    quantum = Decimal(1).scaleb(-ndigits)
    return Decimal(value).quantize(quantum, rounding=ROUND_HALF_UP)


@dataclass
class CorpusStats:
    """Label-by-duration and per-show summaries."""

    total: int
    label_counts: dict[str, int]
    bucket_counts: dict[str, dict[str, int]]
    bucket_percent: dict[str, dict[str, int]]
    bucket_percent_raw: dict[str, dict[str, float]]
    show_counts: dict[str, int]
    show_durations: dict[str, float]
    show_durations_raw: dict[str, float] = field(default_factory=dict)

    def label_table_rows(self) -> list[dict]:
        rows = []
        for label in (Label.TERMINAL.value, Label.NON_TERMINAL.value):
            row = {"label": label, "count": self.label_counts.get(label, 0)}
            for b in BUCKETS:
                row[b] = self.bucket_percent[label][b]
            rows.append(row)
        return rows

    def show_table_rows(self) -> list[dict]:
        return [
            {"show": show, "samples": self.show_counts[show], "duration_s": f"{self.show_durations[show]:.2f}"}
            for show in self.show_counts
        ]

    def format_table(self) -> str:
        lines = ["Label        Nb    " + "  ".join(f"{b:>8}" for b in BUCKETS)]
        for row in self.label_table_rows():
            cells = "  ".join(f"{row[b]:>7}%" for b in BUCKETS)
            lines.append(f"{row['label']:<12} {row['count']:>5} {cells}")
        lines.append("")
        lines.append(f"{'Show':<24} {'Samples':>8} {'Dur. (s)':>10}")
        for row in self.show_table_rows():
            lines.append(f"{row['show']:<24} {row['samples']:>8} {row['duration_s']:>10}")
        lines.append(f"{'Total':<24} {self.total:>8}")
        return "\n".join(lines)


def corpus_stats(corpus: Corpus) -> CorpusStats:
    if len(corpus) == 0:
        raise EmptyCorpus("cannot compute statistics of an empty corpus")
    labels = (Label.TERMINAL.value, Label.NON_TERMINAL.value)
    counts = Counter(s.label.value for s in corpus)
    bucket_counts = {lab: OrderedDict((b, 0) for b in BUCKETS) for lab in labels}
    for s in corpus:
        bucket_counts[s.label.value][duration_bucket(s.duration)] += 1

    percent, percent_raw = {}, {}
    for lab in labels:
        n = counts.get(lab, 0)
        percent[lab] = {
            b: int(round_half_up(Fraction(100 * c, n))) if n else 0 for b, c in bucket_counts[lab].items()
        }
        percent_raw[lab] = {b: (100.0 * c / n if n else 0.0) for b, c in bucket_counts[lab].items()}

    show_counts: dict[str, int] = {}
    show_raw: dict[str, Decimal] = {}
    for s in sorted(corpus, key=lambda s: s.show_id):
        show_counts[s.show_id] = show_counts.get(s.show_id, 0) + 1
        # Decimal sum avoids float drift across hundreds of segments
        show_raw[s.show_id] = show_raw.get(s.show_id, Decimal(0)) + Decimal(repr(s.duration))
    show_durations = {k: float(round_half_up(v, 2)) for k, v in show_raw.items()}

    return CorpusStats(
        total=len(corpus),
        label_counts={lab: counts.get(lab, 0) for lab in labels},
        bucket_counts={lab: dict(v) for lab, v in bucket_counts.items()},
        bucket_percent=percent,
        bucket_percent_raw=percent_raw,
        show_counts=show_counts,
        show_durations=show_durations,
        show_durations_raw={k: float(v) for k, v in show_raw.items()},
    )
