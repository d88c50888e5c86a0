import json
from decimal import Decimal

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from turnterm.corpus import (
    BUCKETS,
    Corpus,
    Label,
    Sample,
    corpus_stats,
    duration_bucket,
    load_manifest,
    round_half_up,
    save_manifest,
)
from turnterm.errors import (
    DuplicateSampleId,
    EmptyCorpus,
    MalformedTime,
    MissingField,
    NonPositiveDuration,
)

from conftest import write_jsonl
from reconstructed import PERCENT, SHOWS, reconstructed_corpus


def _sample(sid="a", show="s1", start=0.0, end=1.5, label="Terminal", **kw):
    return Sample(sid, show, "spk", "m.wav", start, end, label, **kw)


@pytest.mark.parametrize("d,bucket", [(0.5, "≤0.5"), (0.01, "≤0.5"), (0.500001, "0.5<x≤1"), (1.0, "0.5<x≤1"),
                                      (2.0, "1<x≤2"), (2.01, ">2"), (300.0, ">2")])
def test_duration_bucket_boundaries(d, bucket):
    assert duration_bucket(d) == bucket


@pytest.mark.parametrize("d", [0.0, -1.0])
def test_duration_bucket_rejects_non_positive(d):
    with pytest.raises(NonPositiveDuration):
        duration_bucket(d)


@given(st.floats(min_value=1e-6, max_value=1e4, allow_nan=False))
def test_every_duration_in_exactly_one_bucket(d):
    b = duration_bucket(d)
    assert b in BUCKETS
    bounds = {"≤0.5": (0, 0.5), "0.5<x≤1": (0.5, 1), "1<x≤2": (1, 2), ">2": (2, float("inf"))}
    lo, hi = bounds[b]
    assert lo < d <= hi


def test_segment_end_before_start_is_malformed():
    with pytest.raises(MalformedTime):
        _sample(start=3.0, end=2.0)


def test_change_time_must_match_segment_end():
    assert _sample().change_time == 1.5
    with pytest.raises(MalformedTime):
        _sample(change_time=1.7)


def test_duration_of_annotation_times_lands_on_boundary():
    # 10.7 - 10.2 is 0.4999999999999982 in binary floating point
    assert _sample(start=10.2, end=10.7).duration == 0.5
    assert duration_bucket(_sample(start=10.2, end=10.7).duration) == "≤0.5"


def test_duplicate_ids_rejected():
    with pytest.raises(DuplicateSampleId):
        Corpus((_sample(), _sample()))


def test_empty_manifest(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("")
    c = load_manifest(p)
    assert len(c) == 0 and c.shows == []
    with pytest.raises(EmptyCorpus):
        corpus_stats(c)


def test_missing_field_reported(tmp_path):
    row = _sample().to_dict()
    del row["label"]
    write_jsonl(tmp_path / "m.jsonl", [row])
    with pytest.raises(MissingField) as exc:
        load_manifest(tmp_path / "m.jsonl")
    assert exc.value.field == "label"


sample_st = st.builds(
    lambda i, show, start, dur, lab, tr: Sample(f"id{i}", f"show{show}", "spk", "m.wav", start,
                                                round(start + dur, 3), lab, manual_transcript=tr),
    st.integers(0, 10**6), st.integers(0, 4), st.floats(0, 1000).map(lambda x: round(x, 3)),
    st.floats(0.01, 20).map(lambda x: round(x, 3)), st.sampled_from(list(Label)),
    st.one_of(st.none(), st.text(max_size=30)),
)


@settings(max_examples=50, deadline=None)
@given(st.lists(sample_st, max_size=20, unique_by=lambda s: s.sample_id))
def test_manifest_round_trip(tmp_path_factory, samples):
    path = tmp_path_factory.mktemp("rt") / "m.jsonl"
    corpus = Corpus(tuple(samples))
    save_manifest(corpus, path)
    assert load_manifest(path) == corpus


def test_single_sample_stats():
    s = corpus_stats(Corpus((_sample(start=0.0, end=1.5),)))
    assert s.label_counts["Terminal"] == 1
    assert [s.bucket_percent["Terminal"][b] for b in BUCKETS] == [0, 0, 100, 0]


def test_round_half_up():
    assert round_half_up(Decimal("12.5")) == 13
    assert round_half_up(Decimal("2.675"), 2) == Decimal("2.68")
    assert round_half_up(0.5) == 1


@settings(max_examples=30, deadline=None)
@given(st.lists(sample_st, min_size=1, max_size=40, unique_by=lambda s: s.sample_id))
def test_bucket_counts_partition_label_totals(samples):
    stats = corpus_stats(Corpus(tuple(samples)))
    for label in ("Terminal", "NonTerminal"):
        assert sum(stats.bucket_counts[label].values()) == stats.label_counts.get(label, 0)
    assert sum(stats.show_counts.values()) == len(samples)


def test_stats_on_constructed_table_marginals():
    # constructed corpus reproducing the published marginals, not the released data
    stats = corpus_stats(reconstructed_corpus())
    assert stats.total == 1954
    for label, (n, pct) in PERCENT.items():
        assert stats.label_counts[label] == n
        assert tuple(stats.bucket_percent[label][b] for b in BUCKETS) == pct
    for show, (n, dur) in SHOWS.items():
        assert stats.show_counts[show] == n
        assert f"{stats.show_durations[show]:.2f}" == dur
    rows = {r["show"]: r for r in stats.show_table_rows()}
    assert rows["BFMStory"] == {"show": "BFMStory", "samples": 200, "duration_s": "853.34"}
    assert rows["LaPlaceDuVillage"]["duration_s"] == "1316.76"


def test_manifest_json_keys_sorted(tmp_path):
    save_manifest(Corpus((_sample(),)), tmp_path / "m.jsonl")
    row = json.loads((tmp_path / "m.jsonl").read_text())
    assert list(row) == sorted(row)
