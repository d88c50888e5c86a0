"""Accuracy tables over prediction records (per show, per duration bucket, overall)."""

from __future__ import annotations

from dataclasses import dataclass

import pandas as pd

from ..corpus import BUCKETS, duration_bucket
from ..errors import EmptyRecords

KEYS = ["architecture", "train_setting", "test_setting"]
GROUPINGS = ("show", "duration_bucket", "overall")
SETTING_LABELS = {"ref_auto": "ref", "ref_man": "ref_man", "3s_auto": "3s"}
AUDIO_ONLY = {"AO"}

# abbreviations used for the broadcast shows of the reference corpus
SHOW_ABBREV = {
    "BFMStory": "BS",
    "CaVousRegarde": "CR",
    "CultureEtVous": "CV",
    "DEBATE": "D",
    "EntreLesLignes": "EL",
    "LaPlaceDuVillage": "PV",
    "PileEtFace": "PF",
    "PlaneteShowbiz": "PS",
    "TopQuestions": "TQ",
    "fm": "FM",
}


def records_frame(records) -> pd.DataFrame:
    if isinstance(records, pd.DataFrame):
        df = records.copy()
    else:
        df = pd.DataFrame([r.to_dict() if hasattr(r, "to_dict") else dict(r) for r in records])
    if len(df) == 0:
        raise EmptyRecords("no prediction records")
    return df


@dataclass
class AccuracyTable:
    group_by: str
    frame: pd.DataFrame

    def cell(self, group, architecture, train_setting, test_setting) -> float:
        f = self.frame
        row = f[(f["group"] == group) & (f["architecture"] == architecture)
                & (f["train_setting"] == train_setting) & (f["test_setting"] == test_setting)]
        if len(row) != 1:
            raise KeyError((group, architecture, train_setting, test_setting))
        return float(row["accuracy"].iloc[0])

    def to_csv(self, path=None):
        out = self.frame.copy()
        out["accuracy"] = out["accuracy"].map(lambda v: f"{v:.2f}")
        return out.to_csv(path, index=False)

    def format_rows(self) -> list[str]:
        return [
            f"{r.architecture} / {r.train_setting} / {r.test_setting}"
            + ("" if self.group_by == "overall" else f" [{r.group}]")
            + f": {r.accuracy:.2f}"
            for r in self.frame.itertuples()
        ]


def aggregate_accuracy(records, group_by: str = "overall") -> AccuracyTable:
    """Mean of ``correct`` x 100 per (group, architecture, train, test), pooled over seeds."""
    if group_by not in GROUPINGS:
        raise ValueError(f"group_by must be one of {GROUPINGS}")
    df = records_frame(records)
    if group_by == "show":
        df["group"] = df["show_id"].astype(str)
    elif group_by == "duration_bucket":
        df["group"] = pd.Categorical(df["duration"].map(duration_bucket), categories=list(BUCKETS), ordered=True)
    else:
        df["group"] = "overall"
    agg = (
        df.groupby(["group", *KEYS], observed=True)["correct"]
        .agg(n="size", accuracy="mean")
        .reset_index()
    )
    agg["accuracy"] = 100.0 * agg["accuracy"]
    agg["group"] = agg["group"].astype(str)
    return AccuracyTable(group_by, agg[["group", *KEYS, "n", "accuracy"]])


def per_show_layout(records, train_setting: str, architectures=("AO", "EF")) -> pd.DataFrame:
    """Rows = shows (+ Mean), columns = (architecture, test setting) for one train setting.

    Audio-only heads see identical inputs under ref_auto and ref_man, so only
    their ref and 3s columns are shown.
    """
    return show_layout(aggregate_accuracy(records, "show").frame, train_setting, architectures)


def show_layout(by_show: pd.DataFrame, train_setting: str, architectures=("AO", "EF")) -> pd.DataFrame:
    """Same layout built from a long per-show table (columns group, KEYS, n, accuracy).

    The Mean row is the sample-weighted mean, i.e. the overall accuracy.
    """
    by_show = by_show[by_show["train_setting"] == train_setting]
    cols = {}
    for arch in architectures:
        tests = ["ref_auto", "3s_auto"] if arch in AUDIO_ONLY else ["ref_auto", "ref_man", "3s_auto"]
        for t in tests:
            sel = by_show[(by_show["architecture"] == arch) & (by_show["test_setting"] == t)]
            if not len(sel):
                continue
            col = sel.set_index("group")["accuracy"].astype(float)
            col.loc["Mean"] = float((sel["accuracy"] * sel["n"]).sum() / sel["n"].sum())
            cols[(arch, SETTING_LABELS[t])] = col
    if not cols:
        raise EmptyRecords(f"no per-show accuracies for train setting {train_setting!r}")
    table = pd.DataFrame(cols)
    table.columns = pd.MultiIndex.from_tuples(table.columns, names=["architecture", "test"])
    shows = sorted(s for s in table.index if s != "Mean")
    table = table.loc[shows + ["Mean"]]
    table.index = [f"({SHOW_ABBREV[s]})" if s in SHOW_ABBREV else s for s in shows] + ["Mean"]
    table.index.name = "Show"
    return table.round(2)


def duration_layout(records) -> pd.DataFrame:
    """Accuracy per duration bucket for every (architecture, train, test) triple."""
    frame = aggregate_accuracy(records, "duration_bucket").frame.rename(columns={"group": "bucket"})
    frame["bucket"] = pd.Categorical(frame["bucket"], categories=list(BUCKETS), ordered=True)
    return frame.sort_values([*KEYS, "bucket"]).reset_index(drop=True)


def duration_by_train(records) -> pd.DataFrame:
    """Accuracy per (architecture, train setting, bucket), pooled over test settings."""
    df = records_frame(records)
    df["bucket"] = pd.Categorical(df["duration"].map(duration_bucket), categories=list(BUCKETS), ordered=True)
    agg = (
        df.groupby(["architecture", "train_setting", "bucket"], observed=False)["correct"]
        .agg(n="size", accuracy="mean")
        .reset_index()
    )
    agg["accuracy"] = 100.0 * agg["accuracy"]
    return agg.sort_values(["architecture", "train_setting", "bucket"]).reset_index(drop=True)
