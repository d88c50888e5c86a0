"""Analysis outputs (tables, LMM fit, contrasts) and the figure/table report bundle."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from . import __version__
from .analysis.accuracy import aggregate_accuracy, duration_by_train, show_layout
from .analysis.lmm import MixedModelFit, fit_lmm
from .analysis.posthoc import all_posthoc
from .corpus import BUCKETS
from .errors import MissingAnalysis
from .experiment import read_records

ANALYSIS_FILES = ("accuracy_show.csv", "accuracy_duration.csv", "accuracy_overall.csv", "fit.json",
                  "posthoc.csv", "effects.csv", "duration.csv")
EFFECTS_COLUMNS = ["architecture", "train", "test", "mean", "ci_low", "ci_high"]


def _header(stamp) -> str:
    return f"# turnterm {stamp.get('version', __version__)} config={stamp.get('config_hash', 'none')}\n"


def write_frame(df: pd.DataFrame, path, stamp: dict, index: bool = False, float_format: Optional[str] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(_header(stamp))
        df.to_csv(fh, index=index, float_format=float_format)
    return path


def read_frame(path, **kw) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", **kw)


def read_stamp(path) -> dict:
    """Recover the stamp embedded in an artifact (CSV/text header line, JSON or
    checkpoint ``_meta``, npz ``_meta`` entry, PNG text chunks)."""
    path = Path(path)
    if path.suffix == ".json":
        with open(path, encoding="utf-8") as fh:
            return json.load(fh).get("_meta", {})
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as z:
            return json.loads(str(z["_meta"])) if "_meta" in z.files else {}
    if path.suffix == ".safetensors":
        from .heads import read_checkpoint_meta

        return read_checkpoint_meta(path).get("extra", {}).get("_meta", {})
    if path.suffix == ".png":
        from PIL import Image

        text = Image.open(path).text
        if not text.get("Software", "").startswith("turnterm "):
            return {}
        return {"toolkit": "turnterm", "version": text["Software"].split()[1],
                "config_hash": text.get("Description", "config=none").split("=", 1)[1]}
    first = path.open(encoding="utf-8").readline()
    if not first.startswith("# turnterm"):
        return {}
    _, _, version, cfg = first.split()
    return {"toolkit": "turnterm", "version": version, "config_hash": cfg.split("=", 1)[1]}


def effects_frame(fit: MixedModelFit) -> pd.DataFrame:
    rows = [{k: c[k] for k in ("architecture", "train", "test", "mean", "ci_low", "ci_high")} for c in fit.cells]
    return pd.DataFrame(rows, columns=EFFECTS_COLUMNS)


def write_analysis(records_dir, out_dir, stamp: Optional[dict] = None, fit_spec=None) -> dict:
    """Accuracy tables, the mixed-model fit and all post-hoc contrasts."""
    stamp = stamp or {"toolkit": "turnterm", "version": __version__, "config_hash": "none"}
    out = Path(out_dir)
    records = read_records(records_dir)
    frame = pd.DataFrame([r.to_dict() for r in records])
    for group, name in (("show", "accuracy_show.csv"), ("duration_bucket", "accuracy_duration.csv"),
                        ("overall", "accuracy_overall.csv")):
        write_frame(aggregate_accuracy(frame, group).frame, out / name, stamp, float_format="%.4f")
    write_frame(duration_by_train(frame), out / "duration.csv", stamp, float_format="%.4f")

    fit = fit_lmm(frame) if fit_spec is None else fit_lmm(frame, fit_spec)
    with open(out / "fit.json", "w", encoding="utf-8") as fh:
        json.dump({**json.loads(fit.to_json()), "_meta": stamp}, fh, indent=2, sort_keys=True)
    write_frame(effects_frame(fit), out / "effects.csv", stamp)
    contrasts = all_posthoc(fit) if fit.converged and len(fit.levels["model"]) > 1 else []
    cols = ["arch_i", "arch_j", "test", "train", "estimate", "se", "z", "p_raw", "p_adjusted", "m"]
    write_frame(pd.DataFrame([c.to_dict() for c in contrasts], columns=cols), out / "posthoc.csv", stamp)
    return {"records": len(records), "converged": fit.converged, "variances": fit.variances,
            "contrasts": len(contrasts)}


def _analysis_dir(results_dir) -> Path:
    d = Path(results_dir)
    if (d / "analyze").is_dir():
        d = d / "analyze"
    missing = [f for f in ANALYSIS_FILES if not (d / f).exists()]
    if missing:
        raise MissingAnalysis(f"{d}: missing analysis outputs {missing}; run `analyze` first")
    return d


def _save_png(fig, path, stamp):
    meta = {"Software": f"turnterm {stamp.get('version', __version__)}",
            "Description": f"config={stamp.get('config_hash', 'none')}"}
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=meta)


def plot_effects(effects: pd.DataFrame, path, stamp):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    trains = sorted(effects["train"].unique())
    archs = sorted(effects["architecture"].unique())
    fig, axes = plt.subplots(1, len(trains), figsize=(4 * len(trains), 3.5), sharey=True, squeeze=False)
    for ax, train in zip(axes[0], trains):
        sub = effects[effects["train"] == train]
        for k, (test, g) in enumerate(sorted(sub.groupby("test"), key=lambda kv: kv[0])):
            g = g.set_index("architecture").reindex(archs)
            x = [i + (k - 1) * 0.12 for i in range(len(archs))]
            ax.errorbar(x, g["mean"], yerr=[g["mean"] - g["ci_low"], g["ci_high"] - g["mean"]],
                        marker="o", capsize=3, label=f"test={test}")
        ax.set_xticks(range(len(archs)), archs)
        ax.set_title(f"train={train}")
        ax.set_xlabel("architecture")
        ax.ticklabel_format(axis="y", useOffset=False)
    axes[0][0].set_ylabel("fitted accuracy")
    axes[0][-1].legend(fontsize=8)
    _save_png(fig, path, stamp)
    plt.close(fig)


def plot_duration(duration: pd.DataFrame, path, stamp):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    trains = sorted(duration["train_setting"].unique())
    fig, axes = plt.subplots(1, len(trains), figsize=(4 * len(trains), 3.5), sharey=True, squeeze=False)
    for ax, train in zip(axes[0], trains):
        sub = duration[duration["train_setting"] == train]
        for arch, g in sub.groupby("architecture"):
            g = g.set_index("bucket").reindex(list(BUCKETS))
            ax.plot(range(len(BUCKETS)), g["accuracy"], marker="o", label=arch)
        ax.set_xticks(range(len(BUCKETS)), list(BUCKETS))
        ax.set_title(f"train={train}")
        ax.set_xlabel("duration (s)")
    axes[0][0].set_ylabel("accuracy (%)")
    axes[0][-1].legend(fontsize=8)
    _save_png(fig, path, stamp)
    plt.close(fig)


def emit_report(results_dir, out_dir=None, stamp: Optional[dict] = None) -> list[Path]:
    """Per-show tables, the effects plot and the duration plot, each with its CSV.

    ``results_dir`` is either a run directory holding ``analyze/`` or the
    analysis directory itself. Returns the paths written.
    """
    src = _analysis_dir(results_dir)
    out = Path(out_dir) if out_dir is not None else src.parent / "report"
    out.mkdir(parents=True, exist_ok=True)
    stamp = stamp or read_stamp(src / "fit.json")
    written = []

    by_show = read_frame(src / "accuracy_show.csv", dtype={"group": str})
    for train in sorted(by_show["train_setting"].unique()):
        table = show_layout(by_show, train)
        table.columns = [f"{a} {t}" for a, t in table.columns]
        written.append(write_frame(table, out / f"per_show_{train}.csv", stamp, index=True, float_format="%.2f"))

    effects = read_frame(src / "effects.csv")
    written.append(write_frame(effects, out / "effects.csv", stamp))
    plot_effects(effects, out / "effects.png", stamp)
    written.append(out / "effects.png")

    duration = read_frame(src / "duration.csv")
    written.append(write_frame(duration, out / "duration.csv", stamp, float_format="%.2f"))
    plot_duration(duration, out / "duration.png", stamp)
    written.append(out / "duration.png")
    return written
