"""Report emission: delimited outputs plus rendered figures.

Every analysis surface writes a CSV (or key-value text) that downstream
code can parse back, and a PNG rendering of the same content next to it.
Floats are serialized with repr() so identical runs produce bitwise
identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .analysis import ClassificationReport, ContributionProfile, GroupStats
from .train import ReconReport, TrainHistory

_LABEL_COLORS = {"CN": "tab:green", "MCI": "tab:orange", "AD": "tab:red",
                 "UNLABELED": "tab:gray"}


def _fmt(x) -> str:
    return repr(float(x))


# -- delimited writers / readers ------------------------------------------


def write_history_csv(history: TrainHistory, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("step,loss,lr\n")
        for step, loss, lr in history.steps:
            fh.write(f"{step},{_fmt(loss)},{_fmt(lr)}\n")


def read_history_csv(path) -> list[tuple[int, float, float]]:
    rows = []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        s, l, r = line.split(",")
        rows.append((int(s), float(l), float(r)))
    return rows


def write_contributions_csv(matrix: np.ndarray, path,
                            by_magnitude: bool = False) -> None:
    """Rows `target_network,source_network,weight`; delta files are
    ordered by descending cell magnitude."""
    n = matrix.shape[0]
    cells = [(t, s) for t in range(n) for s in range(n)]
    if by_magnitude:
        cells.sort(key=lambda ts: (-abs(matrix[ts[1], ts[0]]), ts))
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("target_network,source_network,weight\n")
        for t, s in cells:
            fh.write(f"{t},{s},{_fmt(matrix[s, t])}\n")


def read_contributions_csv(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        t, s, w = line.split(",")
        rows.append((int(t), int(s), float(w)))
    n = max(max(t, s) for t, s, _ in rows) + 1
    matrix = np.zeros((n, n))
    for t, s, w in rows:
        matrix[s, t] = w
    return matrix


def write_predictability_csv(report: ReconReport, names: dict[int, str], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("network,name,pearson_r,token_count\n")
        for i, r in enumerate(report.per_network_r):
            fh.write(f"{i},{names.get(i, f'net{i}')},{_fmt(r)},"
                     f"{report.token_counts[i]}\n")


def read_predictability_csv(path) -> np.ndarray:
    vals = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        parts = line.split(",")
        vals.append(float(parts[2]))
    return np.asarray(vals)


def write_norms_csv(rows: list[tuple], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("subject,session,age,label,embedding_norm\n")
        for subject, session, age, label, norm in rows:
            age_s = "NA" if age is None else _fmt(age)
            fh.write(f"{subject},{session},{age_s},{label},{_fmt(norm)}\n")


def read_norms_csv(path) -> list[tuple]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        subject, session, age, label, norm = line.split(",")
        rows.append((subject, int(session), None if age == "NA" else float(age),
                     label, float(norm)))
    return rows


def write_group_stats(stats: GroupStats, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for label, (mean, sd, n) in stats.groups.items():
            fh.write(f"group.{label}.mean = {_fmt(mean)}\n")
            fh.write(f"group.{label}.sd = {_fmt(sd)}\n")
            fh.write(f"group.{label}.n = {n}\n")
        for (la, lb), (t, p, dof) in stats.pairwise.items():
            fh.write(f"pair.{la}.{lb}.t = {_fmt(t)}\n")
            fh.write(f"pair.{la}.{lb}.dof = {_fmt(dof)}\n")
            fh.write(f"pair.{la}.{lb}.p = {_fmt(p)}\n")


def write_classification(report: ClassificationReport, path) -> None:
    names = ("CN", "MCI", "AD")
    with Path(path).open("w", encoding="utf-8") as fh:
        for i, name in enumerate(names):
            row = ",".join(str(int(v)) for v in report.confusion[i])
            fh.write(f"confusion.{name} = {row}\n")
        fh.write(f"balanced_accuracy = {_fmt(report.balanced_accuracy)}\n")
        fh.write(f"macro_f1 = {_fmt(report.macro_f1)}\n")
        fh.write(f"macro_auc = {_fmt(report.macro_auc)}\n")
        for flag in report.flags:
            fh.write(f"flag = {flag}\n")


def read_key_values(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


# -- figures -----------------------------------------------------------------


def save_loss_curve(history: TrainHistory, path) -> None:
    steps = [s for s, _, _ in history.steps]
    losses = [l for _, l, _ in history.steps]
    lrs = [r for _, _, r in history.steps]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(steps, losses, lw=0.8, color="tab:blue", label="train loss")
    if history.val:
        per_epoch = len(steps) // max(len(history.val), 1)
        ax.plot([(e + 1) * per_epoch - 1 for e, _ in history.val],
                [v for _, v in history.val], "o-", ms=3,
                color="tab:red", label="val loss")
    ax.set_xlabel("step")
    ax.set_ylabel("masked-reconstruction MSE")
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, lw=0.8, color="tab:gray", alpha=0.6)
    ax2.set_ylabel("learning rate", color="tab:gray")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_predictability_bars(report: ReconReport, names: dict[int, str], path) -> None:
    n = report.per_network_r.size
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(n), report.per_network_r, color="tab:blue")
    ax.set_xticks(range(n))
    ax.set_xticklabels([names.get(i, str(i)) for i in range(n)],
                       rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("masked-network Pearson r")
    ax.axhline(0.0, color="k", lw=0.5)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_contribution_heatmap(matrix: np.ndarray, names: dict[int, str], path,
                              title: str = "", diverging: bool = False) -> None:
    n = matrix.shape[0]
    fig, ax = plt.subplots(figsize=(5, 4.2))
    if diverging:
        vmax = max(float(np.abs(matrix).max()), 1e-12)
        im = ax.imshow(matrix, cmap="RdBu_r", vmin=-vmax, vmax=vmax)
    else:
        im = ax.imshow(matrix, cmap="viridis", vmin=0.0)
    ax.set_xlabel("target network")
    ax.set_ylabel("source network")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xticklabels([names.get(i, str(i)) for i in range(n)],
                       rotation=45, ha="right", fontsize=7)
    ax.set_yticklabels([names.get(i, str(i)) for i in range(n)], fontsize=7)
    if title:
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_norms_plot(rows: list[tuple], path) -> None:
    """Subject trajectories over sessions (left) and group means (right)."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.8))
    by_subject: dict[str, list[tuple]] = {}
    for subject, session, age, label, norm in rows:
        by_subject.setdefault(subject, []).append((session, label, norm))
    for subject, pts in by_subject.items():
        pts.sort()
        color = _LABEL_COLORS.get(pts[0][1], "tab:gray")
        ax1.plot([p[0] for p in pts], [p[2] for p in pts], "o-", ms=3,
                 lw=0.8, color=color, alpha=0.6)
    ax1.set_xlabel("session")
    ax1.set_ylabel("embedding norm (l2)")
    by_label: dict[str, list[float]] = {}
    for _, _, _, label, norm in rows:
        by_label.setdefault(label, []).append(norm)
    labels = sorted(by_label)
    means = [np.mean(by_label[l]) for l in labels]
    sems = [np.std(by_label[l], ddof=1) / np.sqrt(len(by_label[l]))
            if len(by_label[l]) > 1 else 0.0 for l in labels]
    ax2.bar(range(len(labels)), means, yerr=sems, capsize=4,
            color=[_LABEL_COLORS.get(l, "tab:gray") for l in labels])
    ax2.set_xticks(range(len(labels)))
    ax2.set_xticklabels(labels)
    ax2.set_ylabel("embedding norm (l2), mean +- sem")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_confusion_heatmap(report: ClassificationReport, path) -> None:
    names = ("CN", "MCI", "AD")
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(report.confusion, cmap="Blues")
    for i in range(3):
        for j in range(3):
            ax.text(j, i, str(int(report.confusion[i, j])), ha="center",
                    va="center", fontsize=10)
    ax.set_xticks(range(3))
    ax.set_yticks(range(3))
    ax.set_xticklabels(names)
    ax.set_yticklabels(names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    ax.set_title(f"BAcc {report.balanced_accuracy:.3f}", fontsize=9)
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
