"""Progress-drop detection and dataset filtering for behavior cloning.

A chunk start t is flagged when the progress sequence over its forward
window [t, t+k) contains a drop larger than the threshold. The default drop
statistic is the largest peak-to-later-trough difference inside the window,
which also catches drops that recover within the window (retries); the
plain first-minus-last variant is available as an option.

Ground-truth comparison happens at chunk granularity: a chunk start is
truly suboptimal when its window touches a labeled suboptimal step. Recall
is reported against miss windows (the failed-attempt segments the drop rule
is meant to catch); precision counts any labeled window (pauses included)
as a correct discard. Both per-class rates are kept in the report.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation
from .trajectory import LABEL_MISS, LABEL_OK, TransitionStore


def flag_suboptimal(rho: np.ndarray, k: int, delta: float,
                    statistic: str = "peak_trough") -> np.ndarray:
    """Boolean flags per step of a progress sequence (windows truncate at T)."""
    if delta <= 0:
        raise ContractViolation("delta must be positive")
    rho = np.asarray(rho, dtype=np.float64)
    T = len(rho)
    flags = np.zeros(T, dtype=bool)
    for t in range(T):
        window = rho[t:t + k]
        if len(window) < 2:
            continue
        if statistic == "peak_trough":
            drop = float(np.max(np.maximum.accumulate(window) - window))
        elif statistic == "first_last":
            drop = float(window[0] - window[-1])
        else:
            raise ContractViolation(f"unknown drop statistic {statistic!r}")
        flags[t] = drop > delta
    return flags


def drop_magnitudes(rho: np.ndarray, k: int) -> np.ndarray:
    """Peak-to-later-trough drop per forward window."""
    rho = np.asarray(rho, dtype=np.float64)
    out = np.zeros(len(rho), dtype=np.float64)
    for t in range(len(rho)):
        window = rho[t:t + k]
        if len(window) >= 2:
            out[t] = float(np.max(np.maximum.accumulate(window) - window))
    return out


def miss_onsets(labels: np.ndarray) -> np.ndarray:
    """First step of each maximal run of miss labels."""
    is_miss = np.asarray(labels) == LABEL_MISS
    prev = np.concatenate([[False], is_miss[:-1]])
    return np.flatnonzero(is_miss & ~prev)


def window_labels(labels: np.ndarray, k: int) -> tuple:
    """Chunk-start ground truth aligned with the forward-looking drop rule.

    gt_miss[t]: the window [t, t+k) contains the onset of a failed attempt,
    i.e. the chunk starting at t initiates the doomed approach. Steps inside
    the attempt's back-off tail demonstrate recovery and are not counted as
    targets for the detector. gt_any[t]: the window touches any labeled
    step (pauses included); used for precision, since discarding those is
    never wrong.
    """
    labels = np.asarray(labels)
    T = len(labels)
    onsets = miss_onsets(labels)
    miss = np.zeros(T, dtype=bool)
    for onset in onsets:
        miss[max(0, onset - k + 1):onset + 1] = True
    any_bad = np.zeros(T, dtype=bool)
    for t in range(T):
        any_bad[t] = bool((labels[t:t + k] != LABEL_OK).any())
    return miss, any_bad


@dataclass
class FilterReport:
    delta: float
    k: int
    statistic: str
    total_transitions: int = 0
    flagged_transitions: int = 0
    fraction_removed: float = 0.0
    recall_miss: float = float("nan")
    recall_any: float = float("nan")
    precision: float = float("nan")
    per_trajectory: list = field(default_factory=list)

    def to_json(self, path) -> None:
        payload = {
            "delta": self.delta, "k": self.k, "statistic": self.statistic,
            "total_transitions": self.total_transitions,
            "flagged_transitions": self.flagged_transitions,
            "fraction_removed": self.fraction_removed,
            "recall_miss": self.recall_miss, "recall_any": self.recall_any,
            "precision": self.precision,
            "per_trajectory": self.per_trajectory,
        }
        Path(path).write_text(json.dumps(payload, indent=1))


def filter_dataset(store: TransitionStore, trajs, critic, delta: float = 0.15,
                   statistic: str = "peak_trough") -> tuple:
    """Score every transition with the critic's progress, flag drops, and
    return (filtered store, report). Episodes are kept; only flagged
    chunk-start indices leave the cloning pool."""
    k = store.k
    keep = np.ones(len(store), dtype=bool)
    report = FilterReport(delta=delta, k=k, statistic=statistic,
                          total_transitions=len(store))
    tp_miss = fn_miss = tp_any = fn_any = 0
    flagged_total = 0
    false_pos = 0
    for j, traj in enumerate(trajs):
        rows = np.flatnonzero(store.traj_index == j)
        if len(rows) == 0:
            continue
        order = np.argsort(store.step_index[rows])
        rows = rows[order]
        rho = critic.progress(store.obs[rows], store.proprio[rows],
                              store.chunk[rows])
        flags = flag_suboptimal(rho, k, delta, statistic)
        keep[rows[flags]] = False
        flagged_total += int(flags.sum())
        entry = {
            "episode_id": traj.episode_id,
            "flagged_steps": np.flatnonzero(flags).tolist(),
            "max_drop": float(drop_magnitudes(rho, k).max()) if len(rho) else 0.0,
        }
        if traj.suboptimal_labels is not None:
            gt_miss, gt_any = window_labels(traj.suboptimal_labels, k)
            gt_miss = gt_miss[store.step_index[rows]]
            gt_any = gt_any[store.step_index[rows]]
            tp_miss += int((flags & gt_miss).sum())
            fn_miss += int((~flags & gt_miss).sum())
            tp_any += int((flags & gt_any).sum())
            fn_any += int((~flags & gt_any).sum())
            false_pos += int((flags & ~gt_any).sum())
            entry["gt_miss_windows"] = int(gt_miss.sum())
        report.per_trajectory.append(entry)
    report.flagged_transitions = flagged_total
    report.fraction_removed = flagged_total / max(len(store), 1)
    if tp_miss + fn_miss > 0:
        report.recall_miss = tp_miss / (tp_miss + fn_miss)
    if tp_any + fn_any > 0:
        report.recall_any = tp_any / (tp_any + fn_any)
    if flagged_total > 0:
        report.precision = (flagged_total - false_pos) / flagged_total
    return store.subset(keep), report
