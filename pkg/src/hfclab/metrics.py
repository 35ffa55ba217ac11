"""
Detection metrics and report tables.

CSV schema for score reports (``write_reports_csv``), one row per
detector x attack:

    config_hash, detector, attack, hfc, epsilon, auc, tpr_at_90, n_clean, n_adv, adv_acc
"""
import csv
import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, MissingPairError

REPORT_FIELDS = ["config_hash", "detector", "attack", "hfc", "epsilon", "auc", "tpr_at_90", "n_clean", "n_adv", "adv_acc"]


def _scores(v, name):
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ConfigError(f"{name} scores are empty")
    return v


def auc(neg, pos):
    """Mann-Whitney AUC: P(pos > neg) + 0.5 * P(pos == neg)."""
    neg, pos = _scores(neg, "negative"), _scores(pos, "positive")
    ranks = rankdata(np.concatenate([neg, pos]))
    n0, n1 = len(neg), len(pos)
    u = ranks[n0:].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n0 * n1))


def tpr_at_tnr(neg, pos, tnr=0.9):
    """Fraction of positives at or above the ``tnr`` quantile of negatives ("higher" rule)."""
    neg, pos = _scores(neg, "negative"), _scores(pos, "positive")
    thr = np.quantile(neg, tnr, method="higher")
    return float(np.mean(pos >= thr))


def adv_acc(results, target=None):
    """Fraction of attacked rows whose prediction equals the target."""
    if hasattr(results, "success") and target is None:
        s = np.asarray(results.success)
    else:
        pred = np.asarray(results.predictions if hasattr(results, "predictions") else results)
        s = pred == np.asarray(target)
    if s.size == 0:
        raise ConfigError("no attack results")
    return float(np.mean(s))


@dataclass
class ScoreReport:
    detector: str
    attack: str
    hfc: bool
    auc: float
    tpr_at_90: float
    n_clean: int
    n_adv: int
    epsilon: float = float("nan")
    adv_acc: float = float("nan")

    @classmethod
    def from_scores(cls, detector, attack, hfc, clean, adv, epsilon=float("nan"), adv_acc=float("nan")):
        return cls(detector, attack, bool(hfc), auc(clean, adv), tpr_at_tnr(clean, adv), len(clean), len(adv), epsilon, adv_acc)


def assemble_table(reports):
    """Rows = detectors, columns = attacks; each cell holds {"plain": (auc, tpr), "hfc": (auc, tpr)}.

    When any report carries HFC, every cell must hold both halves.
    """
    if not reports:
        raise ConfigError("no reports to tabulate")
    detectors = list(dict.fromkeys(r.detector for r in reports))
    attacks = list(dict.fromkeys(r.attack for r in reports))
    cells = {}
    for r in reports:
        cells.setdefault((r.detector, r.attack), {})["hfc" if r.hfc else "plain"] = (r.auc, r.tpr_at_90)
    paired = any(r.hfc for r in reports)
    table = {}
    for d in detectors:
        row = {}
        for a in attacks:
            cell = cells.get((d, a))
            if cell is None:
                continue
            if paired and len(cell) != 2:
                raise MissingPairError(f"{d}/{a} lacks its {'hfc' if 'plain' in cell else 'plain'} counterpart")
            row[a] = {"plain": cell.get("plain"), "hfc": cell.get("hfc")}
        table[d] = row
    return {"detectors": detectors, "attacks": attacks, "cells": table}


def format_table(table, pct=True):
    """Plain-text rendering in the 'without / with' cell layout."""
    f = (lambda v: f"{100 * v:5.1f}") if pct else (lambda v: f"{v:.3f}")
    head = ["detector"] + [f"{a} AUC" for a in table["attacks"]] + [f"{a} TPR@90" for a in table["attacks"]]
    lines = [" | ".join(head)]
    for d in table["detectors"]:
        row = table["cells"][d]
        cols = [d]
        for k in (0, 1):
            for a in table["attacks"]:
                cell = row.get(a)
                if cell is None:
                    cols.append("-")
                    continue
                parts = [f(cell[h][k]) for h in ("plain", "hfc") if cell[h] is not None]
                cols.append(" / ".join(parts))
        lines.append(" | ".join(cols))
    return "\n".join(lines)


def write_reports_csv(path, reports, config_hash):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        for r in reports:
            row = asdict(r)
            row["config_hash"] = config_hash
            row["hfc"] = int(r.hfc)
            w.writerow({k: row[k] for k in REPORT_FIELDS})


def read_reports_csv(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                (
                    row["config_hash"],
                    ScoreReport(
                        row["detector"],
                        row["attack"],
                        bool(int(row["hfc"])),
                        float(row["auc"]),
                        float(row["tpr_at_90"]),
                        int(row["n_clean"]),
                        int(row["n_adv"]),
                        float(row["epsilon"]),
                        float(row["adv_acc"]),
                    ),
                )
            )
    return out


def write_reports_json(path, reports, config_hash):
    with open(path, "w") as fh:
        json.dump({"config_hash": config_hash, "reports": [asdict(r) for r in reports]}, fh, indent=1)
