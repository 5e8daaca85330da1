"""Comparison tables and figures built from stage records.

Tables are pivoted with one row per architecture and one column per
(dataset, strategy) pair; a trailing ``max`` column names the best cell of
the row, first on ties.
"""
from __future__ import annotations

import csv
import io
import logging
import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .config import ConfigError, ExperimentConfig  # noqa: E402
from .nn.models import Arch  # noqa: E402
from .orchestrator import RecordWriter, best_index, load_record, run_stage  # noqa: E402
from .training import TrainHistory  # noqa: E402

log = logging.getLogger(__name__)

ARCH_ORDER = [a.value for a in Arch]
PLACEHOLDERS = ["xcm", "tstplus"]  # listed for layout parity, never trained here
BALANCE_ORDER = ["unbalanced", "undersample", "imbalmed"]
POLICY_ORDER = ["full", "head_only"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def pivot(cells: dict, columns: list[str], flag_columns: list[str] | None = None,
          placeholders: bool = False) -> list[list[str]]:
    """Rows of a table from ``{(arch, column): value}``.

    The ``max`` column names the largest of ``flag_columns`` in each row;
    placeholder rows are empty and flagged ``skipped``.
    """
    flag_columns = columns if flag_columns is None else flag_columns
    archs = [a for a in ARCH_ORDER if any((a, c) in cells for c in columns)]
    archs += sorted({a for a, _ in cells} - set(ARCH_ORDER))
    rows = [["arch", *columns, "max"]]
    for a in archs:
        vals = [cells.get((a, c)) for c in columns]
        flagged = [(c, cells.get((a, c))) for c in flag_columns if (a, c) in cells]
        flag = ""
        if flagged:
            flag = flagged[best_index([math.nan if v is None else float(v) for _, v in flagged])][0]
        rows.append([a, *map(_fmt, vals), flag])
    if placeholders:
        for p in PLACEHOLDERS:
            rows.append([p, *[""] * len(columns), "skipped"])
    return rows


def table_csv(rows) -> bytes:
    buf = io.StringIO(newline="")
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue().encode()


def _ordered(values, order):
    return sorted(set(values), key=lambda v: (order.index(v) if v in order else len(order), v))


def _put(cells, key, value, what):
    if key in cells:
        log.warning("%s: duplicate entry for %s, keeping the later record", what, key)
    cells[key] = value


def pretrain_table(records, placeholders=False):
    cells, cols = {}, []
    recs = [r for r, _ in records if r["stage"] == "pretrain"]
    datasets = list(dict.fromkeys(r["summary"]["dataset"] for r in recs))
    for ds in datasets:
        strategies = _ordered([r["summary"]["balancing"] for r in recs if r["summary"]["dataset"] == ds],
                              BALANCE_ORDER)
        cols += [f"{ds}:{b}" for b in strategies]
    for r in recs:
        s = r["summary"]
        _put(cells, (s["arch"], f"{s['dataset']}:{s['balancing']}"), s["mean_auc"], "pretrain")
    return pivot(cells, cols, placeholders=placeholders)


def finetune_table(records, placeholders=False):
    cells, cols, flags = {}, [], []
    recs = [r for r, _ in records if r["stage"] == "finetune"]
    for ds in dict.fromkeys(r["summary"]["dataset"] for r in recs):
        pols = _ordered([p for r in recs if r["summary"]["dataset"] == ds for p in r["summary"]["policies"]],
                        POLICY_ORDER)
        for p in pols:
            cols += [f"{ds}:{p}:auc", f"{ds}:{p}:f1"]
            flags.append(f"{ds}:{p}:auc")
    for r in recs:
        s = r["summary"]
        for p, m in s["policies"].items():
            _put(cells, (s["arch"], f"{s['dataset']}:{p}:auc"), m["mean_auc"], "finetune")
            cells[(s["arch"], f"{s['dataset']}:{p}:f1")] = m["mean_f1"]
    return pivot(cells, cols, flags, placeholders)


def external_table(records, placeholders=False):
    cells, cols, flags = {}, [], []
    recs = [r for r, _ in records if r["stage"] == "external_validate"]
    for ds in dict.fromkeys(r["summary"]["dataset"] for r in recs):
        cols += [f"{ds}:auc", f"{ds}:f1", f"{ds}:best_fold"]
        flags.append(f"{ds}:auc")
    for r in recs:
        s = r["summary"]
        _put(cells, (s["arch"], f"{s['dataset']}:auc"), s["auc"], "external")
        cells[(s["arch"], f"{s['dataset']}:f1")] = s["f1"]
        cells[(s["arch"], f"{s['dataset']}:best_fold")] = s["best_fold"]
    return pivot(cells, cols, flags, placeholders)


def hyperparameter_table(records):
    rows = [["arch", "dataset", "stage", "balancing", "WS", "ST", "LR", "BS"]]
    for r, _ in records:
        if "hyperparameters" not in r:
            continue
        s, h = r["summary"], r["hyperparameters"]
        rows.append([s["arch"], s["dataset"], r["stage"], s["balancing"], h["WS"], h["ST"], h["LR"], h["BS"]])
    return rows


def _png(fig) -> bytes:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    return buf.getvalue()


def bar_figure(rows, title: str) -> bytes:
    """Grouped bars of the numeric cells of a pivot table."""
    header, body = rows[0], [r for r in rows[1:] if r[-1] != "skipped"]
    cols = [i for i, c in enumerate(header[1:-1], 1) if not c.endswith((":f1", ":best_fold"))]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(body) * max(1, len(cols))), 3.5))
    width = 0.8 / max(1, len(cols))
    for j, ci in enumerate(cols):
        ys = [float(r[ci]) if r[ci] not in ("", "nan") else 0.0 for r in body]
        ax.bar([i + j * width for i in range(len(body))], ys, width, label=header[ci])
    ax.set_xticks([i + width * (len(cols) - 1) / 2 for i in range(len(body))])
    ax.set_xticklabels([r[0] for r in body])
    ax.set_ylim(0, 1)
    ax.set_ylabel("AUC-ROC")
    ax.set_title(title)
    if cols:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return _png(fig)


def curves_figure(record: dict, root) -> bytes:
    """Validation AUC per epoch for every (fold, member) run of a record."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for run in record.get("runs", []):
        h = TrainHistory.from_csv((root / run["history"]).read_bytes())
        ax.plot([e.epoch for e in h.epochs], h.val_aucs, lw=0.8, alpha=0.6)
    s = record["summary"]
    ax.set_title(f"{record['stage']} {s['arch']} {s['dataset']} {s['balancing']}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation AUC-ROC")
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    return _png(fig)


def stage_report(cfg: ExperimentConfig, writer: RecordWriter):
    if not cfg.records:
        raise ConfigError("report needs at least one record")
    records = [load_record(p) for p in cfg.records]
    for r, root in records:
        if "summary" not in r:
            raise ConfigError(f"record under {root} has no summary (stage {r.get('stage')})")
    tables = {
        "pretrain": pretrain_table(records, cfg.placeholders),
        "finetune": finetune_table(records, cfg.placeholders),
        "external": external_table(records, cfg.placeholders),
    }
    written = []
    for name, rows in tables.items():
        if len(rows) == 1 or (len(rows) == 1 + len(PLACEHOLDERS) * cfg.placeholders
                              and all(r[-1] == "skipped" for r in rows[1:])):
            continue
        written.append(writer.write(f"tables/{name}.csv", table_csv(rows)))
        if cfg.figures:
            writer.write(f"figures/{name}_auc.png", bar_figure(rows, f"{name} AUC-ROC"))
    hp = hyperparameter_table(records)
    if len(hp) > 1:
        written.append(writer.write("tables/hyperparameters.csv", table_csv(hp)))
    if cfg.figures:
        for i, (r, root) in enumerate(records):
            if r.get("runs"):
                writer.write(f"figures/curves_{i}_{r['stage']}.png", curves_figure(r, root))
    return {"tables": written, "inputs": [str(p) for p in cfg.records]}


def run_report(cfg: ExperimentConfig) -> dict:
    return run_stage(stage_report, cfg)
