from pathlib import Path

import pandas as pd

from ledger_manager import LedgerRow

LEDGER_COLUMNS = ["experiment", "dataset", "model", "trial", "cluster", "train_size", "test_size",
                  "correct", "total", "contribution", "wall_time"]


def ledger_records(report) -> list:
    return [
        {"experiment": report.name, "dataset": report.dataset, "model": report.model_label, **row}
        for row in report.ledger
    ]


def write_ledger_rows(path, records: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(records, columns=LEDGER_COLUMNS).to_csv(path, index=False)
    return path


def read_ledger_rows(path) -> list:
    frame = pd.read_csv(path, float_precision="round_trip", keep_default_na=False)
    records = []
    for record in frame.to_dict(orient="records"):
        row = LedgerRow(**{name: record[name] for name in LedgerRow.__dataclass_fields__})
        records.append({
            "experiment": str(record["experiment"]),
            "dataset": str(record["dataset"]),
            "model": str(record["model"]),
            **_native(row),
        })
    return records


def _native(row: LedgerRow) -> dict:
    return {
        "trial": int(row.trial),
        "cluster": int(row.cluster),
        "train_size": int(row.train_size),
        "test_size": int(row.test_size),
        "correct": int(row.correct),
        "total": int(row.total),
        "contribution": float(row.contribution),
        "wall_time": float(row.wall_time),
    }


def write_series(path, rows: list, columns: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=columns).to_csv(path, sep="\t", index=False)
    return path


def read_series(path) -> list:
    return pd.read_csv(path, sep="\t", float_precision="round_trip", keep_default_na=False).to_dict(orient="records")
