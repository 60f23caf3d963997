import threading
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np


@dataclass(frozen=True)
class LedgerRow:
    """One trial x cluster contribution; AC_tj = correct / total"""

    trial: int
    cluster: int
    train_size: int
    test_size: int
    correct: int
    total: int
    contribution: float
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)


def make_row(trial: int, cluster: int, train_size: int, test_size: int, correct: int, total: int,
             wall_time: float = 0.0) -> LedgerRow:
    return LedgerRow(
        trial=int(trial),
        cluster=int(cluster),
        train_size=int(train_size),
        test_size=int(test_size),
        correct=int(correct),
        total=int(total),
        contribution=float(Fraction(int(correct), int(total))),
        wall_time=float(wall_time),
    )


class TrialLedger:
    def __init__(self, rows=None):
        self._rows = list(rows or [])
        self._lock = threading.Lock()

    @property
    def rows(self) -> list:
        with self._lock:
            return sorted(self._rows, key=lambda r: (r.trial, r.cluster))

    def add_rows(self, rows):
        with self._lock:
            self._rows.extend(rows)

    @property
    def trials(self) -> list:
        return sorted({row.trial for row in self.rows})

    def trial_rows(self, trial: int) -> list:
        return [row for row in self.rows if row.trial == trial]

    def trial_fraction(self, trial: int) -> Fraction:
        """AC_t as the exact sum of its per-cluster contributions"""
        rows = self.trial_rows(trial)
        if not rows:
            raise KeyError(f"trial {trial} has no ledger rows")
        return sum((Fraction(row.correct, row.total) for row in rows), Fraction(0))

    def trial_accuracy(self, trial: int) -> float:
        return float(self.trial_fraction(trial))

    def trial_accuracies(self) -> list:
        return [self.trial_accuracy(t) for t in self.trials]

    @property
    def average_accuracy(self) -> float:
        accuracies = self.trial_accuracies()
        if not accuracies:
            raise ValueError("ledger is empty")
        return float(np.mean(accuracies))

    @property
    def std_accuracy(self) -> float:
        accuracies = self.trial_accuracies()
        return float(np.std(accuracies)) if accuracies else 0.0

    def __len__(self) -> int:
        return len(self.rows)


class LedgerManager:
    """Ledgers of one harness run, keyed by experiment name"""

    def __init__(self):
        self.ledgers = {}
        self._lock = threading.Lock()

    def get_ledger(self, experiment_id: str) -> TrialLedger:
        with self._lock:
            if experiment_id not in self.ledgers:
                self.ledgers[experiment_id] = TrialLedger()
            return self.ledgers[experiment_id]

    def clear_ledger(self, experiment_id: str):
        with self._lock:
            if experiment_id in self.ledgers:
                del self.ledgers[experiment_id]
