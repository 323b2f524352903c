import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import pandas as pd

from langneck.errors import KnownError
from langneck.evaluation import EvalResult

REPORT_COLUMNS = ["method", "corruption", "severity", "accuracy", "cosine", "llm_nll"]


@dataclass
class EpochStats:
    epoch: int
    class_loss: float
    sim_loss: float
    llm_loss: float
    total_loss: float
    val_hard_accuracy: float


@dataclass
class MetricsReport:
    method: str
    epochs: List[EpochStats] = field(default_factory=list)
    evaluations: List[EvalResult] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def add(self, result: EvalResult, method: Optional[str] = None):
        result.method = method or result.method or self.method
        self.evaluations.append(result)

    def accuracy(self, path: str, corruption: str = "clean", severity: int = 0, method: Optional[str] = None) -> float:
        method = method or self.method
        for r in self.evaluations:
            if (r.method, r.path, r.corruption, r.severity) == (method, path, corruption, severity):
                return r.accuracy
        raise KeyError(f"No {method}/{path} result for {corruption} severity {severity}")

    def rows(self) -> List[Dict[str, Any]]:
        return [
            {
                "method": r.method,
                "corruption": r.corruption,
                "severity": r.severity,
                "accuracy": r.accuracy,
                "cosine": r.cosine,
                "llm_nll": r.llm_nll,
            }
            for r in self.evaluations
        ]


def report_to_dict(report: MetricsReport) -> Dict[str, Any]:
    return asdict(report)


def emit_report(report: MetricsReport, path) -> Tuple[Path, Path]:
    """Write `<path>.csv` (fixed column order) and `<path>.json`; both deterministic."""
    base = Path(path)
    if base.suffix in (".csv", ".json"):
        base = base.with_suffix("")
    csv_path = base.with_suffix(".csv")
    json_path = base.with_suffix(".json")
    frame = pd.DataFrame(report.rows(), columns=REPORT_COLUMNS)
    try:
        base.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", encoding="utf-8", newline="") as f:
            f.write(f"# config_hash={report.metadata.get('config_hash', '')}\n")
            frame.to_csv(f, index=False, lineterminator="\n")
        json_path.write_text(json.dumps(report_to_dict(report), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise KnownError(f"Could not write report to {base}: {e}")
    return csv_path, json_path


def read_report_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")
