from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from xvocab_sandbox.agents.spd_agent import StepMetrics, compute_speedup
from xvocab_sandbox.config import CostModel
from xvocab_sandbox.errors import XVocabError

## REPORT COLUMNS ##
CSV_COLUMNS = ["step", "proposed", "accepted", "acc_rate", "ngram_hit", "accel_rate", "overhead", "speedup",
               "cache_size"]
# per-sample round ledger; cost is in units of one plain target step
LEDGER_COLUMNS = ["step", "rounds", "emitted", "cost"]
FLOAT_FORMAT = "%.6f"


### Utils ###
def sample_row(step: int, metrics: Sequence[StepMetrics], cost_model: CostModel, cache_size: int) -> Dict:
    """
    One row for a decoded stream sample: the CSV columns followed by the round ledger.

    metrics: the StepMetrics of every round spent on the sample
    """
    proposed = sum(m.proposed for m in metrics)
    accepted = sum(m.accepted for m in metrics)
    rates = compute_speedup(metrics, cost_model)
    return {
        "step": step,
        "proposed": proposed,
        "accepted": accepted,
        "acc_rate": accepted / proposed if proposed else 0.0,
        "ngram_hit": sum(m.ngram_hits for m in metrics) / len(metrics),
        "accel_rate": rates["acceleration_rate"],
        "overhead": rates["overhead"],
        "speedup": rates["speedup"],
        "cache_size": cache_size,
        "rounds": len(metrics),
        "emitted": sum(m.emitted for m in metrics),
        "cost": sum(m.draft_cost + m.target_cost for m in metrics) / cost_model.target_step_cost,
    }


def rows_frame(rows: Sequence[Dict]) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=CSV_COLUMNS)


def ledger_frame(rows: Sequence[Dict]) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=LEDGER_COLUMNS)


def aggregate(rows: Sequence[Dict]) -> Dict:
    """
    Aggregates recomputable from the rows alone; empty when there are no rows.

    Acceptance, acceleration, n-gram hits and speedup are pooled over every round of the run, so
    speedup is total emitted tokens over total cost rather than a mean of per-sample speedups.
    """
    if not rows:
        return {}
    missing = [k for k in LEDGER_COLUMNS if k not in rows[0]]
    if missing:
        raise XVocabError(f"rows carry no round ledger (missing {missing})")
    df = rows_frame(rows)
    ledger = ledger_frame(rows)
    proposed = int(df["proposed"].sum())
    rounds = int(ledger["rounds"].sum())
    emitted = float(ledger["emitted"].sum())
    cost = float(ledger["cost"].sum())
    return {
        "num_samples": len(df),
        "acceptance_rate": float(df["accepted"].sum()) / proposed if proposed else 0.0,
        "speedup": emitted / cost if cost else 0.0,
        "acceleration_rate": emitted / rounds if rounds else 0.0,
        "avg_ngram_hit": float((df["ngram_hit"] * ledger["rounds"]).sum()) / rounds if rounds else 0.0,
        "final_cache_size": int(df["cache_size"].iloc[-1]),
    }


def windowed_acceptance(rows: Sequence[Dict], window: int) -> List[float]:
    """Acceptance rate over a trailing window of samples, one value per row."""
    df = rows_frame(rows)
    accepted = df["accepted"].rolling(window, min_periods=1).sum()
    proposed = df["proposed"].rolling(window, min_periods=1).sum()
    return [float(a / p) if p else 0.0 for a, p in zip(accepted, proposed)]


def slice_acceptance(rows: Sequence[Dict], start: int, stop: Optional[int] = None) -> float:
    part = list(rows)[start:stop]
    proposed = sum(r["proposed"] for r in part)
    return sum(r["accepted"] for r in part) / proposed if proposed else 0.0


def switch_response(rows: Sequence[Dict], step: int, window: int, stop: Optional[int] = None) -> Dict[str, float]:
    """
    Acceptance around a switch applied before sample `step`.

    pre: acceptance over the `window` samples before the switch.
    after: acceptance over the first `window` samples after it.
    recovered: highest trailing-window acceptance once a full window of post-switch samples
    exists, up to `stop` (exclusive; defaults to the end of the run).
    """
    rows = list(rows)
    stop = len(rows) if stop is None else min(stop, len(rows))
    if not 0 < step < stop:
        raise XVocabError(f"switch step {step} has no samples on both sides")
    windows = windowed_acceptance(rows[step:stop], window)
    return {
        "pre": slice_acceptance(rows, max(0, step - window), step),
        "after": slice_acceptance(rows, step, min(step + window, stop)),
        "recovered": max(windows[window - 1:]) if len(windows) >= window else windows[-1],
    }


def mean_reports(aggregates: Sequence[Dict]) -> Dict:
    """Averages numeric aggregate fields over runs with different seeds."""
    aggregates = [a for a in aggregates if a]
    if not aggregates:
        return {}
    keys = [k for k, v in aggregates[0].items() if isinstance(v, (int, float)) and not isinstance(v, bool)]
    return {k: float(np.mean([a[k] for a in aggregates if k in a])) for k in keys}
