# ==========================================
# Report tables
# ==========================================
"""Result tables as pandas DataFrames, printed as aligned text or CSV."""

import numpy as np
import pandas as pd

FLOAT_FORMAT = "{:.6f}".format


def render(df, csv=False):
    if csv:
        return df.to_csv(index=False, float_format="%.6f")
    if df.empty:
        return "(no rows)"
    return df.to_string(index=False, float_format=FLOAT_FORMAT)


def audit_table(results):
    """Per-dataset Spearman(P-hat, scratch accuracy)."""
    rows = [{"dataset": d, "spearman": np.nan if rho.degenerate else rho.value, "degenerate": rho.degenerate}
            for d, rho in results.items()]
    return pd.DataFrame(rows, columns=["dataset", "spearman", "degenerate"])


def query_table(result, trials=None):
    rows = []
    for rank, c in enumerate(result.candidates, start=1):
        rows.append({
            "rank": rank,
            "position": c.position,
            "source": c.entry.dataset_id,
            "arch": c.entry.arch.key(),
            "score": c.score,
            "estimated_perf": c.entry.estimated_perf,
        })
    df = pd.DataFrame(rows)
    if trials is not None:
        df["val_acc"] = [t.val_acc for t in trials]
    return df


def loo_table(runs):
    """Leave-one-out runs -> (per-dataset mean T1/T5/T10 table, per-run detail table)."""
    detail = pd.DataFrame(
        [{
            "seed": r.seed,
            "dataset": r.dataset,
            "T1": r.t1,
            "T5": r.t5,
            "T10": r.t10,
            "t1_source": r.t1_source,
            "fid_nearest": ",".join(r.fid_nearest),
            "source_hit": r.source_hit,
        } for r in runs],
        columns=["seed", "dataset", "T1", "T5", "T10", "t1_source", "fid_nearest", "source_hit"],
    )
    summary = detail.groupby("dataset", sort=False)[["T1", "T5", "T10"]].mean().reset_index()
    return summary, detail


def loo_summary(detail):
    return {
        "runs": int(len(detail)),
        "mean_T1": float(detail["T1"].mean()),
        "mean_T5": float(detail["T5"].mean()),
        "mean_T10": float(detail["T10"].mean()),
        "monotone": bool((detail["T1"] <= detail["T5"]).all() and (detail["T5"] <= detail["T10"]).all()),
        "source_hit_rate": float(detail["source_hit"].mean()) if len(detail) else 0.0,
    }


def convergence_table(points):
    return pd.DataFrame([{"epoch": p.epoch, "val_acc": p.val_acc, "test_acc": p.test_acc} for p in points],
                        columns=["epoch", "val_acc", "test_acc"])


def fid_table(ids, matrix):
    df = pd.DataFrame(matrix, columns=list(ids))
    df.insert(0, "dataset", list(ids))
    return df


def ablation_table(result):
    """Mean/std of retrieval accuracy per loss set, plus the sign-test rows."""
    scores = pd.DataFrame(
        [{"losses": name, "seed": seed, "retrieval_acc": acc}
         for name, values in result.scores.items() for seed, acc in enumerate(values)])
    summary = scores.groupby("losses", sort=False)["retrieval_acc"].agg(["mean", "std"]).reset_index()
    tests = pd.DataFrame(
        [{"comparison": f"{a} >= {b}", "wins": t.wins, "losses": t.losses, "p_value": t.p_value}
         for (a, b), t in result.tests.items()],
        columns=["comparison", "wins", "losses", "p_value"])
    return summary, tests
