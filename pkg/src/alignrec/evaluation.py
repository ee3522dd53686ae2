"""Full-catalog ranking metrics, timestamp-segment analysis and the
test-time throughput harness.

Ties in the logits are broken deterministically: the lower item index wins.
The padding index 0 never competes (its logit is treated as -inf by the
helpers that consume raw model logits).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

PAD_INDEX = 0


@dataclass
class MetricsReport:
    recall_at_k: float
    mrr_at_k: float
    ndcg_at_k: float
    n_examples: int
    k: int
    segments: list = field(default_factory=list)  # list of per-segment dicts

    def to_dict(self):
        return {
            "recall_at_k": self.recall_at_k,
            "mrr_at_k": self.mrr_at_k,
            "ndcg_at_k": self.ndcg_at_k,
            "n_examples": self.n_examples,
            "k": self.k,
            "segments": self.segments,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


@dataclass
class ThroughputReport:
    iterations_per_second: float
    batch_size: int
    adaptation_enabled: bool
    n_batches: int
    warmup: int
    reps: int
    rep_seconds: list

    def to_dict(self):
        return dict(self.__dict__)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def target_rank(logits, target):
    """1-based rank of the target item; equal logits at lower indices win."""
    z = np.asarray(logits)
    t = int(target)
    zt = z[t]
    greater = int(np.sum(z > zt))
    tied_before = int(np.sum(z[:t] == zt))
    return 1 + greater + tied_before


def rank_metrics(logits, target, k):
    """(recall, reciprocal rank, ndcg) at cutoff k for one example."""
    if k < 1:
        raise ValueError(f"rank_metrics: k must be >= 1, got {k}")
    r = target_rank(logits, target)
    if r > k:
        return 0.0, 0.0, 0.0
    return 1.0, 1.0 / r, 1.0 / np.log2(r + 1.0)


def batch_rank_metrics(logits, targets, k, mask_pad=True):
    """Vectorized per-example rows [recall, rr, ndcg, rank] for a (m, V)
    logit matrix; the padding column is excluded from the ranking."""
    z = np.array(logits, dtype=np.float64, copy=True)
    t = np.asarray(targets)
    if mask_pad:
        z[:, PAD_INDEX] = -np.inf
    m = z.shape[0]
    zt = z[np.arange(m), t]
    greater = np.sum(z > zt[:, None], axis=1)
    ties_before = np.zeros(m, dtype=np.int64)
    for i in range(m):
        ties_before[i] = np.sum(z[i, :t[i]] == zt[i])
    r = 1 + greater + ties_before
    hit = r <= k
    out = np.zeros((m, 4), dtype=np.float64)
    out[hit, 0] = 1.0
    out[hit, 1] = 1.0 / r[hit]
    out[hit, 2] = 1.0 / np.log2(r[hit] + 1.0)
    out[:, 3] = r
    return out


def ranked_items(logits, top_k=10, mask_pad=True):
    """Top item indices per row, stable under ties (lower index first)."""
    z = np.array(logits, dtype=np.float64, copy=True)
    if mask_pad:
        z[:, PAD_INDEX] = -np.inf
    order = np.argsort(-z, axis=1, kind="stable")
    return order[:, :top_k]


def aggregate(per_example, k, segments=None):
    """MetricsReport from per-example metric rows (rank column ignored)."""
    per_example = np.asarray(per_example, dtype=np.float64)
    means = per_example[:, :3].mean(axis=0) if len(per_example) else np.zeros(3)
    return MetricsReport(recall_at_k=float(means[0]), mrr_at_k=float(means[1]),
                         ndcg_at_k=float(means[2]), n_examples=len(per_example),
                         k=k, segments=segments or [])


def segment_analysis(examples, eval_fn, k_segments=4, k=10, baseline_fn=None):
    """Evaluate examples once, then break the metrics down by target-time
    segment. With a baseline_fn, each segment also reports the delta.

    eval_fn(examples) must return per-example metric rows (n, 3) in input
    order.
    """
    from .ingest import segment_indices_by_time

    rows = np.asarray(eval_fn(examples), dtype=np.float64)
    base_rows = None
    if baseline_fn is not None:
        base_rows = np.asarray(baseline_fn(examples), dtype=np.float64)
    groups = segment_indices_by_time(examples, k_segments)

    segments = []
    for gi, grp in enumerate(groups):
        sel = rows[grp]
        seg = {
            "segment": gi + 1,
            "n_examples": len(grp),
            "recall_at_k": float(sel[:, 0].mean()),
            "mrr_at_k": float(sel[:, 1].mean()),
            "ndcg_at_k": float(sel[:, 2].mean()),
        }
        if base_rows is not None:
            bsel = base_rows[grp]
            seg["baseline_ndcg_at_k"] = float(bsel[:, 2].mean())
            seg["ndcg_delta"] = seg["ndcg_at_k"] - seg["baseline_ndcg_at_k"]
        segments.append(seg)
    return aggregate(rows, k, segments=segments)


def throughput(eval_fn, batches, warmup=1, reps=3, batch_size=None,
               adaptation_enabled=False):
    """Median iterations/second over timed repetitions, after warmup passes.

    One iteration = one batch through eval_fn.
    """
    if reps < 1:
        raise ValueError(f"throughput: reps must be >= 1, got {reps}")
    for _ in range(warmup):
        for b in batches:
            eval_fn(b)
    rep_seconds = []
    for _ in range(reps):
        t0 = time.perf_counter()
        for b in batches:
            eval_fn(b)
        rep_seconds.append(time.perf_counter() - t0)
    med = float(np.median(rep_seconds))
    ips = len(batches) / med if med > 0 else float("inf")
    bs = batch_size if batch_size is not None else (
        batches[0].size if batches else 0)
    return ThroughputReport(iterations_per_second=ips, batch_size=bs,
                            adaptation_enabled=adaptation_enabled,
                            n_batches=len(batches), warmup=warmup, reps=reps,
                            rep_seconds=rep_seconds)
