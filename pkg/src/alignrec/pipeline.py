"""End-to-end plumbing: dataset resolution, the training loop, and the
frozen/adapted evaluation paths used by the CLI and the experiments.

Everything here is deterministic for a fixed config and seed: one rng drives
parameter init, batch shuffling and dropout, in a fixed consumption order,
and log records contain no wall-clock values.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import adapt as adapt_mod
from . import autograd as ag
from . import evaluation, ingest, losses as L, model, optim
from .config import generator_spec


class PipelineError(RuntimeError):
    pass


def load_dataset(cfg, seed=None):
    """Materialize the dataset named by the config (file or generator)."""
    if cfg.data.path:
        ds = ingest.load_tsv(cfg.data.path)
    else:
        spec = generator_spec(cfg)
        ds = ingest.synth_shift_generate(spec, seed=cfg.seed if seed is None else seed)
    if cfg.data.min_interactions:
        ds = ingest.filter_min_interactions(ds, cfg.data.min_interactions)
    return ds


def resolve_weights(cfg, train_examples):
    """LossWeights with lam resolved ("median" -> median positive gap)."""
    lam = cfg.losses.lam
    if isinstance(lam, str):
        lam = ingest.median_positive_interval(train_examples)
    return L.LossWeights(
        mu1_train=cfg.losses.mu1_train, mu2_train=cfg.losses.mu2_train,
        mu1_test=cfg.adapt.mu1_test, mu2_test=cfg.adapt.mu2_test,
        lam=float(lam), block_size=cfg.losses.block_size,
        dilution_power=cfg.losses.dilution_power)


def build_model(cfg, vocab_size, rng):
    mc = model.ModelConfig(vocab_size=vocab_size, d=cfg.model.d, d_s=cfg.model.d_s,
                           conv_width=cfg.model.conv_width, d_ff=cfg.model.d_ff,
                           dropout=cfg.model.dropout, n_blocks=cfg.model.n_blocks,
                           detach_extension=cfg.model.detach_extension,
                           extension_history=cfg.model.extension_history,
                           dtype=cfg.precision)
    return model.ModelParams(mc, rng=rng)


def train_model(cfg, log_lines=None, progress=None):
    """Train with Adam on the combined objective, validating by NDCG@10.

    Returns (params, weights, split, history). `log_lines`, when given,
    collects deterministic JSON-serializable per-epoch records.
    """
    rng = np.random.default_rng(cfg.seed)
    ds = load_dataset(cfg)
    split = ingest.leave_one_out_split(ds)
    if not split.train:
        raise PipelineError("no training examples after splitting")
    weights = resolve_weights(cfg, split.train)

    params = build_model(cfg, ds.vocab_size, rng)
    adam = optim.Adam(params, lr=cfg.train.lr, beta1=cfg.train.beta1,
                      beta2=cfg.train.beta2, eps=cfg.train.eps)
    stopper = optim.EarlyStopper(cfg.train.patience)
    valid_batches = ingest.make_batches(split.valid, cfg.data.max_len,
                                        max(1, cfg.train.batch_size),
                                        cfg.data.pad_side)
    pdict = params.as_dict()
    best = optim.snapshot(params)
    best_ndcg = -1.0
    history = []

    order = np.arange(len(split.train))
    for epoch in range(1, cfg.train.epochs + 1):
        rng.shuffle(order)
        examples = [split.train[i] for i in order]
        batches = ingest.make_batches(examples, cfg.data.max_len,
                                      cfg.train.batch_size, cfg.data.pad_side)
        sums = np.zeros(4)
        for batch in batches:
            trace = model.forward_full(params, batch, rng=rng, training=True)
            rec = L.rec_loss(trace.logits, batch.target_item)
            tl = sl = None
            if weights.mu1_train:
                tl, _ = L.batch_time_loss(params, trace, batch, weights)
            if weights.mu2_train:
                sl, _ = L.state_alignment_loss(
                    params, trace, dilution_power=weights.dilution_power)
            total = L.total_loss(rec, tl, sl, weights, phase="train")
            if not np.isfinite(total.data):
                raise PipelineError(
                    f"non-finite training loss at epoch {epoch}: rec={float(rec.data)} "
                    f"time={tl and float(tl.data)} state={sl and float(sl.data)}")
            grads = ag.grad(total, pdict)
            adam.step(grads)
            sums += [float(total.data), float(rec.data),
                     float(tl.data) if tl is not None else 0.0,
                     float(sl.data) if sl is not None else 0.0]
        n = max(1, len(batches))
        record = {"epoch": epoch, "loss": sums[0] / n, "rec": sums[1] / n,
                  "time": sums[2] / n, "state": sums[3] / n}

        if epoch % cfg.train.eval_every == 0 or epoch == cfg.train.epochs:
            rows = adapt_mod.evaluate_frozen(params, valid_batches)
            ndcg = float(rows[:, 2].mean()) if len(rows) else 0.0
            record["valid_ndcg"] = ndcg
            if ndcg > best_ndcg:
                best_ndcg = ndcg
                best = optim.snapshot(params)
            verdict = stopper.update(ndcg)
        else:
            verdict = "continue"

        history.append(record)
        if log_lines is not None:
            log_lines.append(record)
        if progress is not None:
            progress(record)
        if verdict == "stop":
            break

    best.restore(params)
    return params, weights, split, history


def test_batches(cfg, split):
    """Batch the test split per the adaptation batching policy."""
    if cfg.adapt.batch_policy == "whole":
        bs = max(1, len(split.test))
    else:
        bs = cfg.adapt.batch_size
    return ingest.make_batches(split.test, cfg.data.max_len, bs, cfg.data.pad_side)


def evaluate_run(cfg, params, weights, split, ttt=True, k=10, k_segments=4,
                 with_baseline_delta=False):
    """Metrics + segment breakdown for the test split, frozen or adapted."""
    batches = test_batches(cfg, split)

    def frozen_fn(examples):
        ebatches = ingest.make_batches(examples, cfg.data.max_len,
                                       batches[0].size if batches else 1,
                                       cfg.data.pad_side)
        return adapt_mod.evaluate_frozen(params, ebatches, k=k)

    reports = []

    def adapted_fn(examples):
        ebatches = ingest.make_batches(examples, cfg.data.max_len,
                                       batches[0].size if batches else 1,
                                       cfg.data.pad_side)
        rows, reps = adapt_mod.evaluate_with_adaptation(
            params, ebatches, cfg.adapt, weights, k=k)
        reports.extend(reps)
        return rows

    main_fn = adapted_fn if ttt else frozen_fn
    captured = []

    def capturing_fn(examples):
        rows = main_fn(examples)
        captured.append(np.asarray(rows))
        return rows

    baseline = frozen_fn if (ttt and with_baseline_delta) else None
    report = evaluation.segment_analysis(split.test, capturing_fn,
                                         k_segments=k_segments, k=k,
                                         baseline_fn=baseline)
    per_example = captured[0] if captured else np.zeros((0, 4))
    return report, reports, per_example


# desk-scale interest-shift benchmark: staggered user windows over a global
# horizon with the cluster-regime switch at 60%, post-switch events sparse
# enough that the second regime stays under-served during training
SHIFT_EXPERIMENT_CONFIG = {
    "out_dir": "runs/shift",
    "data": {
        "generator": {"n_users": 500, "n_items": 200, "n_clusters": 8,
                      "min_events": 18, "max_events": 34, "noise_rate": 0.15,
                      "walk_persistence": 0.9, "switch_frac": 0.6,
                      "gap_mean_pre": 600.0, "gap_mean_post": 1500.0},
        "max_len": 20, "min_interactions": 0,
    },
    "model": {"d": 24, "d_s": 12, "conv_width": 4, "dropout": 0.0},
    "losses": {"mu1_train": 0.1, "mu2_train": 0.01},
    "train": {"lr": 0.01, "epochs": 10, "batch_size": 256, "eval_every": 5},
    "adapt": {"steps": 2, "lr": 0.1, "mu1_test": 0.01, "mu2_test": 0.1,
              "batch_policy": "whole"},
}


def shift_experiment(base_config, seeds, k_segments=4, progress=None):
    """Train on the synthetic shift dataset and compare frozen vs adapted
    per-segment NDCG@10, once per seed.

    Returns a dict with per-seed segment NDCG arrays (frozen and adapted)
    and their seed means.
    """
    frozen_all, adapted_all = [], []
    for seed in seeds:
        cfg = _with_seed(base_config, seed)
        params, weights, split, _ = train_model(cfg)
        rep_frozen, _, _ = evaluate_run(cfg, params, weights, split, ttt=False,
                                     k_segments=k_segments)
        rep_ttt, _, _ = evaluate_run(cfg, params, weights, split, ttt=True,
                                  k_segments=k_segments)
        fr = [s["ndcg_at_k"] for s in rep_frozen.segments]
        ad = [s["ndcg_at_k"] for s in rep_ttt.segments]
        frozen_all.append(fr)
        adapted_all.append(ad)
        if progress is not None:
            progress(seed, fr, ad)
    frozen = np.asarray(frozen_all)
    adapted = np.asarray(adapted_all)
    return {
        "seeds": list(seeds),
        "frozen": frozen,
        "adapted": adapted,
        "frozen_mean": frozen.mean(axis=0),
        "adapted_mean": adapted.mean(axis=0),
        "delta_mean": (adapted - frozen).mean(axis=0),
    }


def _with_seed(cfg, seed):
    from .config import load_config
    return load_config(cfg.to_dict(), overrides={"seed": int(seed)})


def write_json(path, payload):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        if hasattr(payload, "to_json"):
            fh.write(payload.to_json())
        else:
            fh.write(json.dumps(payload, indent=2, sort_keys=True))
        fh.write("\n")


def write_log(path, records):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
