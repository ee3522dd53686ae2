"""Training and adaptation objectives.

Three losses: next-item cross-entropy, a blocked pairwise hinge aligning the
learned step sizes with observed time gaps, and a state-reconstruction loss
comparing the final scan state with its forward-then-backward estimate. The
bound evaluator gives an independent numeric ceiling for the state loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    mu1_train: float = 0.1
    mu2_train: float = 1.0
    mu1_test: float = 1e-2
    mu2_test: float = 1e-1
    lam: float = 1.0            # seconds; scale for time-gap differences
    block_size: int = 10
    dilution_power: int = 2     # exponent of the delta divisor in the state loss

    def __post_init__(self):
        if self.lam <= 0:
            raise LossError(f"lam must be positive, got {self.lam}")
        if self.block_size < 2:
            raise LossError(f"block_size must be >= 2, got {self.block_size}")
        for n in ("mu1_train", "mu2_train", "mu1_test", "mu2_test"):
            if getattr(self, n) < 0:
                raise LossError(f"{n} must be non-negative")


@dataclass
class StateAlignIntermediates:
    """Values produced on the way to the state loss, kept for the bound."""
    P: np.ndarray            # (m,) log(-1/A) / delta_next
    Q: np.ndarray            # (m, d_s) backward projection of x_n
    P_bar: float             # -1/A, exact
    Q_bar: np.ndarray        # (m, d_s) delta_next * Q
    h_next: np.ndarray       # (m, d_s, d) forward state estimate
    h_back: np.ndarray       # (m, d_s, d) reconstructed final state
    eps_n: np.ndarray        # (m, d_s) Q - B_next / A, the projection residual
    per_row: np.ndarray      # (m,) per-sequence loss values
    clamp_warnings: int      # rows where delta_next hit the division guard


def rec_loss(logits, target):
    """Mean cross-entropy of the true next item under softmax(logits)."""
    return ag.softmax_cross_entropy(logits, np.asarray(target))


def time_alignment_loss(delta_full, T, elig, lam, block_size):
    """Blocked pairwise hinge between predicted step sizes and time gaps.

    delta_full: (m, L+1) tensor, the per-position step sizes with the
    extension step in the final column. T: matching gap matrix (plain
    float array). elig: boolean matrix marking the positions that carry a
    real gap (the first valid position and padding are excluded). Within
    each row the eligible positions are chunked, in order, into consecutive
    blocks of block_size; pairs never cross blocks. The result is the sum
    of hinge terms over the total number of valid pairs; with no valid
    pairs the loss is an exact zero with no gradient.
    """
    elig = np.asarray(elig, dtype=bool)
    T = np.asarray(T, dtype=np.float64)
    m, n_cols = elig.shape
    if delta_full.data.shape != (m, n_cols) or T.shape != (m, n_cols):
        raise LossError(
            f"time_alignment_loss: shapes delta {delta_full.data.shape}, "
            f"T {T.shape}, elig {elig.shape} do not agree")

    # ordinal position of each eligible entry within its row -> block id
    ordinal = np.cumsum(elig, axis=1) - 1
    block_id = np.where(elig, ordinal // block_size, -1)

    same = (block_id[:, :, None] == block_id[:, None, :]) & (block_id[:, :, None] >= 0)
    iu = np.triu(np.ones((n_cols, n_cols), dtype=bool), k=1)
    pair_mask = same & iu
    rows, pi, pj = np.nonzero(pair_mask)
    n_pairs = rows.size
    if n_pairs == 0:
        return ag.constant(np.zeros((), dtype=delta_full.data.dtype)), 0

    flat_i = rows * n_cols + pi
    flat_j = rows * n_cols + pj
    d_i = ag.take_flat(delta_full, flat_i)
    d_j = ag.take_flat(delta_full, flat_j)
    t_diff = (T.reshape(-1)[flat_i] - T.reshape(-1)[flat_j]) / lam
    margin = ag.sub(1.0, ag.mul(ag.sub(d_i, d_j), ag.constant(
        t_diff.astype(delta_full.data.dtype))))
    loss = ag.div(ag.reduce_sum(ag.relu(margin)), float(n_pairs))
    return loss, n_pairs


def backward_projection(params, x_last, block=0):
    """Q = W2 x_n + b2 (purely linear, no activation)."""
    pre = f"block{block}."
    return ag.add(ag.matmul(x_last, params[pre + "W2"]), params[pre + "b2"])


DELTA_GUARD = 1e-8


def state_alignment_loss(params, trace, ext=None, dilution_power=2, block=None):
    """Reconstruct the final state through one forward step and one backward
    step, and penalize the Frobenius distance, diluted by delta_next**p.

    Returns (scalar loss tensor, StateAlignIntermediates). The backward
    decay is the exact value exp(delta * log(-1/A) / delta) = -1/A.
    """
    cfg = params.config
    block = cfg.n_blocks - 1 if block is None else block
    ext = trace.extension if ext is None else ext
    A = trace.A
    a_val = float(A.data)
    if a_val >= 0:
        raise LossError("state_alignment_loss: decay A must be negative")

    clamp_warnings = int(np.sum(ext.delta_next.data < DELTA_GUARD))
    delta_n = ag.clip_min(ext.delta_next, DELTA_GUARD)           # (m,)

    abar_n = ag.exp(ag.mul(delta_n, A))                          # (m,)
    bbar_n = ag.mul(ext.B_next, ag.reshape(delta_n, (-1, 1)))    # (m, d_s)
    h_next = ag.scan_step(trace.h_final, abar_n, bbar_n, ext.x_next)

    Q = backward_projection(params, trace.x_last, block=block)   # (m, d_s)
    p_bar = ag.neg(ag.div(1.0, A))                               # scalar, -1/A exactly
    q_bar = ag.mul(Q, ag.reshape(delta_n, (-1, 1)))              # (m, d_s)
    h_back = ag.add(ag.mul(ag.reshape(p_bar, (1, 1, 1)), h_next),
                    ag.outer(q_bar, trace.x_last))

    dist = ag.frobenius_norm(ag.sub(trace.h_final, h_back), axis=(1, 2))  # (m,)
    per_row = dist
    for _ in range(dilution_power):
        per_row = ag.div(per_row, delta_n)
    loss = ag.reduce_mean(per_row)

    dval = delta_n.data
    inter = StateAlignIntermediates(
        P=np.log(-1.0 / a_val) / dval,
        Q=Q.data,
        P_bar=-1.0 / a_val,
        Q_bar=q_bar.data,
        h_next=h_next.data,
        h_back=h_back.data,
        eps_n=Q.data - ext.B_next.data / a_val,
        per_row=per_row.data,
        clamp_warnings=clamp_warnings,
    )
    return loss, inter


def state_loss_bound(trace, ext, inter):
    """Per-row numeric upper bound for the state alignment loss.

    Valid for A <= -1 (the backward decay -1/A must not exceed one); the
    final coefficient is |A|^-1, the norm of the negative backward decay.

    The residual term uses eps_n = Q - A^-1 B_next. Expanding the
    reconstruction gap exactly gives
        h_n - h_back = (1 + A^-1 e^{dA}) h_n
                       - d (Q - A^-1 B_next) (x) x_n
                       + d A^-1 B_next (x) (x_n - x_next),
    so the bound is that expansion under the triangle inequality; the
    first coefficient satisfies |1 + A^-1 e^{dA}| <= 1 whenever A <= -1.
    """
    a_val = float(trace.A.data)
    if a_val > -1.0:
        raise LossError("state_loss_bound: bound precondition violated (need A <= -1)")
    d = np.maximum(ext.delta_next.data, DELTA_GUARD)
    h_norm = np.linalg.norm(trace.h_final.data.reshape(len(d), -1), axis=1)
    x_norm = np.linalg.norm(trace.x_last.data, axis=1)
    eps_norm = np.linalg.norm(inter.eps_n, axis=1)
    b_norm = np.linalg.norm(ext.B_next.data, axis=1)
    xdiff = np.linalg.norm(trace.x_last.data - ext.x_next.data, axis=1) / d
    return h_norm / d**2 + x_norm * eps_norm / d + b_norm * xdiff / abs(a_val)


def total_loss(rec, time, state, weights, phase):
    """Combine the three objectives for a phase; the test phase drops rec."""
    if phase == "train":
        out = rec
        if weights.mu1_train != 0.0 and time is not None:
            out = ag.add(out, ag.mul(time, weights.mu1_train))
        if weights.mu2_train != 0.0 and state is not None:
            out = ag.add(out, ag.mul(state, weights.mu2_train))
        return out
    if phase == "test":
        out = None
        if time is not None:
            out = ag.mul(time, weights.mu1_test)
        if state is not None:
            term = ag.mul(state, weights.mu2_test)
            out = term if out is None else ag.add(out, term)
        if out is None:
            raise LossError("total_loss: test phase needs at least one alignment loss")
        return out
    raise LossError(f"total_loss: unknown phase {phase!r}")


def batch_time_loss(params, trace, batch, weights):
    """Convenience wrapper building delta_full from a trace and batch."""
    m = batch.size
    delta_full = ag.concat(
        [trace.delta, ag.reshape(trace.extension.delta_next, (m, 1))], axis=1)
    return time_alignment_loss(delta_full, batch.T, batch.t_elig,
                               weights.lam, weights.block_size)
