"""Neural building blocks: embedding lookup, BiLSTM encoder, per-task
attention head, dense layers, and inverted dropout.

All forward functions accept either a single example (2-D activations,
1-D mask) or a batch (3-D activations, 2-D mask) and run on whatever
Tape is active; with no tape they are plain evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DimensionError, ParameterError

RECURRENT_INIT_SCALE = 0.08


def uniform_init(rng, shape, scale=RECURRENT_INIT_SCALE):
    return rng.uniform(-scale, scale, size=shape)


def glorot_init(rng, n_out, n_in):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in))


# ---------------------------------------------------------------------------
# embedding


@dataclass
class EmbeddingMatrix:
    """Token-vector table with per-row lock flags.

    Row 0 is the reserved all-zeros padding row and is always locked;
    locked rows receive no gradient and no optimizer update.
    """

    table: ad.Var
    locked: np.ndarray
    coverage: float | None = None

    def __post_init__(self):
        self.locked = np.asarray(self.locked, dtype=bool)
        if self.locked.shape != (self.table.value.shape[0],):
            raise DimensionError(
                f"locked flags {self.locked.shape} do not match table rows "
                f"{self.table.value.shape[0]}"
            )
        self._unlocked_f = (~self.locked).astype(np.float64)

    @property
    def vocab_size(self):
        return self.table.value.shape[0]

    @property
    def dim(self):
        return self.table.value.shape[1]

    def unlocked_mask(self):
        return self._unlocked_f


def random_embedding(vocab_size, dim, rng, scale=0.25):
    """Fresh tunable embedding table; pad row 0 is zero and locked, and the
    reserved unknown-token row 1 starts at zero (tunable) so out-of-vocabulary
    tokens are neutral rather than a random direction."""
    table = rng.uniform(-scale, scale, size=(vocab_size, dim))
    table[0] = 0.0
    if vocab_size > 1:
        table[1] = 0.0
    locked = np.zeros(vocab_size, dtype=bool)
    locked[0] = True
    return EmbeddingMatrix(table=ad.Var(table), locked=locked)


def embed(matrix, ids):
    """Gather rows for `ids` ([T] or [N x T]); gradients scatter only into
    unlocked rows."""
    return ad.gather_rows(matrix.table, np.asarray(ids), row_grad_mask=matrix.unlocked_mask())


# ---------------------------------------------------------------------------
# BiLSTM encoder


@dataclass
class LstmCellParams:
    """One direction's gate weights; each W is [h x (d+h)], each b is [h]."""

    w_i: ad.Var
    w_f: ad.Var
    w_o: ad.Var
    w_c: ad.Var
    b_i: ad.Var
    b_f: ad.Var
    b_o: ad.Var
    b_c: ad.Var

    @property
    def hidden(self):
        return self.w_i.value.shape[0]

    def variables(self, prefix):
        return [
            (f"{prefix}.{name}", getattr(self, name))
            for name in ("w_i", "w_f", "w_o", "w_c", "b_i", "b_f", "b_o", "b_c")
        ]


@dataclass
class BiLstmParams:
    fwd: LstmCellParams
    bwd: LstmCellParams

    @property
    def hidden(self):
        return self.fwd.hidden

    def variables(self, prefix="bilstm"):
        return self.fwd.variables(f"{prefix}.fwd") + self.bwd.variables(f"{prefix}.bwd")


def init_lstm_cell(rng, input_dim, hidden):
    def w():
        return ad.Var(uniform_init(rng, (hidden, input_dim + hidden)))

    def b():
        return ad.Var(np.zeros(hidden))

    return LstmCellParams(w_i=w(), w_f=w(), w_o=w(), w_c=w(), b_i=b(), b_f=b(), b_o=b(), b_c=b())


def init_bilstm(rng, input_dim, hidden):
    return BiLstmParams(
        fwd=init_lstm_cell(rng, input_dim, hidden),
        bwd=init_lstm_cell(rng, input_dim, hidden),
    )


def _check_prefix_mask(mask2):
    if np.any(np.diff(mask2, axis=1) > 0):
        raise ContractError("mask must be a prefix of ones followed by zeros")


def _run_direction(cell, x3, mask2, reverse):
    n, t_x, _ = x3.value.shape
    h = cell.hidden
    w_all_t = ad.transpose(ad.concat([cell.w_i, cell.w_f, cell.w_o, cell.w_c], axis=0))
    b_all = ad.concat([cell.b_i, cell.b_f, cell.b_o, cell.b_c], axis=0)

    h_prev = np.zeros((n, h))
    c_prev = np.zeros((n, h))
    acts = [None] * t_x
    order = range(t_x - 1, -1, -1) if reverse else range(t_x)
    for t in order:
        x_t = ad.slice_time(x3, t)
        inp = ad.concat([x_t, h_prev], axis=1)
        pre = ad.add(ad.matmul(inp, w_all_t), b_all)
        gi = ad.sigmoid(ad.slice_cols(pre, 0, h))
        gf = ad.sigmoid(ad.slice_cols(pre, h, 2 * h))
        go = ad.sigmoid(ad.slice_cols(pre, 2 * h, 3 * h))
        gc = ad.tanh(ad.slice_cols(pre, 3 * h, 4 * h))
        c_new = ad.add(ad.mul(gf, c_prev), ad.mul(gi, gc))
        h_new = ad.mul(go, ad.tanh(c_new))

        m = mask2[:, t : t + 1]
        if m.all():
            acts[t] = h_new
            h_prev, c_prev = h_new, c_new
        else:
            # padded rows carry state through unchanged and emit zeros
            act = ad.mul(h_new, m)
            acts[t] = act
            inv = 1.0 - m
            h_prev = ad.add(act, ad.mul(h_prev, inv))
            c_prev = ad.add(ad.mul(c_new, m), ad.mul(c_prev, inv))
    return acts


def bilstm(params, x, mask):
    """Run both directions over [T x d] or [N x T x d] inputs and return
    per-position concatenated states [.. x T x 2h].

    The mask must be right-padding (a prefix of ones); padded positions
    emit zero activations and do not advance the recurrent state.
    """
    single = x.value.ndim == 2
    x3 = ad.reshape(x, (1,) + x.value.shape) if single else x
    mask2 = np.asarray(mask, dtype=np.float64)
    if single:
        mask2 = mask2.reshape(1, -1)
    if mask2.shape != x3.value.shape[:2]:
        raise DimensionError(f"mask shape {mask2.shape} does not match input {x3.value.shape}")
    _check_prefix_mask(mask2)

    fwd_acts = _run_direction(params.fwd, x3, mask2, reverse=False)
    bwd_acts = _run_direction(params.bwd, x3, mask2, reverse=True)
    acts = ad.concat([ad.stack_time(fwd_acts), ad.stack_time(bwd_acts)], axis=2)
    if single:
        return ad.reshape(acts, acts.value.shape[1:])
    return acts


# ---------------------------------------------------------------------------
# attention head


@dataclass
class AttentionHeadParams:
    """Scorer: score_k = v . tanh(W a_k + b), reduced to one scalar per position."""

    w: ad.Var  # [s x 2h]
    b: ad.Var  # [s]
    v: ad.Var  # [s]

    def variables(self, prefix="attn"):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b), (f"{prefix}.v", self.v)]


def init_attention(rng, act_dim, score_dim):
    return AttentionHeadParams(
        w=ad.Var(glorot_init(rng, score_dim, act_dim)),
        b=ad.Var(np.zeros(score_dim)),
        v=ad.Var(glorot_init(rng, 1, score_dim)[0]),
    )


def attention_head(params, acts, mask):
    """Score positions, normalize with the padding mask, and reduce.

    Returns (context, alpha): the attention-weighted sum of activations
    and the per-position weights used to build it.
    """
    single = acts.value.ndim == 2
    a3 = ad.reshape(acts, (1,) + acts.value.shape) if single else acts
    mask2 = np.asarray(mask, dtype=np.float64)
    if single:
        mask2 = mask2.reshape(1, -1)
    n, t_x, act_dim = a3.value.shape

    flat = ad.reshape(a3, (n * t_x, act_dim))
    hidden = ad.tanh(ad.add(ad.matmul(flat, ad.transpose(params.w)), params.b))
    scores = ad.reshape(ad.matmul(hidden, params.v), (n, t_x))
    alpha = ad.masked_softmax(scores, mask2)
    context = ad.attend(alpha, a3)
    if single:
        return ad.reshape(context, (act_dim,)), ad.reshape(alpha, (t_x,))
    return context, alpha


# ---------------------------------------------------------------------------
# dense and dropout


@dataclass
class DenseParams:
    w: ad.Var  # [out x in]
    b: ad.Var  # [out]

    def variables(self, prefix="dense"):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


def init_dense(rng, n_in, n_out):
    return DenseParams(w=ad.Var(glorot_init(rng, n_out, n_in)), b=ad.Var(np.zeros(n_out)))


def dense(params, x, activation=None):
    """Affine map plus optional activation ('softmax' for output heads)."""
    single = x.value.ndim == 1
    x2 = ad.reshape(x, (1,) + x.value.shape) if single else x
    out = ad.add(ad.matmul(x2, ad.transpose(params.w)), params.b)
    if activation == "softmax":
        out = ad.softmax(out)
    elif activation is not None:
        out = ad.activation(out, activation)
    if single:
        return ad.reshape(out, (out.value.shape[1],))
    return out


def dropout(x, rate, rng, training):
    """Inverted dropout: survivors scaled by 1/(1-rate); eval mode is identity."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.value.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, keep)
