"""Gradient verification harness.

Builds a micro multi-task adversarial model (T_x=5, d=8, h=4, 3 tasks,
3 domains, dropout off) and checks its full loss gradient against
central finite differences over every parameter entry.

Parameters are redrawn at a larger scale than training initialization:
at tiny training-scale activations the attention score bias has a
near-null gradient (softmax ignores uniform score shifts, so only tanh
curvature keeps it alive), which drowns in finite-difference noise. At
O(1) activations every path carries an informative derivative.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .data import Batch, Vocab
from .models import (
    ModelSpec,
    _forward,
    bce_loss,
    build_model,
    domain_cce_loss,
    mt_daan_loss,
)

VERIFY_SCALE = 1.2


def make_verification_model(m=3, adversarial=True, n_domains=3, seed=0, scale=VERIFY_SCALE):
    spec = ModelSpec(
        t_x=5,
        d=8,
        h=4,
        task_names=tuple(f"task{k}" for k in range(m)),
        adversarial=adversarial,
        n_domains=n_domains if adversarial else 0,
        lam=1.0,
        w_domain=0.25,
        dropout_rate=0.0,
        attn_size=4,
        head_hidden=6,
        domain_hidden=8,
    )
    vocab = Vocab([f"w{i}" for i in range(10)])
    model = build_model(spec, vocab, seed=seed)
    rng = np.random.default_rng([seed, 77])
    for slot in model.parameters():
        fresh = rng.uniform(-scale, scale, size=slot.var.value.shape)
        if slot.name == "embedding.table":
            fresh[0] = 0.0  # padding row stays zero
        slot.var.value = fresh
    return model


def make_verification_batch(model, n=6, seed=0):
    rng = np.random.default_rng([seed, 78])
    spec = model.spec
    ids = np.zeros((n, spec.t_x), dtype=np.int64)
    mask = np.zeros((n, spec.t_x))
    lengths = np.zeros(n, dtype=np.int64)
    for r in range(n):
        length = int(rng.integers(2, spec.t_x + 1))
        ids[r, :length] = rng.integers(1, len(model.vocab), size=length)
        mask[r, :length] = 1.0
        lengths[r] = length
    labels = {
        task: (rng.integers(0, 2, size=n).astype(float), np.ones(n))
        for task in spec.task_names
    }
    onehot = None
    if spec.adversarial:
        onehot = np.zeros((n, spec.n_domains))
        for r in range(n):
            onehot[r, int(rng.integers(0, spec.n_domains))] = 1.0
    return Batch(ids=ids, mask=mask, lengths=lengths, labels=labels, domain_onehot=onehot)


def full_loss(model, batch, reverse_domain=False):
    """The complete multi-task adversarial training loss for one batch.

    For gradient checking the reversal layer is bypassed by default:
    finite differences measure the true derivative, while the reversal
    deliberately propagates its negation into the shared encoder, so the
    two can only agree on the surrogate without the flip. The reversal
    edge itself has an exact contract (forward identity, backward equals
    -lam x upstream) and is verified separately.
    """
    spec = model.spec
    out = _forward(
        model,
        batch.ids,
        batch.mask,
        want_tasks=True,
        want_domain=spec.adversarial,
        reverse_domain=reverse_domain,
    )
    task_losses = [
        bce_loss(out.task_probs[k], *batch.labels[task])
        for k, task in enumerate(spec.task_names)
    ]
    domain_term = None
    if out.domain_probs is not None:
        domain_term = domain_cce_loss(out.domain_probs, batch.domain_onehot)
    return mt_daan_loss(task_losses, spec.w_tasks, domain_term, spec.w_domain)


def micro_gradcheck(eps=1e-5, seed=0, m=3, adversarial=True, n_domains=3):
    """Max relative finite-difference error over all parameters of the
    micro model's full loss. Returns (error, parameter_entry_count)."""
    model = make_verification_model(m=m, adversarial=adversarial, n_domains=n_domains, seed=seed)
    batch = make_verification_batch(model, seed=seed)
    params = [slot.var for slot in model.parameters()]
    err = ad.grad_check(lambda: full_loss(model, batch), params, eps=eps)
    n_entries = int(sum(p.value.size for p in params))
    return err, n_entries
