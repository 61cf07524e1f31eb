"""Model assembly and losses.

Three variants share one skeleton: an embedding layer and BiLSTM encoder
feed per-task attention heads (context -> dropout -> dense relu -> dense
softmax) and, when adversarial training is enabled, a domain classifier
branch behind a gradient-reversal layer.

    st       one task head, no domain branch
    st-daan  one task head + domain branch
    mt-daan  one head per task + domain branch
"""

from __future__ import annotations

import json
from collections import namedtuple
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .data import Vocab
from .errors import ContractError, DataError, DimensionError, LabelError, ParameterError
from .layers import (
    AttentionHeadParams,
    BiLstmParams,
    DenseParams,
    EmbeddingMatrix,
    attention_head,
    bilstm,
    dense,
    dropout,
    embed,
    init_attention,
    init_bilstm,
    init_dense,
    random_embedding,
)

PROB_CLIP = 1e-7
ARCHIVE_FORMAT = 1

ParamSlot = namedtuple("ParamSlot", ["name", "var", "update_mask"])


@dataclass
class ModelSpec:
    """Architecture hyperparameters; all loss weights live here so they are
    persisted with the model and reported with every result."""

    t_x: int
    d: int
    h: int = 64
    task_names: tuple = ("task",)
    adversarial: bool = False
    n_domains: int = 0
    lam: float = 1.0
    w_tasks: tuple = ()
    w_domain: float = 0.25
    dropout_rate: float = 0.4
    attn_size: int = 32
    head_hidden: int = 10
    domain_hidden: int = 64
    domain_pooling: str = "mean"  # or "attention": the branch gets its own head
    dropout_on_acts: bool = True
    dropout_on_context: bool = True

    def __post_init__(self):
        self.task_names = tuple(self.task_names)
        if not self.w_tasks:
            self.w_tasks = tuple(1.0 for _ in self.task_names)
        self.w_tasks = tuple(float(w) for w in self.w_tasks)
        if self.m < 1:
            raise ParameterError("need at least one task")
        if len(self.w_tasks) != self.m:
            raise ParameterError(
                f"{len(self.w_tasks)} task weights for {self.m} tasks"
            )
        if min(self.t_x, self.d, self.h, self.attn_size, self.head_hidden) < 1:
            raise ParameterError("all layer sizes must be positive")
        if self.adversarial and self.n_domains < 2:
            raise ParameterError("adversarial training needs at least 2 source domains")
        if self.lam < 0 or self.w_domain < 0 or any(w < 0 for w in self.w_tasks):
            raise ParameterError("loss weights and reversal strength must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError("dropout rate must be in [0, 1)")
        if self.domain_pooling not in ("mean", "attention"):
            raise ParameterError(f"unknown domain pooling {self.domain_pooling!r}")

    @property
    def m(self):
        return len(self.task_names)


@dataclass
class TaskHead:
    attention: AttentionHeadParams
    hidden: DenseParams
    out: DenseParams

    def variables(self, prefix):
        return (
            self.attention.variables(f"{prefix}.attn")
            + self.hidden.variables(f"{prefix}.hidden")
            + self.out.variables(f"{prefix}.out")
        )


@dataclass
class DomainBranch:
    hidden: DenseParams
    out: DenseParams
    attention: AttentionHeadParams | None = None  # when the branch pools by attention

    def variables(self, prefix="domain"):
        out = self.hidden.variables(f"{prefix}.hidden") + self.out.variables(f"{prefix}.out")
        if self.attention is not None:
            out += self.attention.variables(f"{prefix}.attn")
        return out


@dataclass
class TrainedModel:
    spec: ModelSpec
    vocab: Vocab
    embedding: EmbeddingMatrix
    encoder: BiLstmParams
    heads: list
    domain: DomainBranch | None = None

    def parameters(self):
        """Every trainable tensor, with the embedding's locked-row mask."""
        slots = [
            ParamSlot("embedding.table", self.embedding.table, self.embedding.unlocked_mask()[:, None])
        ]
        for name, var in self.encoder.variables("encoder"):
            slots.append(ParamSlot(name, var, None))
        for k, head in enumerate(self.heads):
            for name, var in head.variables(f"head{k}"):
                slots.append(ParamSlot(name, var, None))
        if self.domain is not None:
            for name, var in self.domain.variables():
                slots.append(ParamSlot(name, var, None))
        return slots


def build_model(spec, vocab, embedding=None, seed=0):
    """Initialize a model. Components draw from independent seed streams so
    e.g. adding a domain branch does not shift task-head initialization."""
    if embedding is None:
        emb_rng = np.random.default_rng([seed, 0])
        embedding = random_embedding(len(vocab), spec.d, emb_rng)
    if embedding.dim != spec.d:
        raise DimensionError(f"embedding dim {embedding.dim} does not match spec d={spec.d}")
    if embedding.vocab_size != len(vocab):
        raise DimensionError(
            f"embedding rows {embedding.vocab_size} do not match vocab size {len(vocab)}"
        )
    encoder = init_bilstm(np.random.default_rng([seed, 1]), spec.d, spec.h)
    heads = []
    for k in range(spec.m):
        rng = np.random.default_rng([seed, 10 + k])
        heads.append(
            TaskHead(
                attention=init_attention(rng, 2 * spec.h, spec.attn_size),
                hidden=init_dense(rng, 2 * spec.h, spec.head_hidden),
                out=init_dense(rng, spec.head_hidden, 2),
            )
        )
    domain = None
    if spec.adversarial:
        rng = np.random.default_rng([seed, 1000])
        attn = None
        if spec.domain_pooling == "attention":
            attn = init_attention(rng, 2 * spec.h, spec.attn_size)
        domain = DomainBranch(
            hidden=init_dense(rng, 2 * spec.h, spec.domain_hidden),
            out=init_dense(rng, spec.domain_hidden, spec.n_domains),
            attention=attn,
        )
    return TrainedModel(
        spec=spec, vocab=vocab, embedding=embedding, encoder=encoder, heads=heads, domain=domain
    )


# ---------------------------------------------------------------------------
# forward passes


@dataclass
class ForwardResult:
    task_probs: list  # per task: Var [N], positive-class probability
    alphas: list  # per task: Var [N x T_x]
    domain_probs: object = None  # Var [N x n_domains] or None


def _forward(
    model,
    ids,
    mask,
    training=False,
    rng=None,
    want_tasks=True,
    want_domain=False,
    reverse_domain=True,
):
    spec = model.spec
    mask = np.asarray(mask, dtype=np.float64)
    emb = embed(model.embedding, ids)
    acts = bilstm(model.encoder, emb, mask)
    if spec.dropout_on_acts:
        acts = dropout(acts, spec.dropout_rate, rng, training)

    task_probs, alphas = [], []
    if want_tasks:
        for head in model.heads:
            context, alpha = attention_head(head.attention, acts, mask)
            if spec.dropout_on_context:
                context = dropout(context, spec.dropout_rate, rng, training)
            hidden = dense(head.hidden, context, "relu")
            probs = dense(head.out, hidden, "softmax")
            task_probs.append(ad.column(probs, 1))
            alphas.append(alpha)

    domain_probs = None
    if want_domain and model.domain is not None:
        lengths = mask.sum(axis=-1, keepdims=True)
        pooled = ad.mul(ad.sum_axis(acts, 1), 1.0 / lengths)  # pads emit zeros, so this is a masked mean
        if reverse_domain:
            pooled = ad.gradient_reversal(pooled, spec.lam)
        hidden = dense(model.domain.hidden, pooled, "relu")
        domain_probs = dense(model.domain.out, hidden, "softmax")
    return ForwardResult(task_probs=task_probs, alphas=alphas, domain_probs=domain_probs)


def _check_batch(model, batch, need_labels):
    if batch.ids.shape[1] != model.spec.t_x:
        raise DimensionError(
            f"batch encodes T_x={batch.ids.shape[1]} but model expects {model.spec.t_x}"
        )
    if need_labels:
        missing = [t for t in model.spec.task_names if t not in batch.labels]
        if missing:
            raise ContractError(f"batch is missing labels for tasks {missing}")


def st_forward(model, batch, training=False, rng=None):
    """Single-task forward: returns (probs [N], alpha [N x T_x]) as Vars."""
    if model.spec.m != 1:
        raise ContractError(f"st_forward requires a single-task model, got m={model.spec.m}")
    _check_batch(model, batch, need_labels=False)
    out = _forward(model, batch.ids, batch.mask, training=training, rng=rng, want_tasks=True)
    return out.task_probs[0], out.alphas[0]


def mt_daan_forward(model, batch, training=False, rng=None):
    """Multi-task forward: per-task probabilities and attention vectors from
    the shared encoder, plus domain probabilities when the branch exists."""
    _check_batch(model, batch, need_labels=True)
    out = _forward(
        model,
        batch.ids,
        batch.mask,
        training=training,
        rng=rng,
        want_tasks=True,
        want_domain=model.domain is not None,
    )
    return out.task_probs, out.alphas, out.domain_probs


# ---------------------------------------------------------------------------
# losses


def bce_loss(y_hat, y, present=None):
    """Mean binary cross entropy with probabilities clipped to
    [1e-7, 1 - 1e-7]; rows with `present` == 0 contribute nothing."""
    y = np.asarray(y, dtype=np.float64)
    if y_hat.value.shape != y.shape:
        raise DimensionError(f"predictions {y_hat.value.shape} vs labels {y.shape}")
    if present is not None:
        present = np.asarray(present, dtype=np.float64)
        n = present.sum()
        if n == 0:
            return ad.Var(0.0)
    else:
        n = y.size
    p = ad.clip(y_hat, PROB_CLIP, 1.0 - PROB_CLIP)
    per = ad.add(ad.mul(ad.log(p), y), ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - y))
    if present is not None:
        per = ad.mul(per, present)
    return ad.mul(ad.asum(per), -1.0 / n)


def domain_cce_loss(y_hat, y_onehot):
    """Mean categorical cross entropy against one-hot domain labels."""
    y = np.asarray(y_onehot, dtype=np.float64)
    if y_hat.value.shape != y.shape:
        raise DimensionError(f"predictions {y_hat.value.shape} vs labels {y.shape}")
    if not np.array_equal(y.sum(axis=-1), np.ones(y.shape[0])) or not np.all(
        (y == 0.0) | (y == 1.0)
    ):
        raise LabelError("domain labels must be one-hot rows")
    if np.any(np.abs(y_hat.value.sum(axis=-1) - 1.0) > 1e-6):
        raise ContractError("predicted domain rows must sum to 1")
    p = ad.clip(y_hat, PROB_CLIP, 1.0 - PROB_CLIP)
    return ad.mul(ad.asum(ad.mul(ad.log(p), y)), -1.0 / y.shape[0])


def _lift_combine(parts):
    """Sum Vars/floats; stays a float when no Var is involved."""
    total = None
    for part in parts:
        if total is None:
            total = part
        elif isinstance(total, ad.Var) or isinstance(part, ad.Var):
            total = ad.add(total, part) if isinstance(total, ad.Var) else ad.add(part, total)
        else:
            total = total + part
    return total


def _scale(x, w):
    if isinstance(x, ad.Var):
        return ad.mul(x, float(w))
    return float(w) * x


def st_daan_loss(task_loss, domain_loss, w_domain):
    """Task loss plus weighted domain loss (the reversal lives inside the
    domain forward graph, not here)."""
    if w_domain < 0:
        raise ParameterError("domain loss weight must be >= 0")
    return _lift_combine([task_loss, _scale(domain_loss, w_domain)])


def mt_daan_loss(task_losses, w_tasks, domain_loss=None, w_domain=0.0):
    """Weighted sum of per-task losses plus the weighted domain loss."""
    if len(task_losses) != len(w_tasks):
        raise DimensionError(f"{len(task_losses)} losses vs {len(w_tasks)} weights")
    if any(w < 0 for w in w_tasks) or w_domain < 0:
        raise ParameterError("loss weights must be >= 0")
    parts = [_scale(loss, w) for loss, w in zip(task_losses, w_tasks)]
    if domain_loss is not None:
        parts.append(_scale(domain_loss, w_domain))
    return _lift_combine(parts)


def covid_relevance(priority_pred, irrelevant_pred):
    """Compose two binary predictions: relevant iff priority and not irrelevant."""
    if priority_pred not in (0, 1) or irrelevant_pred not in (0, 1):
        raise LabelError(
            f"predictions must be 0 or 1, got ({priority_pred!r}, {irrelevant_pred!r})"
        )
    return int(priority_pred == 1 and irrelevant_pred == 0)


# ---------------------------------------------------------------------------
# persistence


def save_model(model, path):
    """Write a single self-describing .npz archive: spec, vocabulary (plus
    hash), and every parameter tensor. Round-trips are bit-exact."""
    arrays = {}
    for slot in model.parameters():
        arrays["param/" + slot.name] = slot.var.value
    arrays["embedding.locked"] = model.embedding.locked.astype(np.uint8)
    meta = {
        "format": ARCHIVE_FORMAT,
        "spec": asdict(model.spec),
        "vocab_tokens": model.vocab.tokens[2:],  # reserved rows are implicit
        "vocab_sha256": model.vocab.sha256(),
    }
    arrays["meta.json"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)


def load_model(path):
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["meta.json"]))
        if meta.get("format") != ARCHIVE_FORMAT:
            raise DataError(f"unsupported archive format {meta.get('format')}", path=str(path))
        spec_dict = meta["spec"]
        spec_dict["task_names"] = tuple(spec_dict["task_names"])
        spec_dict["w_tasks"] = tuple(spec_dict["w_tasks"])
        spec = ModelSpec(**spec_dict)
        vocab = Vocab(meta["vocab_tokens"])
        if vocab.sha256() != meta["vocab_sha256"]:
            raise DataError("vocabulary hash mismatch in archive", path=str(path))
        params = {
            name[len("param/") :]: archive[name]
            for name in archive.files
            if name.startswith("param/")
        }
        locked = archive["embedding.locked"].astype(bool)

    embedding = EmbeddingMatrix(table=ad.Var(params.pop("embedding.table")), locked=locked)
    model = build_model(spec, vocab, embedding=embedding, seed=0)
    for slot in model.parameters():
        if slot.name == "embedding.table":
            continue
        if slot.name not in params:
            raise DataError(f"archive is missing parameter {slot.name}", path=str(path))
        if params[slot.name].shape != slot.var.value.shape:
            raise DataError(
                f"parameter {slot.name} has shape {params[slot.name].shape}, "
                f"expected {slot.var.value.shape}",
                path=str(path),
            )
        slot.var.value = params[slot.name]
    return model
