"""InfoNCE loss and contrastive fine-tuning of the adapter head.

The adapter is a small trainable head over frozen input embeddings; the
anchor, positive and negative vectors of every contrastive sample all
pass through it before the similarity computation.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .data import Corpus, DescriptionRecord
from .numeric import (
    ShapeError,
    adamw_init,
    adamw_step,
    chain_backward,
    chain_forward,
    chain_params,
    init_dense,
    set_chain_params,
)
from .serial import read_layers, write_layers
from .similarity import ZeroNormWarning

ADP1_MAGIC = b"ADP1"


@dataclass
class AdapterHead:
    layers: list  # [in -> hidden relu, hidden -> out identity]

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: np.ndarray) -> np.ndarray:
        out, _ = chain_forward(self.layers, x)
        return out

    def clone(self) -> "AdapterHead":
        return AdapterHead([l.clone() for l in self.layers])

    def save(self, path) -> None:
        write_layers(path, ADP1_MAGIC, self.layers)

    @classmethod
    def load(cls, path) -> "AdapterHead":
        return cls(read_layers(path, ADP1_MAGIC))


def init_adapter(in_dim: int, hidden_dim: int, out_dim: int, seed: int) -> AdapterHead:
    rng = np.random.default_rng([seed, 0x41445031])
    return AdapterHead([
        init_dense(in_dim, hidden_dim, "relu", rng),
        init_dense(hidden_dim, out_dim, "identity", rng),
    ])


@dataclass
class CftConfig:
    temperature: float = 0.07
    learning_rate: float = 1e-5
    batch_size: int = 32
    epochs: int = 1
    weight_decay: float = 0.01
    hidden_dim: int = 512
    output_dim: int = 256
    denominator_mode: str = "in_sample"  # or "in_batch"
    seed: int = 0

    def validate(self) -> None:
        if self.temperature <= 0.0:
            raise ValueError("temperature must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.denominator_mode not in ("in_sample", "in_batch"):
            raise ValueError(f"unknown denominator mode {self.denominator_mode!r}")


def _normalize(v: np.ndarray):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    zero = n[..., 0] == 0.0
    safe = np.where(n == 0.0, 1.0, n)
    return v / safe, n, zero


def _info_nce_batch(anchors: np.ndarray, candidates: np.ndarray, tau: float):
    """Mean InfoNCE loss over a batch, candidate 0 being the positive.

    anchors: (B, d); candidates: (B, C, d). Returns
    (loss, grad_anchors, grad_candidates). Gradient directions touching a
    zero-norm vector are zero.
    """
    b, c, d = candidates.shape
    if anchors.shape != (b, d):
        raise ShapeError(f"anchors {anchors.shape} vs candidates {candidates.shape}")
    a_hat, a_norm, a_zero = _normalize(anchors)
    c_hat, c_norm, c_zero = _normalize(candidates)
    if a_zero.any() or c_zero.any():
        warnings.warn("zero-norm vector in info_nce", ZeroNormWarning)
    s = np.einsum("bd,bcd->bc", a_hat, c_hat)  # cosine; zero rows give 0
    logits = s / tau
    logits -= logits.max(axis=1, keepdims=True)  # stabilization (mandatory at tau=0.07)
    e = np.exp(logits)
    p = e / e.sum(axis=1, keepdims=True)
    loss = float(np.mean(-np.log(p[:, 0])))
    # d(mean loss)/ds
    w = p.copy()
    w[:, 0] -= 1.0
    w /= tau * b
    # cosine gradients: ds/da = (c_hat - s*a_hat)/|a|, ds/dc = (a_hat - s*c_hat)/|c|
    w = np.where(c_zero, 0.0, w)
    w = np.where(a_zero[:, None], 0.0, w)
    grad_a = np.einsum("bc,bcd->bd", w, c_hat) - (w * s).sum(axis=1, keepdims=True) * a_hat
    grad_a = np.where(a_zero[:, None], 0.0, grad_a / np.where(a_norm == 0.0, 1.0, a_norm))
    grad_c = w[..., None] * (a_hat[:, None, :] - s[..., None] * c_hat)
    grad_c = grad_c / np.where(c_norm == 0.0, 1.0, c_norm)
    return loss, grad_a, grad_c


def info_nce(anchor, positive, negatives, tau: float):
    """InfoNCE loss for one sample with gradients w.r.t. every input vector.

    Returns (loss, grad_anchor, grad_positive, [grad_negative...]).
    """
    if tau <= 0.0:
        raise ValueError("tau must be > 0")
    anchor = np.asarray(anchor, dtype=np.float64)
    positive = np.asarray(positive, dtype=np.float64)
    negatives = [np.asarray(n, dtype=np.float64) for n in negatives]
    if not negatives:
        raise ValueError("at least one negative required")
    for v in [positive] + negatives:
        if v.shape != anchor.shape:
            raise ShapeError(f"dim mismatch: {v.shape} vs {anchor.shape}")
    cands = np.stack([positive] + negatives)[None, :, :]
    loss, ga, gc = _info_nce_batch(anchor[None, :], cands, tau)
    return loss, ga[0], gc[0, 0], [gc[0, 1 + i] for i in range(len(negatives))]


def _resolve(corpus: Corpus, samples):
    by_id = corpus.by_id()

    def vec(rid):
        try:
            return by_id[rid].vector
        except KeyError:
            raise ValueError(f"unresolvable record ref {rid!r}") from None

    anchors = np.stack([vec(s.anchor) for s in samples])
    positives = np.stack([vec(s.positive) for s in samples])
    negatives = np.stack([np.stack([vec(n) for n in s.negatives]) for s in samples])
    return anchors, positives, negatives


def train_adapter(samples, corpus: Corpus, cfg: CftConfig, head: AdapterHead | None = None):
    """AdamW-train the adapter on contrastive samples.

    Returns (head, trace) where trace is a list of (batch_index, mean_loss).
    """
    cfg.validate()
    if not samples:
        raise ValueError("no training samples")
    if head is None:
        head = init_adapter(corpus.dim, cfg.hidden_dim, cfg.output_dim, cfg.seed)
    else:
        head = head.clone()
    anchors, positives, negatives = _resolve(corpus, samples)
    n, k = negatives.shape[0], negatives.shape[1]
    params = chain_params(head.layers)
    opt = adamw_init(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    trace = []
    batch_index = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 0xC47, epoch]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            ix = order[start : start + cfg.batch_size]
            bsz = len(ix)
            # rows per sample: anchor, positive, negatives
            flat = np.concatenate([
                anchors[ix],
                positives[ix],
                negatives[ix].reshape(bsz * k, -1),
            ])
            out, caches = chain_forward(head.layers, flat)
            za = out[:bsz]
            zp = out[bsz : 2 * bsz]
            zn = out[2 * bsz :].reshape(bsz, k, -1)
            if cfg.denominator_mode == "in_sample":
                cands = np.concatenate([zp[:, None, :], zn], axis=1)
                loss, ga, gc = _info_nce_batch(za, cands, cfg.temperature)
                gp = gc[:, 0]
                gn = gc[:, 1:]
            else:
                loss, ga, gp, gn = _info_nce_in_batch(za, zp, zn, cfg.temperature)
            upstream = np.concatenate([ga, gp, gn.reshape(bsz * k, -1)])
            grads, _ = chain_backward(head.layers, caches, upstream)
            params = adamw_step(opt, params, grads)
            set_chain_params(head.layers, params)
            trace.append((batch_index, loss))
            batch_index += 1
    return head, trace


def _info_nce_in_batch(za, zp, zn, tau):
    """Denominator over own positive plus every negative in the batch."""
    bsz, k, dd = zn.shape
    flat_n = zn.reshape(bsz * k, dd)
    ga = np.zeros_like(za)
    gp = np.zeros_like(zp)
    gn_flat = np.zeros_like(flat_n)
    total = 0.0
    for i in range(bsz):
        cands = np.concatenate([zp[i][None, :], flat_n])[None, :, :]
        loss_i, ga_i, gc_i = _info_nce_batch(za[i][None, :], cands, tau)
        total += loss_i
        ga[i] = ga_i[0]
        gp[i] += gc_i[0, 0]
        gn_flat += gc_i[0, 1:]
    scale = 1.0 / bsz
    return total * scale, ga * scale, gp * scale, gn_flat.reshape(bsz, k, dd) * scale


def refine(head: AdapterHead, corpus: Corpus) -> Corpus:
    """Forward every corpus vector through the adapter head.

    Outputs are L2-normalized: the contrastive objective is scale-invariant,
    so the raw output scale is arbitrary and unit norm keeps refined corpora
    comparable with raw ones for any downstream consumer.
    """
    if corpus.dim != head.in_dim:
        raise ShapeError(f"corpus dim {corpus.dim} != adapter in dim {head.in_dim}")
    vecs = np.stack([r.vector for r in corpus.records])
    out = head.forward(vecs)
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    out = out / np.where(norms == 0.0, 1.0, norms)
    records = [
        DescriptionRecord(r.id, r.family, out[i])
        for i, r in enumerate(corpus.records)
    ]
    return Corpus(records, head.out_dim, families=list(corpus.families))


def loss_trace_to_csv(path, trace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["batch_index", "mean_loss"])
        for i, loss in trace:
            writer.writerow([i, repr(float(loss))])
