"""MAML episodic training and few-shot evaluation.

The inner loop runs plain SGD on the support loss; the outer loop applies
AdamW to the shared initialization using either the first-order
approximation (query gradient at the adapted parameters) or the exact
second-order meta-gradient, obtained by reverse accumulation through the
inner steps with Hessian-vector products.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import Corpus
from .fusion import MultimodalSample, batch_arrays
from .numeric import adamw_init, adamw_step


@dataclass
class Episode:
    support: list
    query: list
    families: list
    seed: int


@dataclass
class MamlConfig:
    inner_steps: int = 5
    inner_lr: float = 0.01
    meta_lr: float = 1e-3
    tasks_per_meta_batch: int = 4
    meta_iterations: int = 40
    order: str = "first"  # or "second"
    n_way: int | None = None  # None = all families in the pool
    n_support: int = 10
    n_query: int = 20
    seed: int = 0

    def validate(self) -> None:
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.inner_lr <= 0.0 or self.meta_lr < 0.0:
            raise ValueError("learning rates must be positive")
        if self.order not in ("first", "second"):
            raise ValueError(f"unknown order {self.order!r}")


def build_pool(corpus: Corpus, attributes) -> list:
    """Pair refined embeddings with attribute vectors by record id."""
    attr_by_id = {a.id: a for a in attributes}
    classes = corpus.class_index()
    pool = []
    for r in corpus.records:
        a = attr_by_id.get(r.id)
        if a is None:
            raise ValueError(f"record {r.id!r} has no attribute row")
        pool.append(MultimodalSample(r.id, a.attributes, r.vector, classes[r.family]))
    return pool


def sample_episode(pool, cfg: MamlConfig, seed: int) -> Episode:
    """Uniform without-replacement support/query draw per family."""
    by_label = {}
    for s in pool:
        by_label.setdefault(s.label, []).append(s)
    labels = sorted(by_label)
    rng = np.random.default_rng([seed, 0xE915])
    if cfg.n_way is not None and cfg.n_way < len(labels):
        pick = rng.choice(len(labels), size=cfg.n_way, replace=False)
        labels = [labels[i] for i in sorted(pick.tolist())]
    need = cfg.n_support + cfg.n_query
    support, query = [], []
    for lbl in labels:
        members = by_label[lbl]
        if len(members) < need:
            raise ValueError(
                f"class {lbl} has {len(members)} samples, episode needs {need}"
            )
        order = rng.permutation(len(members))
        support += [members[i] for i in order[: cfg.n_support]]
        query += [members[i] for i in order[cfg.n_support : need]]
    return Episode(support, query, labels, seed)


def _axpy(params, grads, scale):
    return [p + scale * g for p, g in zip(params, grads)]


def inner_adapt(model, support, inner_steps: int, inner_lr: float,
                teacher=None, kd_cfg=None):
    """SGD-adapt a copy of the model on the support set.

    Returns (adapted model, support-loss trace of length inner_steps + 1).
    The input model is left untouched.
    """
    if not support:
        raise ValueError("empty support set")
    attrs, embs, labels = batch_arrays(support)
    kd = _kd_tuple(teacher, kd_cfg, attrs, where="inner")
    adapted = model.clone()
    params = adapted.get_params()
    trace = []
    for _ in range(inner_steps):
        loss, grads = adapted.loss_and_grads(attrs, embs, labels, kd=kd)
        trace.append(loss)
        params = _axpy(params, grads, -inner_lr)
        adapted.set_params(params)
    final_loss, _ = adapted.loss_and_grads(attrs, embs, labels, kd=kd)
    trace.append(final_loss)
    return adapted, trace


def _kd_tuple(teacher, kd_cfg, attrs, where: str):
    if teacher is None or kd_cfg is None or kd_cfg.alpha == 0.0:
        return None
    if kd_cfg.apply_in not in (where, "both"):
        return None
    return teacher.forward(attrs), kd_cfg.alpha, kd_cfg.kd_temperature


def second_order_meta_gradient(theta0, support_grad_fn, support_hvp_fn,
                               query_grad_fn, inner_steps: int, inner_lr: float):
    """Exact meta-gradient of query_loss(theta_K) where
    theta_{t+1} = theta_t - inner_lr * support_grad(theta_t).

    Reverse accumulation: v <- v - inner_lr * H_support(theta_t) v, seeded
    with the query gradient at the adapted parameters.
    """
    thetas = [list(theta0)]
    theta = list(theta0)
    for _ in range(inner_steps):
        g = support_grad_fn(theta)
        theta = _axpy(theta, g, -inner_lr)
        thetas.append(theta)
    v = query_grad_fn(theta)
    for t in range(inner_steps - 1, -1, -1):
        hv = support_hvp_fn(thetas[t], v)
        v = _axpy(v, hv, -inner_lr)
    return v, theta


def _task_meta_gradient(model, episode: Episode, cfg: MamlConfig, teacher, kd_cfg):
    s_attrs, s_embs, s_labels = batch_arrays(episode.support)
    q_attrs, q_embs, q_labels = batch_arrays(episode.query)
    kd_inner = _kd_tuple(teacher, kd_cfg, s_attrs, where="inner")
    kd_outer = _kd_tuple(teacher, kd_cfg, q_attrs, where="outer")
    work = model.clone()

    def support_grad(params):
        work.set_params(params)
        _, g = work.loss_and_grads(s_attrs, s_embs, s_labels, kd=kd_inner)
        return g

    def support_hvp(params, vec):
        work.set_params(params)
        return work.hvp(s_attrs, s_embs, s_labels, vec, kd=kd_inner)

    def query_grad(params):
        work.set_params(params)
        _, g = work.loss_and_grads(q_attrs, q_embs, q_labels, kd=kd_outer)
        return g

    theta0 = model.get_params()
    if cfg.order == "second":
        meta_grad, theta_k = second_order_meta_gradient(
            theta0, support_grad, support_hvp, query_grad,
            cfg.inner_steps, cfg.inner_lr,
        )
    else:
        theta = list(theta0)
        for _ in range(cfg.inner_steps):
            theta = _axpy(theta, support_grad(theta), -cfg.inner_lr)
        meta_grad = query_grad(theta)
        theta_k = theta
    work.set_params(theta_k)
    logits = work.forward(q_attrs, q_embs)
    q_loss, _ = work.loss_and_grads(q_attrs, q_embs, q_labels, kd=kd_outer)
    q_acc = float(np.mean(logits.argmax(axis=1) == q_labels))
    return meta_grad, q_loss, q_acc


def meta_step(model, episodes, cfg: MamlConfig, opt_state=None,
              teacher=None, kd_cfg=None):
    """One outer-loop update over a meta-batch of episodes.

    Mutates the model parameters via AdamW; returns (opt_state, mean query
    loss, mean query accuracy).
    """
    cfg.validate()
    if not episodes:
        raise ValueError("meta_step needs at least one episode")
    params = model.get_params()
    if opt_state is None:
        opt_state = adamw_init(params, lr=cfg.meta_lr)
    grads = None
    losses, accs = [], []
    for ep in episodes:  # fixed task order keeps the reduction deterministic
        g, q_loss, q_acc = _task_meta_gradient(model, ep, cfg, teacher, kd_cfg)
        grads = g if grads is None else [a + b for a, b in zip(grads, g)]
        losses.append(q_loss)
        accs.append(q_acc)
    grads = [g / len(episodes) for g in grads]
    new_params = adamw_step(opt_state, params, grads)
    model.set_params(new_params)
    return opt_state, float(np.mean(losses)), float(np.mean(accs))


def maml_train(model, pool, cfg: MamlConfig, teacher=None, kd_cfg=None):
    """Full episodic training loop; returns (model, per-iteration metrics)."""
    cfg.validate()
    opt_state = None
    history = []
    for it in range(cfg.meta_iterations):
        episodes = [
            sample_episode(pool, cfg, seed=_derive_seed(cfg.seed, it, t))
            for t in range(cfg.tasks_per_meta_batch)
        ]
        opt_state, q_loss, q_acc = meta_step(
            model, episodes, cfg, opt_state, teacher=teacher, kd_cfg=kd_cfg
        )
        history.append({"iteration": it, "query_loss": q_loss, "query_accuracy": q_acc})
    return model, history


def _derive_seed(seed: int, *parts) -> int:
    out = np.random.SeedSequence([seed, *parts]).generate_state(1)[0]
    return int(out)


def evaluate_few_shot(model, pool, cfg: MamlConfig, n_episodes: int,
                      support_sizes=None, teacher=None, kd_cfg=None):
    """Adapt-and-measure over seeded episodes from the meta-test pool.

    Returns rows of {support_size, n_episodes, mean_accuracy, std_accuracy,
    seed}, one per support size.
    """
    cfg.validate()
    if support_sizes is None:
        support_sizes = [cfg.n_support]
    rows = []
    for size in support_sizes:
        ep_cfg = MamlConfig(**{**cfg.__dict__, "n_support": size})
        accs = []
        for e in range(n_episodes):
            ep = sample_episode(pool, ep_cfg, seed=_derive_seed(cfg.seed, 0xEFA1, size, e))
            adapted, _ = inner_adapt(
                model, ep.support, cfg.inner_steps, cfg.inner_lr,
                teacher=teacher, kd_cfg=kd_cfg,
            )
            attrs, embs, labels = batch_arrays(ep.query)
            preds = adapted.forward(attrs, embs).argmax(axis=1)
            accs.append(float(np.mean(preds == labels)))
        rows.append({
            "support_size": size,
            "n_episodes": n_episodes,
            "mean_accuracy": float(np.mean(accs)),
            "std_accuracy": float(np.std(accs)),
            "seed": cfg.seed,
        })
    return rows


def eval_report_to_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["support_size", "n_episodes", "mean_accuracy", "std_accuracy", "seed"])
        for r in rows:
            writer.writerow([
                r["support_size"], r["n_episodes"],
                repr(r["mean_accuracy"]), repr(r["std_accuracy"]), r["seed"],
            ])
