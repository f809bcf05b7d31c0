"""Embedding-quality metrics, the four-method ablation runner and 2D export."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import cft, mining
from .data import Corpus, generate_synthetic, split_meta
from .distill import KdConfig, distilled_training
from .fusion import init_fusion, init_teacher, teacher_train
from .meta import MamlConfig, build_pool, evaluate_few_shot
from .similarity import normalize_rows

METHODS = ("attributes_only", "pretrained_embeddings", "random_cft", "similarity_cft")


@dataclass
class EmbeddingQualityReport:
    intra_family: float
    inter_family: float
    gap: float  # intra - inter
    silhouette: float
    per_family: dict  # family -> {"intra": ..., "inter": ...}


def _pair_means(sims: np.ndarray, labels: np.ndarray):
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(len(labels), dtype=bool)
    intra_mask = same & off_diag
    inter_mask = ~same
    intra = float(sims[intra_mask].mean()) if intra_mask.any() else float("nan")
    inter = float(sims[inter_mask].mean()) if inter_mask.any() else float("nan")
    return intra, inter


def cosine_silhouette(vectors: np.ndarray, labels: np.ndarray) -> float:
    """Exact silhouette with distance 1 - cosine; degenerate points score 0."""
    normed, _ = normalize_rows(vectors)
    dist = 1.0 - normed @ normed.T
    uniq = np.unique(labels)
    n = len(labels)
    scores = np.zeros(n)
    for i in range(n):
        own = labels[i]
        same = (labels == own) & (np.arange(n) != i)
        if not same.any():
            continue  # singleton cluster: score 0
        a = dist[i, same].mean()
        b = min(dist[i, labels == other].mean() for other in uniq if other != own)
        denom = max(a, b)
        if denom > 0.0:
            scores[i] = (b - a) / denom
    return float(scores.mean())


def embedding_quality(corpus: Corpus) -> EmbeddingQualityReport:
    """Intra/inter mean cosine, separation gap and cosine silhouette."""
    if len(corpus.families) < 2:
        raise ValueError("need at least 2 families")
    counts = {f: 0 for f in corpus.families}
    for r in corpus.records:
        counts[r.family] += 1
    for f, c in counts.items():
        if c < 2:
            raise ValueError(f"family {f!r} has {c} records, need >= 2")
    vectors = np.stack([r.vector for r in corpus.records])
    classes = corpus.class_index()
    labels = np.array([classes[r.family] for r in corpus.records])
    normed, _ = normalize_rows(vectors)
    sims = normed @ normed.T
    intra, inter = _pair_means(sims, labels)
    per_family = {}
    for fam, lbl in classes.items():
        mask = labels == lbl
        fam_intra = sims[np.ix_(mask, mask)]
        off = ~np.eye(mask.sum(), dtype=bool)
        per_family[fam] = {
            "intra": float(fam_intra[off].mean()),
            "inter": float(sims[np.ix_(mask, ~mask)].mean()),
        }
    return EmbeddingQualityReport(
        intra_family=intra,
        inter_family=inter,
        gap=intra - inter,
        silhouette=cosine_silhouette(vectors, labels),
        per_family=per_family,
    )


def project_2d(corpus: Corpus):
    """PCA projection onto the top-2 principal components.

    Sign convention: the largest-magnitude loading of each component is
    positive. Returns a list of (id, family, x, y).
    """
    if len(corpus.records) < 2:
        raise ValueError("need at least 2 records")
    x = np.stack([r.vector for r in corpus.records])
    x = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(x, full_matrices=False)
    if s[0] <= 1e-12:
        raise ValueError("rank-0 data: all vectors identical")
    comps = vt[:2].copy()
    if comps.shape[0] < 2:
        comps = np.vstack([comps, np.zeros((2 - comps.shape[0], x.shape[1]))])
    for i in range(2):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    coords = x @ comps.T
    return [
        (r.id, r.family, float(coords[i, 0]), float(coords[i, 1]))
        for i, r in enumerate(corpus.records)
    ]


def projection_to_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "family", "x", "y"])
        for rid, fam, x, y in rows:
            writer.writerow([rid, fam, repr(x), repr(y)])


# --- ablation pipeline ----------------------------------------------------


@dataclass
class AblationSettings:
    """Everything one method/seed pipeline run needs beyond the data."""

    mining: mining.MiningConfig = field(default_factory=mining.MiningConfig)
    cft: cft.CftConfig = field(default_factory=cft.CftConfig)
    maml: MamlConfig = field(default_factory=MamlConfig)
    kd: KdConfig = field(default_factory=KdConfig)
    holdout_fraction: float = 0.25
    eval_episodes: int = 20
    teacher_epochs: int = 40
    teacher_lr: float = 1e-3


@dataclass
class AblationReport:
    rows: list  # {"method", "mean_accuracy", "std_accuracy", "seeds", "accuracies"}
    details: list  # one record per (method, seed) run


class PipelineStageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def run_pipeline(method: str, corpus: Corpus, attributes, settings: AblationSettings,
                 seed: int) -> dict:
    """One end-to-end run: split -> (mine -> cft -> refine) -> teacher ->
    MAML(+KD) -> few-shot eval. Returns accuracy and embedding-quality gaps."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    out = {"method": method, "seed": seed}
    try:
        (train_c, train_a), (test_c, test_a) = split_meta(
            corpus, attributes, settings.holdout_fraction, seed
        )
    except Exception as exc:
        raise PipelineStageError("split", exc) from exc

    raw_gap = embedding_quality(train_c).gap
    out["raw_gap"] = raw_gap

    if method in ("random_cft", "similarity_cft"):
        try:
            positives = mining.select_positives(train_c)
            mcfg = mining.MiningConfig(**{**settings.mining.__dict__, "seed": seed})
            neg_sets = {}
            for fam in train_c.families:
                if method == "similarity_cft":
                    neg_sets[fam] = mining.mine_negatives(train_c, positives, fam, mcfg)
                else:
                    neg_sets[fam] = mining.mine_random(
                        train_c, fam, n_total=mcfg.n_hard + mcfg.n_diverse, seed=seed,
                        n_hard_slots=mcfg.n_hard,
                    )
        except Exception as exc:
            raise PipelineStageError("mine", exc) from exc
        try:
            by_family = train_c.by_family()
            samples = []
            for fam in train_c.families:
                samples += mining.build_samples(
                    by_family[fam], positives[fam], neg_sets[fam], mcfg
                )
        except Exception as exc:
            raise PipelineStageError("samples", exc) from exc
        try:
            ccfg = cft.CftConfig(**{**settings.cft.__dict__, "seed": seed})
            head, _ = cft.train_adapter(samples, train_c, ccfg)
            train_c = cft.refine(head, train_c)
            test_c = cft.refine(head, test_c) if len(test_c.records) else test_c
        except Exception as exc:
            raise PipelineStageError("cft", exc) from exc
        out["refined_gap"] = embedding_quality(train_c).gap

    try:
        train_pool = build_pool(train_c, train_a)
        test_pool = build_pool(test_c, test_a)
        n_classes = len(corpus.families)
        mamlcfg = MamlConfig(**{**settings.maml.__dict__, "seed": seed})
    except Exception as exc:
        raise PipelineStageError("pool", exc) from exc

    try:
        if method == "attributes_only":
            student = init_teacher(train_pool[0].attributes.shape[0], n_classes, seed)
            student, _ = distilled_training(student, None, mamlcfg, None, train_pool)
            teacher = None
            kd = None
        else:
            attr_dim = train_pool[0].attributes.shape[0]
            teacher, _ = teacher_train(
                train_pool, n_classes, attr_dim,
                lr=settings.teacher_lr, epochs=settings.teacher_epochs, seed=seed,
            )
            student = init_fusion(attr_dim, train_c.dim, n_classes, seed)
            kd = settings.kd
            student, _ = distilled_training(student, teacher, mamlcfg, kd, train_pool)
    except Exception as exc:
        raise PipelineStageError("maml", exc) from exc

    try:
        rows = evaluate_few_shot(
            student, test_pool, mamlcfg, settings.eval_episodes,
            teacher=teacher, kd_cfg=kd,
        )
    except Exception as exc:
        raise PipelineStageError("eval", exc) from exc
    out["accuracy"] = rows[0]["mean_accuracy"]
    out["eval_rows"] = rows
    return out


def run_ablation(data, settings: AblationSettings, seeds, methods=METHODS) -> AblationReport:
    """Run every method over every seed.

    `data` is either a fixed (corpus, attributes) pair or a callable
    seed -> (corpus, attributes) regenerating the benchmark per seed.
    """
    details = []
    rows = []
    for method in methods:
        accs = []
        for seed in seeds:
            corpus, attributes = data(seed) if callable(data) else data
            result = run_pipeline(method, corpus, attributes, settings, seed)
            details.append(result)
            accs.append(result["accuracy"])
        rows.append({
            "method": method,
            "mean_accuracy": float(np.mean(accs)),
            "std_accuracy": float(np.std(accs)),
            "seeds": list(seeds),
            "accuracies": accs,
        })
    return AblationReport(rows, details)


def ablation_to_csv(path, report: AblationReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "mean_accuracy", "std_accuracy", "seeds"])
        for r in report.rows:
            writer.writerow([
                r["method"], repr(r["mean_accuracy"]), repr(r["std_accuracy"]),
                " ".join(str(s) for s in r["seeds"]),
            ])


# --- bundled synthetic benchmark -------------------------------------------


def benchmark_data(seed: int):
    """The bundled desk-scale benchmark: 10 families, overlap 0.7."""
    from .data import SyntheticSpec

    spec = SyntheticSpec(
        n_families=10,
        records_per_family=200,
        embedding_dim=64,
        attribute_dim=32,
        cluster_spread=0.4,
        inter_cluster_overlap=0.7,
        attribute_spread=5.0,
        seed=seed,
    )
    return generate_synthetic(spec)


def benchmark_settings() -> AblationSettings:
    """Pipeline hyperparameters tuned for the bundled benchmark.

    The adapter trains from scratch, so its learning rate and epoch count
    are higher than the config defaults (which suit resuming a converged
    head); the KD weight is kept small because the attribute teacher is
    deliberately weak on this benchmark.
    """
    return AblationSettings(
        mining=mining.MiningConfig(),
        cft=cft.CftConfig(learning_rate=2e-3, epochs=2, output_dim=64),
        maml=MamlConfig(meta_iterations=80),
        kd=KdConfig(alpha=0.2),
        holdout_fraction=0.25,
        eval_episodes=20,
        teacher_epochs=30,
    )
