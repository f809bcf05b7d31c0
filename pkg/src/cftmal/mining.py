"""Positive selection, hard/diverse negative mining and sample assembly.

For each family, all foreign-family records are scored by cosine
similarity against the family's positive embedding. Candidates at or
below the similarity cap are sorted descending; the top tier becomes the
hard negatives and a random draw from the strictly lower-ranked remainder
becomes the diverse tier. Each anchor then yields several contrastive
samples mixing hard and diverse negatives.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Corpus, DescriptionRecord
from .similarity import cosine_similarity, normalize_rows


class ShortageError(ValueError):
    """Not enough candidates to satisfy the requested tier sizes."""


@dataclass
class PositiveSelection:
    family: str
    record: DescriptionRecord

    @property
    def embedding(self) -> np.ndarray:
        return self.record.vector


@dataclass
class NegativeSet:
    family: str
    hard: list  # [(record_id, similarity)] sorted by similarity descending
    diverse: list  # [(record_id, similarity)]
    threshold: float


@dataclass
class ContrastiveSample:
    anchor: str
    positive: str
    negatives: list  # 8 record ids: hard tier first, then diverse tier


@dataclass
class MiningConfig:
    threshold: float = 0.95
    n_hard: int = 20
    n_diverse: int = 12
    negatives_hard_per_sample: int = 5
    negatives_diverse_per_sample: int = 3
    samples_per_anchor: int = 4
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.threshold <= 1.0:
            raise ValueError("threshold must be in (0, 1]")
        if self.negatives_hard_per_sample > self.n_hard:
            raise ValueError("negatives_hard_per_sample exceeds n_hard")
        if self.negatives_diverse_per_sample > self.n_diverse:
            raise ValueError("negatives_diverse_per_sample exceeds n_diverse")


def _family_rng(seed: int, family: str, salt: str = "") -> np.random.Generator:
    h = hashlib.sha256(f"{salt}:{family}".encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(h[:8], "little")])


def select_positive(corpus: Corpus, family: str, mode: str = "medoid") -> PositiveSelection:
    """Pick the single ground-truth record for a family.

    mode "medoid" maximizes mean cosine similarity to all same-family
    records; mode "explicit:<id>" names the record directly.
    """
    fam_recs = [r for r in corpus.records if r.family == family]
    if not fam_recs:
        raise ValueError(f"unknown family {family!r}")
    if mode.startswith("explicit:"):
        rid = mode.split(":", 1)[1]
        for r in fam_recs:
            if r.id == rid:
                return PositiveSelection(family, r)
        raise ValueError(f"record {rid!r} not found in family {family!r}")
    if mode != "medoid":
        raise ValueError(f"unknown positive selection mode {mode!r}")
    if len(fam_recs) == 1:
        return PositiveSelection(family, fam_recs[0])
    vecs = np.stack([r.vector for r in fam_recs])
    normed, _ = normalize_rows(vecs)
    sims = normed @ normed.T
    means = (sims.sum(axis=1) - 1.0) / (len(fam_recs) - 1)
    # deterministic tie-break on id
    best = max(range(len(fam_recs)), key=lambda i: (means[i], fam_recs[i].id))
    return PositiveSelection(family, fam_recs[best])


def select_positives(corpus: Corpus, mode: str = "medoid") -> dict:
    return {f: select_positive(corpus, f, mode) for f in corpus.families}


def _foreign_similarities(corpus: Corpus, positive: PositiveSelection):
    """(record, similarity) for every record outside the positive's family."""
    foreign = [r for r in corpus.records if r.family != positive.family]
    if not foreign:
        return []
    vecs = np.stack([r.vector for r in foreign])
    normed, _ = normalize_rows(vecs)
    e = positive.embedding
    n = np.linalg.norm(e)
    en = e / n if n > 0 else e
    sims = normed @ en
    return list(zip(foreign, sims.tolist()))


def mine_negatives(corpus: Corpus, positives: dict, family: str, cfg: MiningConfig) -> NegativeSet:
    """Hard/diverse negative tiers for one family (similarity-ranked)."""
    cfg.validate()
    if family not in positives:
        raise ValueError(f"no positive selected for family {family!r}")
    pos = positives[family]
    scored = _foreign_similarities(corpus, pos)
    candidates = [(r, s) for r, s in scored if s <= cfg.threshold]
    need = cfg.n_hard + cfg.n_diverse
    if len(candidates) < need:
        raise ShortageError(
            f"family {family!r}: {len(candidates)} candidates at or below "
            f"threshold {cfg.threshold}, need {need} "
            f"({cfg.n_hard} hard + {cfg.n_diverse} diverse)"
        )
    candidates.sort(key=lambda rs: (-rs[1], rs[0].family, rs[0].id))
    hard = [(r.id, s) for r, s in candidates[: cfg.n_hard]]
    rest = candidates[cfg.n_hard :]
    rng = _family_rng(cfg.seed, family, "mine")
    pick = rng.choice(len(rest), size=cfg.n_diverse, replace=False)
    diverse = [(rest[i][0].id, rest[i][1]) for i in sorted(pick.tolist())]
    return NegativeSet(family, hard, diverse, cfg.threshold)


def mine_random(corpus: Corpus, family: str, n_total: int = 32, seed: int = 0,
                n_hard_slots: int = 20) -> NegativeSet:
    """Uniform-random negatives, ablation baseline.

    The selection is a uniform draw over all foreign records; the 20/12
    hard/diverse partition exists only for interface compatibility (slots
    are filled by descending similarity within the drawn set).
    """
    fam_recs = [r for r in corpus.records if r.family == family]
    if not fam_recs:
        raise ValueError(f"unknown family {family!r}")
    pos = select_positive(corpus, family)
    scored = _foreign_similarities(corpus, pos)
    if len(scored) < n_total:
        raise ShortageError(
            f"family {family!r}: {len(scored)} foreign records, need {n_total}"
        )
    rng = _family_rng(seed, family, "random")
    pick = rng.choice(len(scored), size=n_total, replace=False)
    chosen = [scored[i] for i in pick.tolist()]
    chosen.sort(key=lambda rs: (-rs[1], rs[0].family, rs[0].id))
    hard = [(r.id, s) for r, s in chosen[:n_hard_slots]]
    diverse = [(r.id, s) for r, s in chosen[n_hard_slots:]]
    return NegativeSet(family, hard, diverse, 1.0)


def build_samples(anchors, positive: PositiveSelection, negs: NegativeSet,
                  cfg: MiningConfig) -> list:
    """Assemble contrastive samples: per anchor, several distinct draws of
    hard + diverse negatives."""
    cfg.validate()
    for a in anchors:
        if a.family != positive.family:
            raise ValueError(f"anchor {a.id!r} is not in family {positive.family!r}")
    if len(negs.hard) < cfg.negatives_hard_per_sample:
        raise ShortageError(
            f"hard tier has {len(negs.hard)}, need {cfg.negatives_hard_per_sample}"
        )
    if len(negs.diverse) < cfg.negatives_diverse_per_sample:
        raise ShortageError(
            f"diverse tier has {len(negs.diverse)}, need {cfg.negatives_diverse_per_sample}"
        )
    hard_ids = [rid for rid, _ in negs.hard]
    diverse_ids = [rid for rid, _ in negs.diverse]
    rng = _family_rng(cfg.seed, positive.family, "samples")
    samples = []
    for anchor in anchors:
        seen = set()
        for _ in range(cfg.samples_per_anchor):
            # redraw to keep the draws per anchor distinct when tiers permit
            for _attempt in range(64):
                h = rng.choice(len(hard_ids), size=cfg.negatives_hard_per_sample, replace=False)
                d = rng.choice(len(diverse_ids), size=cfg.negatives_diverse_per_sample, replace=False)
                key = (frozenset(h.tolist()), frozenset(d.tolist()))
                if key not in seen:
                    break
            seen.add(key)
            negatives = [hard_ids[i] for i in sorted(h.tolist())]
            negatives += [diverse_ids[i] for i in sorted(d.tolist())]
            samples.append(ContrastiveSample(anchor.id, positive.record.id, negatives))
    return samples


def similarity_histogram(corpus: Corpus, positives: dict, family: str, n_bins: int):
    """Histogram of foreign-record similarities to the family positive."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if family not in positives:
        raise ValueError(f"no positive selected for family {family!r}")
    scored = _foreign_similarities(corpus, positives[family])
    sims = np.array([s for _, s in scored], dtype=np.float64)
    counts, edges = np.histogram(sims, bins=n_bins, range=(-1.0, 1.0))
    return edges, counts


# --- serialization -------------------------------------------------------


def negative_sets_to_jsonl(path, sets) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ns in sets:
            fh.write(json.dumps({
                "family": ns.family,
                "threshold": ns.threshold,
                "hard": [[rid, s] for rid, s in ns.hard],
                "diverse": [[rid, s] for rid, s in ns.diverse],
            }, sort_keys=True) + "\n")


def negative_sets_from_jsonl(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(NegativeSet(
                d["family"],
                [(rid, s) for rid, s in d["hard"]],
                [(rid, s) for rid, s in d["diverse"]],
                d["threshold"],
            ))
    return out


def samples_to_jsonl(path, samples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps({
                "anchor": s.anchor,
                "positive": s.positive,
                "negatives": s.negatives,
            }, sort_keys=True) + "\n")


def samples_from_jsonl(path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(ContrastiveSample(d["anchor"], d["positive"], list(d["negatives"])))
    return out


def histogram_to_csv(path, edges, counts) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "count"])
        for i, c in enumerate(counts):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])), int(c)])
