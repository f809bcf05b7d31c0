"""Corpus ingestion, the EMB1 binary format, synthetic corpora and splits."""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

EMB1_MAGIC = b"EMB1"


class FormatError(ValueError):
    """A file does not conform to its declared format."""


@dataclass
class DescriptionRecord:
    id: str
    family: str
    vector: np.ndarray


@dataclass
class AttributeRecord:
    id: str
    family: str
    attributes: np.ndarray


@dataclass
class Corpus:
    records: list
    dim: int
    families: list = field(default_factory=list)  # sorted label set

    def __post_init__(self):
        if not self.families:
            self.families = sorted({r.family for r in self.records})
        for r in self.records:
            if r.vector.shape != (self.dim,):
                raise FormatError(
                    f"record {r.id!r}: dim {r.vector.shape[0]} != corpus dim {self.dim}"
                )

    def __len__(self):
        return len(self.records)

    def by_family(self) -> dict:
        out = {f: [] for f in self.families}
        for r in self.records:
            out[r.family].append(r)
        return out

    def by_id(self) -> dict:
        return {r.id: r for r in self.records}

    def class_index(self) -> dict:
        """Dense class indices assigned by sorted label order."""
        return {f: i for i, f in enumerate(self.families)}


def write_embeddings(path, corpus: Corpus) -> None:
    """Write a corpus in the EMB1 binary format (float32 payload)."""
    with open(path, "wb") as fh:
        fh.write(EMB1_MAGIC)
        fh.write(struct.pack("<II", len(corpus.records), corpus.dim))
        block = np.stack([r.vector for r in corpus.records]) if corpus.records else np.zeros((0, corpus.dim))
        fh.write(block.astype("<f4").tobytes())
        for r in corpus.records:
            fh.write(json.dumps({"id": r.id, "family": r.family}, sort_keys=True).encode("utf-8"))
            fh.write(b"\n")


def _read_emb1(path) -> Corpus:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes, need 12)")
    if raw[:4] != EMB1_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    n, d = struct.unpack("<II", raw[4:12])
    if d < 1:
        raise FormatError(f"{path}: dimension must be positive, got {d}")
    payload_end = 12 + 4 * n * d
    if len(raw) < payload_end:
        raise FormatError(
            f"{path}: truncated payload at byte {len(raw)}, expected {payload_end}"
        )
    vectors = np.frombuffer(raw[12:payload_end], dtype="<f4").reshape(n, d)
    if not np.isfinite(vectors).all():
        bad = int(np.argwhere(~np.isfinite(vectors).all(axis=1))[0][0])
        raise FormatError(f"{path}: non-finite value in record {bad}")
    lines = raw[payload_end:].split(b"\n")
    lines = [ln for ln in lines if ln.strip()]
    if len(lines) != n:
        raise FormatError(f"{path}: trailer has {len(lines)} lines, expected {n}")
    records = []
    for i, ln in enumerate(lines):
        try:
            meta = json.loads(ln.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: bad trailer line {i}: {exc}") from exc
        if "id" not in meta or "family" not in meta:
            raise FormatError(f"{path}: trailer line {i} missing id/family")
        records.append(
            DescriptionRecord(str(meta["id"]), str(meta["family"]), vectors[i].astype(np.float64))
        )
    return Corpus(records, d)


def _read_embeddings_csv(path) -> Corpus:
    records = []
    dim = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "id" or header[1] != "family":
            raise FormatError(f"{path}: header must start with id,family")
        dim = len(header) - 2
        for rownum, row in enumerate(reader, start=2):
            if len(row) != dim + 2:
                raise FormatError(
                    f"{path}: row {rownum} has {len(row)} columns, expected {dim + 2}"
                )
            try:
                vec = np.array([float(v) for v in row[2:]], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}: row {rownum}: {exc}") from exc
            if not np.isfinite(vec).all():
                raise FormatError(f"{path}: row {rownum}: non-finite value")
            records.append(DescriptionRecord(row[0], row[1], vec))
    if not records:
        raise FormatError(f"{path}: no records")
    return Corpus(records, dim)


def load_embeddings(path) -> Corpus:
    """Load a corpus from EMB1 binary or id,family,v... CSV."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == EMB1_MAGIC:
        return _read_emb1(path)
    return _read_embeddings_csv(path)


def load_attributes(path) -> list:
    """Load attribute records from a CSV with id, family and numeric columns."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        for col in ("id", "family"):
            if col not in header:
                raise FormatError(f"{path}: missing required column {col!r}")
        id_ix = header.index("id")
        fam_ix = header.index("family")
        feat_ix = [i for i in range(len(header)) if i not in (id_ix, fam_ix)]
        if not feat_ix:
            raise FormatError(f"{path}: no attribute columns")
        for rownum, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(
                    f"{path}: row {rownum} has {len(row)} columns, expected {len(header)}"
                )
            try:
                vals = np.array([float(row[i]) for i in feat_ix], dtype=np.float64)
            except ValueError as exc:
                raise FormatError(f"{path}: row {rownum}: {exc}") from exc
            if not np.isfinite(vals).all():
                raise FormatError(f"{path}: row {rownum}: non-finite value")
            records.append(AttributeRecord(row[id_ix], row[fam_ix], vals))
    return records


def write_attributes(path, records) -> None:
    if not records:
        raise ValueError("no attribute records to write")
    m = records[0].attributes.shape[0]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "family"] + [f"f{i}" for i in range(m)])
        for r in records:
            writer.writerow([r.id, r.family] + [repr(float(v)) for v in r.attributes])


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic benchmark corpus generator."""

    n_families: int = 10
    records_per_family: int = 200
    embedding_dim: int = 64
    attribute_dim: int = 32
    cluster_spread: float = 0.4
    inter_cluster_overlap: float = 0.7
    attribute_spread: float = 5.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_families < 1 or self.records_per_family < 1:
            raise ValueError("counts must be >= 1")
        if self.embedding_dim < 1 or self.attribute_dim < 1:
            raise ValueError("dims must be >= 1")
        if not 0.0 <= self.inter_cluster_overlap <= 1.0:
            raise ValueError("inter_cluster_overlap must be in [0, 1]")
        if self.cluster_spread <= 0.0 or self.attribute_spread <= 0.0:
            raise ValueError("spreads must be > 0")


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def generate_synthetic(spec: SyntheticSpec):
    """Build a (Corpus, attribute records) pair from a synthetic spec.

    Family embedding centroids mix three unit directions: one per family,
    one shared within small groups of families (so some families are much
    more confusable than others, as in real description corpora) and one
    global direction whose weight grows with `inter_cluster_overlap`.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    o = spec.inter_cluster_overlap
    d = spec.embedding_dim
    m = spec.attribute_dim

    g = _unit(rng, d)
    centroids = []
    for _ in range(spec.n_families):
        u = _unit(rng, d)
        u -= (u @ g) * g  # keep the family direction orthogonal to the shared one
        u /= np.linalg.norm(u)
        centroids.append(math.sqrt(1.0 - o * o) * u + o * g)

    # one-way drift: for every family pair exactly one side may emit records
    # drifting toward the other, so the corridor between two centroids only
    # ever holds one family's labels
    nf = spec.n_families
    allowed = [[] for _ in range(nf)]
    for a in range(nf):
        for b in range(a + 1, nf):
            if rng.random() < 0.5:
                allowed[a].append(b)
            else:
                allowed[b].append(a)

    records = []
    attr_records = []
    n = spec.records_per_family
    for f in range(nf):
        fam = f"family{f:02d}"
        centroid = centroids[f]
        attr_centroid = rng.standard_normal(m)
        noise = rng.standard_normal((n, d)) * (spec.cluster_spread / math.sqrt(d))
        # a minority of records drift toward another family's centroid and
        # sit near (or beyond) the inter-family boundary; the rest are typical
        hard_mask = (rng.random(n) < DRIFT_FRACTION) & (len(allowed[f]) > 0)
        beta = np.where(
            hard_mask,
            rng.uniform(DRIFT_LO, DRIFT_HI, n),
            rng.uniform(0.0, 0.05, n),
        )
        choices = allowed[f] if allowed[f] else [f]
        target = rng.choice(choices, size=n)
        attr_noise = rng.standard_normal((n, m)) * spec.attribute_spread
        for i in range(n):
            rid = f"{fam}-{i:04d}"
            vec = (1.0 - beta[i]) * centroid + beta[i] * centroids[target[i]] + noise[i]
            records.append(DescriptionRecord(rid, fam, vec))
            attr_records.append(AttributeRecord(rid, fam, attr_centroid + attr_noise[i]))
    return Corpus(records, d), attr_records


DRIFT_FRACTION = 0.55
DRIFT_LO, DRIFT_HI = 0.45, 0.7


MIN_RECORDS_PER_FAMILY = 30  # 10 support + 20 query: one episode


def split_meta(corpus: Corpus, attributes, holdout_fraction: float, seed: int):
    """Stratified per-family split into (train pool, meta-test pool).

    Each pool is a (Corpus, attribute records) pair; record ids in the two
    pools are disjoint and their union is the input.
    """
    if not 0.0 <= holdout_fraction < 1.0:
        raise ValueError("holdout_fraction must be in [0, 1)")
    attr_by_id = {a.id: a for a in attributes}
    rng = np.random.default_rng(seed)
    train_recs, test_recs = [], []
    for fam in corpus.families:
        fam_recs = [r for r in corpus.records if r.family == fam]
        if len(fam_recs) < MIN_RECORDS_PER_FAMILY:
            raise ValueError(
                f"family {fam!r} has {len(fam_recs)} records, "
                f"needs >= {MIN_RECORDS_PER_FAMILY} for one episode"
            )
        n_test = int(round(len(fam_recs) * holdout_fraction))
        order = rng.permutation(len(fam_recs))
        test_ix = set(order[:n_test].tolist())
        for i, r in enumerate(fam_recs):
            (test_recs if i in test_ix else train_recs).append(r)

    def pool(recs):
        c = Corpus(recs, corpus.dim, families=list(corpus.families))
        attrs = [attr_by_id[r.id] for r in recs if r.id in attr_by_id]
        return c, attrs

    return pool(train_recs), pool(test_recs)
