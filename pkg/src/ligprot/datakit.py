"""Dataset curation: ingest triples, cluster proteins, build leakage-free splits.

Records are line-delimited JSON preceded by a header line
``{"schema": "ligprot.triples", "version": 1}``. Proteins are clustered
greedily at a sequence-identity threshold; clusters (never individual
records) are assigned to train/validation/test by size stratum; test records
are then labelled by whether their ligand string occurs in training.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .metrics import DEFAULT_SCORING, Scoring, identity
from .tokenizers import AMINO_ACIDS, SmilesError, lex_smiles

logger = logging.getLogger(__name__)

__all__ = [
    "SCHEMA",
    "Triple",
    "Reject",
    "IngestResult",
    "ingest",
    "read_triples",
    "write_triples",
    "unique_proteins",
    "Cluster",
    "cluster_sequences",
    "DEFAULT_STRATA",
    "DEFAULT_QUOTAS",
    "SplitPlan",
    "stratified_split",
    "partition_test_by_ligand",
    "Curation",
    "curate",
    "write_curation",
]

SCHEMA = {"schema": "ligprot.triples", "version": 1}
FIELDS = ("id", "instruction", "description", "smiles", "protein", "accession")
_RESIDUES = frozenset(AMINO_ACIDS)


@dataclass(frozen=True)
class Triple:
    record_id: str
    description: str
    smiles: str
    protein: str
    instruction: str = ""
    accession: str = ""
    multiplicity: int = 1

    @property
    def key(self) -> tuple[str, str, str]:
        return (self.description, self.smiles, self.protein)

    def to_record(self) -> dict:
        record = {"id": self.record_id, "instruction": self.instruction, "description": self.description,
                  "smiles": self.smiles, "protein": self.protein, "accession": self.accession}
        if self.multiplicity != 1:
            record["multiplicity"] = self.multiplicity
        return record


@dataclass(frozen=True)
class Reject:
    line: int
    reason: str


@dataclass
class IngestResult:
    triples: list[Triple]
    rejects: list[Reject]
    duplicates: int
    n_records: int


def validate_record(record: dict) -> str | None:
    """Reason the record is unusable, or ``None`` if it is valid."""
    for name in FIELDS:
        if name not in record:
            return f"missing field {name!r}"
        if not isinstance(record[name], str):
            return f"field {name!r} is not a string"
    if not record["description"].strip():
        return "empty description"
    protein = record["protein"]
    if not protein:
        return "empty protein"
    if not set(protein) <= _RESIDUES:
        return "non-standard residue"
    if not record["smiles"]:
        return "empty smiles"
    try:
        lex_smiles(record["smiles"])
    except SmilesError as exc:
        return f"invalid smiles: {exc}"
    return None


def ingest(path: str | Path) -> IngestResult:
    """Read and validate a triples file.

    Malformed lines are rejected with their line number; exact duplicates of
    (description, smiles, protein) collapse into one triple whose
    ``multiplicity`` counts them. An unreadable file raises ``OSError``.
    """
    text = Path(path).read_text(encoding="utf-8")
    kept: dict[tuple, Triple] = {}
    rejects: list[Reject] = []
    duplicates = 0
    n_records = 0
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            n_records += 1
            rejects.append(Reject(line_no, f"malformed json: {exc.msg}"))
            continue
        if isinstance(record, dict) and "schema" in record:
            if record != SCHEMA:
                raise ValueError(f"{path}: unsupported header {record}")
            continue
        n_records += 1
        if not isinstance(record, dict):
            rejects.append(Reject(line_no, "record is not an object"))
            continue
        reason = validate_record(record)
        if reason is not None:
            rejects.append(Reject(line_no, reason))
            continue
        triple = Triple(record["id"], record["description"], record["smiles"], record["protein"],
                        record["instruction"], record["accession"], int(record.get("multiplicity", 1)))
        if triple.key in kept:
            first = kept[triple.key]
            kept[triple.key] = Triple(first.record_id, first.description, first.smiles, first.protein,
                                      first.instruction, first.accession,
                                      first.multiplicity + triple.multiplicity)
            duplicates += 1
        else:
            kept[triple.key] = triple
    for r in rejects:
        logger.info("line %d rejected: %s", r.line, r.reason)
    return IngestResult(list(kept.values()), rejects, duplicates, n_records)


def read_triples(path: str | Path) -> list[Triple]:
    """Ingest, failing loudly on any rejected line."""
    result = ingest(path)
    if result.rejects:
        r = result.rejects[0]
        raise ValueError(f"{path}: line {r.line}: {r.reason}")
    return result.triples


def format_triples(triples: Iterable[Triple]) -> str:
    lines = [json.dumps(SCHEMA, sort_keys=True)]
    lines += [json.dumps(t.to_record(), sort_keys=True) for t in triples]
    return "\n".join(lines) + "\n"


def write_triples(path: str | Path, triples: Iterable[Triple]) -> None:
    Path(path).write_text(format_triples(triples), encoding="utf-8")


# ---------------------------------------------------------------------------
# clustering


@dataclass(frozen=True)
class Cluster:
    cluster_id: int
    representative: str
    members: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.members)


def unique_proteins(triples: Iterable[Triple]) -> dict[str, str]:
    """Map a stable id to each distinct protein sequence.

    The id is the smallest record id carrying that sequence, so it does not
    depend on input order.
    """
    best: dict[str, str] = {}
    for t in triples:
        if t.protein not in best or t.record_id < best[t.protein]:
            best[t.protein] = t.record_id
    return {rid: seq for seq, rid in best.items()}


def _identity_bound(a: Counter, len_a: int, b: Counter, len_b: int) -> float:
    """Upper bound on alignment identity from residue composition alone.

    Matched columns pair identical residues, so matches cannot exceed the
    multiset overlap; any alignment has at least ``max(len)`` columns.
    """
    overlap = sum(min(n, b[res]) for res, n in a.items())
    return overlap / max(len_a, len_b)


def cluster_sequences(sequences: Mapping[str, str] | Iterable[Triple], threshold: float = 0.30,
                      kmer_len: int = 1, scoring: Scoring = DEFAULT_SCORING,
                      prefilter: bool = True) -> list[Cluster]:
    """Greedy incremental clustering by global-alignment identity.

    Parameters
    ----------
    sequences : mapping id -> sequence, or iterable of Triple
        Triples are reduced with :func:`unique_proteins` first.
    threshold : float
        Minimum identity to a representative, in (0, 1].
    kmer_len : int
        Word length of the prefilter. Only residue composition (1) gives a
        bound that is exact for gap-counting identity, so only 1 is accepted.

    Notes
    -----
    Sequences are visited longest first (ties by id). Each joins the first
    existing cluster whose representative it matches at ``>= threshold``
    identity, otherwise it founds a new cluster. The prefilter only skips
    representatives for which identity provably falls short.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    if kmer_len != 1:
        raise ValueError("only kmer_len=1 (composition) gives a sound identity bound")
    if not isinstance(sequences, Mapping):
        sequences = unique_proteins(sequences)
    order = sorted(sequences, key=lambda sid: (-len(sequences[sid]), sid))
    comps = {sid: Counter(sequences[sid]) for sid in order} if prefilter else {}
    reps: list[str] = []
    members: list[list[str]] = []
    for sid in order:
        seq = sequences[sid]
        for k, rep in enumerate(reps):
            if prefilter and _identity_bound(comps[sid], len(seq), comps[rep], len(sequences[rep])) < threshold:
                continue
            if identity(seq, sequences[rep], scoring) >= threshold:
                members[k].append(sid)
                break
        else:
            reps.append(sid)
            members.append([sid])
    return [Cluster(i, rep, tuple(mem)) for i, (rep, mem) in enumerate(zip(reps, members))]


# ---------------------------------------------------------------------------
# splitting

DEFAULT_STRATA: tuple[tuple[int, int | None], ...] = ((1, 500), (501, 1000), (1001, 2500), (2501, None))
DEFAULT_QUOTAS: tuple[int, ...] = (20, 10, 5, 1)


@dataclass
class SplitPlan:
    assignment: dict[int, str]
    val_by_stratum: list[int] = field(default_factory=list)
    test_by_stratum: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def clusters_in(self, split: str) -> list[int]:
        return sorted(cid for cid, s in self.assignment.items() if s == split)


def _stratum_of(size: int, strata) -> int | None:
    for k, (lo, hi) in enumerate(strata):
        if size >= lo and (hi is None or size <= hi):
            return k
    return None


def stratified_split(clusters: Sequence[Cluster], seed: int,
                     strata: Sequence[tuple[int, int | None]] = DEFAULT_STRATA,
                     quotas: Sequence[int] = DEFAULT_QUOTAS) -> SplitPlan:
    """Assign whole clusters to train/val/test.

    Per size stratum, ``quota`` clusters go to validation and then ``quota``
    to test, sampled without replacement; the rest train. A stratum with
    fewer than ``2 * quota`` clusters gives a third of its clusters (rounded
    down) to each evaluation split and warns.
    """
    if not clusters:
        raise ValueError("no clusters to split")
    if len(strata) != len(quotas):
        raise ValueError("strata and quotas must have the same length")
    rng = np.random.default_rng(seed)
    plan = SplitPlan({c.cluster_id: "train" for c in clusters})
    for k, quota in enumerate(quotas):
        pool = sorted(c.cluster_id for c in clusters if _stratum_of(c.size, strata) == k)
        take = quota
        if len(pool) < 2 * quota:
            take = len(pool) // 3
            msg = (f"stratum {strata[k]} has {len(pool)} clusters, fewer than {2 * quota} needed; "
                   f"allocating {take} to each of val and test")
            logger.warning(msg)
            plan.warnings.append(msg)
        picked = [pool[i] for i in rng.permutation(len(pool))[: 2 * take]]
        for cid in picked[:take]:
            plan.assignment[cid] = "val"
        for cid in picked[take:]:
            plan.assignment[cid] = "test"
        plan.val_by_stratum.append(take)
        plan.test_by_stratum.append(len(picked) - take)
    return plan


def partition_test_by_ligand(test: Iterable[Triple], train: Iterable[Triple]) -> tuple[list[Triple], list[Triple]]:
    """Split test records into (seen, unseen) by exact ligand-string membership in train."""
    train_ligands = {t.smiles for t in train}
    seen, unseen = [], []
    for t in test:
        (seen if t.smiles in train_ligands else unseen).append(t)
    return seen, unseen


@dataclass
class Curation:
    clusters: list[Cluster]
    plan: SplitPlan
    train: list[Triple]
    val: list[Triple]
    test: list[Triple]
    test_seen: list[Triple]
    test_unseen: list[Triple]
    val_dropped: list[Triple]
    protein_cluster: dict[str, int]

    def report(self, ingest_result: IngestResult | None = None) -> dict:
        out = {
            "n_clusters": len(self.clusters),
            "clusters": {s: len(self.plan.clusters_in(s)) for s in ("train", "val", "test")},
            "val_clusters_by_stratum": self.plan.val_by_stratum,
            "test_clusters_by_stratum": self.plan.test_by_stratum,
            "records": {"train": len(self.train), "val": len(self.val), "test": len(self.test),
                        "test_seen": len(self.test_seen), "test_unseen": len(self.test_unseen),
                        "val_dropped_seen_ligand": len(self.val_dropped)},
            "test_seen_ids": sorted(t.record_id for t in self.test_seen),
            "test_unseen_ids": sorted(t.record_id for t in self.test_unseen),
            "warnings": self.plan.warnings,
        }
        if ingest_result is not None:
            placed = (len(self.train) + len(self.val) + len(self.test) + len(self.val_dropped)
                      + len(ingest_result.rejects) + ingest_result.duplicates)
            out["conservation"] = {"input_records": ingest_result.n_records, "accounted": placed,
                                   "balanced": placed == ingest_result.n_records}
            out["ingest"] = {"records": ingest_result.n_records,
                             "unique_triples": len(ingest_result.triples),
                             "duplicates": ingest_result.duplicates,
                             "rejected": len(ingest_result.rejects),
                             "rejects": [asdict(r) for r in ingest_result.rejects]}
        return out


def curate(triples: Sequence[Triple], threshold: float = 0.30, seed: int = 0,
           strata: Sequence[tuple[int, int | None]] = DEFAULT_STRATA,
           quotas: Sequence[int] = DEFAULT_QUOTAS, scoring: Scoring = DEFAULT_SCORING) -> Curation:
    """Cluster, split by cluster, drop seen-ligand validation records, partition test."""
    proteins = unique_proteins(triples)
    clusters = cluster_sequences(proteins, threshold, scoring=scoring)
    plan = stratified_split(clusters, seed, strata, quotas)
    seq_cluster = {proteins[sid]: c.cluster_id for c in clusters for sid in c.members}
    by_split: dict[str, list[Triple]] = {"train": [], "val": [], "test": []}
    for t in sorted(triples, key=lambda t: t.record_id):
        by_split[plan.assignment[seq_cluster[t.protein]]].append(t)
    train_ligands = {t.smiles for t in by_split["train"]}
    val = [t for t in by_split["val"] if t.smiles not in train_ligands]
    dropped = [t for t in by_split["val"] if t.smiles in train_ligands]
    if dropped:
        logger.info("dropped %d validation records whose ligand occurs in train", len(dropped))
    seen, unseen = partition_test_by_ligand(by_split["test"], by_split["train"])
    return Curation(clusters, plan, by_split["train"], val, by_split["test"], seen, unseen, dropped,
                    {sid: c.cluster_id for c in clusters for sid in c.members})


def write_curation(curation: Curation, out_dir: str | Path, ingest_result: IngestResult | None = None) -> None:
    out = Path(out_dir)
    write_triples(out / "train.jsonl", curation.train)
    write_triples(out / "val.jsonl", curation.val)
    write_triples(out / "test.jsonl", curation.test)
    rows = [f"{c.cluster_id}\t{c.representative}\t{m}" for c in curation.clusters for m in c.members]
    (out / "clusters.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    report = json.dumps(curation.report(ingest_result), indent=2, sort_keys=True)
    (out / "report.json").write_text(report + "\n", encoding="utf-8")
