"""Sequence-level evaluation: global alignment, recovery, novelty, diversity.

Identity is ``matches / alignment length`` where the length counts gap
columns. This penalises length mismatch, so a designed sequence twice the
reference length can never exceed 50% identity.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import os
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Scoring",
    "DEFAULT_SCORING",
    "AlignmentResult",
    "global_align",
    "identity",
    "novelty",
    "mean_novelty",
    "diversity",
    "format_fasta",
    "write_fasta",
    "read_fasta",
    "EXTERNAL_METRICS",
    "emit_eval_manifest",
]

GAP = "-"


@dataclass(frozen=True)
class Scoring:
    match: float = 1.0
    mismatch: float = -1.0
    gap: float = -1.0


DEFAULT_SCORING = Scoring()


@dataclass(frozen=True)
class AlignmentResult:
    aligned_a: str
    aligned_b: str
    score: float
    matches: int

    @property
    def alignment_length(self) -> int:
        return len(self.aligned_a)

    @property
    def identity(self) -> float:
        return self.matches / self.alignment_length


# Below this many cells the plain-Python fill beats per-row numpy overhead.
_SMALL = 400


def _fill_small(a: str, b: str, sc: Scoring) -> list[list[float]]:
    m, n = len(a), len(b)
    gap = sc.gap
    H = [[0.0] * (n + 1) for _ in range(m + 1)]
    for j in range(1, n + 1):
        H[0][j] = gap * j
    for i in range(1, m + 1):
        prev, row = H[i - 1], H[i]
        row[0] = gap * i
        ai = a[i - 1]
        for j in range(1, n + 1):
            diag = prev[j - 1] + (sc.match if ai == b[j - 1] else sc.mismatch)
            up = prev[j] + gap
            left = row[j - 1] + gap
            row[j] = diag if diag >= up and diag >= left else (up if up >= left else left)
    return H


def _fill_rows(a: str, b: str, sc: Scoring) -> np.ndarray:
    m, n = len(a), len(b)
    a_codes = np.frombuffer(a.encode("latin-1"), dtype=np.uint8)
    b_codes = np.frombuffer(b.encode("latin-1"), dtype=np.uint8)
    steps = sc.gap * np.arange(n + 1)
    H = np.empty((m + 1, n + 1))
    H[0] = steps
    for i in range(1, m + 1):
        prev = H[i - 1]
        sub = np.where(b_codes == a_codes[i - 1], sc.match, sc.mismatch)
        best = np.maximum(prev[:-1] + sub, prev[1:] + sc.gap)
        vals = np.concatenate(([sc.gap * i], best))
        # linear gaps: a run of left moves from column k costs gap * (j - k)
        H[i] = np.maximum.accumulate(vals - steps) + steps
    return H


def global_align(a: str, b: str, scoring: Scoring = DEFAULT_SCORING) -> AlignmentResult:
    """Needleman-Wunsch alignment with linear gap penalties.

    Traceback prefers diagonal, then up (gap in ``b``), then left (gap in
    ``a``), so the reported alignment is deterministic among co-optimal ones.
    """
    if not a or not b:
        raise ValueError("global_align needs two non-empty sequences")
    sc = scoring
    if len(a) * len(b) <= _SMALL:
        H = _fill_small(a, b, sc)
    else:
        H = _fill_rows(a, b, sc).tolist()
    tol = 1e-9
    i, j = len(a), len(b)
    out_a, out_b = [], []
    matches = 0
    while i > 0 or j > 0:
        h = H[i][j]
        if i > 0 and j > 0:
            same = a[i - 1] == b[j - 1]
            if abs(h - (H[i - 1][j - 1] + (sc.match if same else sc.mismatch))) <= tol:
                out_a.append(a[i - 1])
                out_b.append(b[j - 1])
                matches += same
                i -= 1
                j -= 1
                continue
        if i > 0 and abs(h - (H[i - 1][j] + sc.gap)) <= tol:
            out_a.append(a[i - 1])
            out_b.append(GAP)
            i -= 1
        else:
            out_a.append(GAP)
            out_b.append(b[j - 1])
            j -= 1
    return AlignmentResult("".join(reversed(out_a)), "".join(reversed(out_b)),
                           float(H[len(a)][len(b)]), matches)


def identity(a: str, b: str, scoring: Scoring = DEFAULT_SCORING) -> float:
    """Fraction of identical columns in the optimal global alignment.

    Co-optimal alignments can differ in match count, so the pair is put in a
    canonical order first; this makes ``identity(a, b) == identity(b, a)``.
    """
    if (len(a), a) > (len(b), b):
        a, b = b, a
    return global_align(a, b, scoring).identity


def novelty(designed: str, ground_truth: str, scoring: Scoring = DEFAULT_SCORING) -> float:
    """``1 - recovery`` of a designed sequence against its reference."""
    return 1.0 - identity(designed, ground_truth, scoring)


def mean_novelty(pairs: Iterable[tuple[str, str]], scoring: Scoring = DEFAULT_SCORING) -> float:
    values = [novelty(d, g, scoring) for d, g in pairs]
    if not values:
        raise ValueError("mean_novelty needs at least one pair")
    return float(np.mean(values))


def diversity(samples: Sequence[str], scoring: Scoring = DEFAULT_SCORING) -> float:
    """Mean ``1 - identity`` over all unordered sample pairs."""
    if len(samples) < 2:
        raise ValueError("diversity needs at least two samples")
    return float(np.mean([1.0 - identity(x, y, scoring)
                          for x, y in itertools.combinations(samples, 2)]))


# ---------------------------------------------------------------------------
# FASTA


def format_fasta(records: Iterable[tuple[str, str]], width: int = 60) -> str:
    lines = []
    for header, seq in records:
        lines.append(f">{header}")
        lines += [seq[k:k + width] for k in range(0, len(seq), width)] or [""]
    return "\n".join(lines) + "\n" if lines else ""


def write_fasta(path: str | Path, records: Iterable[tuple[str, str]], width: int = 60) -> None:
    Path(path).write_text(format_fasta(records, width), encoding="utf-8")


def read_fasta(path: str | Path) -> list[tuple[str, str]]:
    records = []
    header, chunks = None, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            if header is not None:
                records.append((header, "".join(chunks)))
            header, chunks = line[1:], []
        elif header is None:
            raise ValueError(f"{path}: sequence data before the first header")
        else:
            chunks.append(line)
    if header is not None:
        records.append((header, "".join(chunks)))
    return records


# ---------------------------------------------------------------------------
# manifests for structure-based evaluators

MANIFEST_SCHEMA_VERSION = 1
EXTERNAL_METRICS = ("iptm", "pae", "plddt", "binding_affinity", "mmgbsa_free_energy",
                    "hydrogen_bonds", "rmsd")


def _safe_name(case_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", case_id) or "case"


def _write_if_changed(path: Path, text: str) -> None:
    data = text.encode("utf-8")
    if path.exists() and path.read_bytes() == data:
        return
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def emit_eval_manifest(results: Iterable[tuple[str, str]], ligands: Mapping[str, str],
                       out_dir: str | Path) -> list[Path]:
    """Write one directory per case for downstream folding/docking tools.

    Parameters
    ----------
    results : iterable of (case_id, protein sequence)
    ligands : mapping case_id -> SMILES
    out_dir : directory that receives ``<case_id>/{protein.fasta, ligand.smi, job.json}``

    Returns
    -------
    list of Path
        The per-case directories, in input order. Re-emission rewrites
        identical bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for case_id, protein in results:
        if case_id not in ligands:
            raise KeyError(f"no ligand recorded for case {case_id!r}")
        smiles = ligands[case_id]
        case_dir = out / _safe_name(case_id)
        case_dir.mkdir(exist_ok=True)
        descriptor = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "case_id": case_id,
            "protein_file": "protein.fasta",
            "ligand_file": "ligand.smi",
            "protein_length": len(protein),
            "protein_sha256": hashlib.sha256(protein.encode()).hexdigest(),
            "ligand_smiles": smiles,
            "awaiting_metrics": list(EXTERNAL_METRICS),
            "status": "pending",
        }
        _write_if_changed(case_dir / "protein.fasta", format_fasta([(case_id, protein)]))
        _write_if_changed(case_dir / "ligand.smi", f"{smiles}\t{case_id}\n")
        _write_if_changed(case_dir / "job.json", json.dumps(descriptor, indent=2, sort_keys=True) + "\n")
        written.append(case_dir)
    return written
