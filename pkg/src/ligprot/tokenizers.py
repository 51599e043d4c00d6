"""Vocabularies and tokenizers for protein, SMILES and instruction text."""

from __future__ import annotations

import hashlib
import re
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

__all__ = [
    "AMINO_ACIDS",
    "PAD",
    "BOS",
    "EOS",
    "UNK",
    "FUNCTION_OPEN",
    "FUNCTION_CLOSE",
    "Vocab",
    "ProteinVocab",
    "PROTEIN_VOCAB",
    "SmilesError",
    "UnknownTokenWarning",
    "VocabConfigError",
    "lex_smiles",
    "split_words",
    "tokenize_protein",
    "tokenize_smiles",
    "tokenize_text",
    "VocabCaps",
    "EncodedTriple",
    "encode_triple",
    "build_vocab",
    "load_vocab",
]

AMINO_ACIDS = "ACDEFGHIKLMNPQRSTVWY"

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
FUNCTION_OPEN, FUNCTION_CLOSE = "<FUNCTION>", "</FUNCTION>"
BASE_SPECIALS = (PAD, BOS, EOS, UNK)
TEXT_SPECIALS = BASE_SPECIALS + (FUNCTION_OPEN, FUNCTION_CLOSE)


class SmilesError(ValueError):
    """A SMILES string cannot be lexed; ``position`` is the offending offset."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


class UnknownTokenWarning(UserWarning):
    pass


class VocabConfigError(ValueError):
    pass


class Vocab:
    """Frozen token <-> id map; specials occupy the lowest ids in order."""

    def __init__(self, kind: str, tokens: Sequence[str], specials: Sequence[str] = BASE_SPECIALS):
        tokens = list(tokens)
        if list(tokens[: len(specials)]) != list(specials):
            raise VocabConfigError(f"{kind} vocabulary must start with specials {list(specials)}")
        if len(set(tokens)) != len(tokens):
            raise VocabConfigError(f"{kind} vocabulary has duplicate tokens")
        self.kind = kind
        self.tokens = tuple(tokens)
        self.specials = tuple(specials)
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and (self.kind, self.tokens) == (other.kind, other.tokens)

    def __repr__(self) -> str:
        return f"Vocab({self.kind!r}, size={len(self)}, hash={self.content_hash})"

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    def id_of(self, token: str) -> int:
        return self._index.get(token, self._index[UNK])

    def token_of(self, idx: int) -> str:
        return self.tokens[idx]

    @property
    def content_hash(self) -> str:
        payload = "\n".join((self.kind,) + self.tokens).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()[:16]

    def to_text(self) -> str:
        header = f"#vocab v1 {self.kind} {self.content_hash}"
        return "\n".join((header,) + self.tokens) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def load_vocab(path: str | Path) -> Vocab:
    """Read a vocabulary file and verify its header hash."""
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    parts = lines[0].split(" ") if lines else []
    if len(parts) != 4 or parts[0] != "#vocab" or parts[1] != "v1":
        raise VocabConfigError(f"{path}: not a v1 vocabulary file")
    kind, digest = parts[2], parts[3]
    specials = TEXT_SPECIALS if kind == "text" else BASE_SPECIALS
    vocab = Vocab(kind, lines[1:], specials)
    if vocab.content_hash != digest:
        raise VocabConfigError(f"{path}: content hash {vocab.content_hash} does not match header {digest}")
    return vocab


class ProteinVocab(Vocab):
    """Fixed 24-entry residue vocabulary: four specials, then A..Y."""

    def __init__(self):
        super().__init__("protein", BASE_SPECIALS + tuple(AMINO_ACIDS))

    def decode(self, ids: Iterable[int]) -> str:
        """Residue string for ``ids``; specials are dropped."""
        n_special = len(self.specials)
        return "".join(self.tokens[i] for i in ids if i >= n_special)


PROTEIN_VOCAB = ProteinVocab()


def tokenize_protein(seq: str, vocab: ProteinVocab = PROTEIN_VOCAB) -> list[int]:
    """``[BOS, residue ids..., EOS]``; non-standard residues become UNK."""
    if not seq:
        raise ValueError("empty protein sequence")
    ids = [vocab.id_of(ch) for ch in seq]
    n_unk = sum(1 for ch in seq if ch not in vocab or ch in vocab.specials)
    if n_unk:
        warnings.warn(f"{n_unk} unknown residue(s) mapped to UNK", UnknownTokenWarning, stacklevel=2)
    return [vocab.bos_id, *ids, vocab.eos_id]


# Bracket atoms first so "[" never falls through; two-letter halogens before
# their one-letter prefixes (maximal munch).
_SMILES_TOKEN = re.compile(
    r"\[[^\[\]]*\]"
    r"|Cl|Br"
    r"|%\d\d"
    r"|[BCNOPSFI]"
    r"|[bcnops]"
    r"|[-=#$:/\\.()@+]"
    r"|\d"
    r"|\*"
)


def lex_smiles(s: str) -> list[str]:
    """Split a SMILES string into grammar units.

    >>> lex_smiles("C[NH4+].Cl")
    ['C', '[NH4+]', '.', 'Cl']
    """
    if not s:
        raise ValueError("empty SMILES string")
    tokens = []
    pos = 0
    while pos < len(s):
        m = _SMILES_TOKEN.match(s, pos)
        if m is None:
            if s[pos] == "[":
                raise SmilesError("unmatched '['", pos)
            raise SmilesError(f"unexpected character {s[pos]!r}", pos)
        tokens.append(m.group())
        pos = m.end()
    return tokens


def tokenize_smiles(s: str, vocab: Vocab | None = None) -> list[str] | list[int]:
    """Lex ``s``; with a vocabulary, return ``[BOS, ids..., EOS]`` instead."""
    tokens = lex_smiles(s)
    if vocab is None:
        return tokens
    return [vocab.bos_id, *(vocab.id_of(t) for t in tokens), vocab.eos_id]


_WORD = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def tokenize_text(instruction: str, function_description: str, vocab: Vocab) -> list[int]:
    """Instruction words, then the description wrapped in function markers."""
    if not function_description or not function_description.strip():
        raise ValueError("empty function description")
    ids = [vocab.bos_id]
    ids += [vocab.id_of(w) for w in split_words(instruction)]
    ids.append(vocab.id_of(FUNCTION_OPEN))
    ids += [vocab.id_of(w) for w in split_words(function_description)]
    ids += [vocab.id_of(FUNCTION_CLOSE), vocab.eos_id]
    return ids


def _ranked(counts: Counter, cap: int | None, n_special: int) -> list[str]:
    ordered = sorted(counts, key=lambda tok: (-counts[tok], tok))
    if cap is not None:
        ordered = ordered[: cap - n_special]
    return ordered


@dataclass(frozen=True)
class VocabCaps:
    text: int | None = None
    smiles: int | None = None


def build_vocab(corpus: Sequence, caps: VocabCaps | None = None) -> tuple[Vocab, Vocab]:
    """Induce text and SMILES vocabularies from triples.

    Tokens are ranked by frequency (descending) then lexicographically, so the
    result depends only on the corpus as a multiset. ``caps`` bound the total
    size including specials.
    """
    caps = caps or VocabCaps()
    if not corpus:
        raise ValueError("cannot build vocabularies from an empty corpus")
    for name, cap, specials in (("text", caps.text, TEXT_SPECIALS), ("smiles", caps.smiles, BASE_SPECIALS)):
        if cap is not None and cap < len(specials):
            raise VocabConfigError(f"{name} cap {cap} is smaller than its {len(specials)} special tokens")
    words: Counter = Counter()
    atoms: Counter = Counter()
    for t in corpus:
        words.update(split_words(t.instruction))
        words.update(split_words(t.description))
        atoms.update(lex_smiles(t.smiles))
    text = Vocab("text", TEXT_SPECIALS + tuple(_ranked(words, caps.text, len(TEXT_SPECIALS))), TEXT_SPECIALS)
    smiles = Vocab("smiles", BASE_SPECIALS + tuple(_ranked(atoms, caps.smiles, len(BASE_SPECIALS))))
    return text, smiles


@dataclass(frozen=True)
class EncodedTriple:
    """Token ids of one record: text, ligand, protein (each with BOS/EOS)."""

    text_ids: tuple[int, ...]
    smiles_ids: tuple[int, ...]
    protein_ids: tuple[int, ...]

    @property
    def n_tokens(self) -> int:
        return len(self.text_ids) + len(self.smiles_ids) + len(self.protein_ids)


def encode_triple(triple, text_vocab: Vocab, smiles_vocab: Vocab) -> EncodedTriple:
    return EncodedTriple(
        tuple(tokenize_text(triple.instruction, triple.description, text_vocab)),
        tuple(tokenize_smiles(triple.smiles, smiles_vocab)),
        tuple(tokenize_protein(triple.protein)),
    )
