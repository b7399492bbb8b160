"""Class vocabularies, deterministic class embeddings and training-time class sampling.

Class names are embedded compositionally: every whitespace token maps to a
fixed unit vector seeded from a SHA-256 digest of the token, and a class
embedding is the normalised sum of its token vectors.  Unseen combinations of
seen tokens therefore land in the span of trained directions.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BASE, NOVEL = "base", "novel"
_HASH_SALT = b"ovdet-token-v1"


def normalize_name(name: str) -> str:
    return " ".join(name.strip().lower().split())


@dataclass(frozen=True)
class ClassVocabulary:
    names: Tuple[str, ...]
    roles: Tuple[str, ...]

    def __post_init__(self):
        names = tuple(normalize_name(n) for n in self.names)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "roles", tuple(self.roles))
        if not names:
            raise ValueError("vocabulary is empty")
        if any(not n for n in names):
            raise ValueError("vocabulary contains an empty class name")
        if len(set(names)) != len(names):
            raise ValueError("vocabulary contains duplicate class names")
        if len(self.roles) != len(names):
            raise ValueError("roles and names differ in length")
        bad = set(self.roles) - {BASE, NOVEL}
        if bad:
            raise ValueError(f"unknown class roles: {sorted(bad)}")
        if BASE not in self.roles:
            raise ValueError("vocabulary needs at least one base class")

    @classmethod
    def from_names(cls, names: Sequence[str], novel: Sequence[str] = ()) -> "ClassVocabulary":
        novel_set = {normalize_name(n) for n in novel}
        names = [normalize_name(n) for n in names]
        unknown = novel_set - set(names)
        if unknown:
            raise ValueError(f"novel classes not in vocabulary: {sorted(unknown)}")
        return cls(tuple(names), tuple(NOVEL if n in novel_set else BASE for n in names))

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(normalize_name(name))

    @property
    def base_indices(self) -> List[int]:
        return [i for i, r in enumerate(self.roles) if r == BASE]

    @property
    def novel_indices(self) -> List[int]:
        return [i for i, r in enumerate(self.roles) if r == NOVEL]

    def role_of(self, name: str) -> str:
        return self.roles[self.index(name)]

    def names_with_role(self, role: str) -> List[str]:
        return [n for n, r in zip(self.names, self.roles) if r == role]


def load_vocabulary(path) -> ClassVocabulary:
    """Read one class per line; a ``\\tnovel`` suffix marks a novel class."""
    names, novel = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        name, _, tag = line.partition("\t")
        names.append(name)
        if tag.strip().lower() == NOVEL:
            novel.append(name)
    return ClassVocabulary.from_names(names, novel)


def save_vocabulary(vocab: ClassVocabulary, path) -> None:
    lines = [n + ("\tnovel" if r == NOVEL else "") for n, r in zip(vocab.names, vocab.roles)]
    Path(path).write_text("\n".join(lines) + "\n")


def token_vector(token: str, d: int) -> np.ndarray:
    digest = hashlib.sha256(_HASH_SALT + token.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def embed_names(names: Sequence[str], d: int) -> np.ndarray:
    if d < 8:
        raise ValueError("embedding dimension must be at least 8")
    if len(names) == 0:
        raise ValueError("no class names to embed")
    out = np.zeros((len(names), d))
    for i, name in enumerate(names):
        tokens = normalize_name(name).split()
        if not tokens:
            raise ValueError("cannot embed an empty class name")
        v = sum(token_vector(t, d) for t in tokens)
        out[i] = v / np.linalg.norm(v)
    return out


@dataclass
class ClassEmbeddingBank:
    """Per-slot class embeddings plus validity mask.

    ``embeddings`` is ``[S, d]`` or, after image-conditioned refinement,
    ``[B, S, d]``.  Padding slots hold the empty-token (zero) row, are False
    in ``valid_mask`` and map to ``None`` in ``slot_to_class``.
    """

    embeddings: Tensor
    valid_mask: np.ndarray
    slot_to_class: List[Optional[int]]
    names: List[Optional[str]] = field(default_factory=list)

    @property
    def n_slots(self) -> int:
        return len(self.valid_mask)

    @property
    def n_valid(self) -> int:
        return int(self.valid_mask.sum())

    def slot_of(self, class_index: int) -> int:
        return self.slot_to_class.index(class_index)

    def class_to_slot(self) -> Dict[int, int]:
        return {c: s for s, c in enumerate(self.slot_to_class) if c is not None}

    def with_embeddings(self, embeddings: Tensor) -> "ClassEmbeddingBank":
        return ClassEmbeddingBank(embeddings, self.valid_mask, self.slot_to_class, self.names)

    def padded(self, extra: int) -> "ClassEmbeddingBank":
        """Append ``extra`` empty-token slots."""
        e = self.embeddings
        pad_shape = e.shape[:-2] + (extra, e.shape[-1])
        emb = ad.concat([e, Tensor(np.zeros(pad_shape))], axis=-2)
        return ClassEmbeddingBank(emb, np.concatenate([self.valid_mask, np.zeros(extra, bool)]),
                                  self.slot_to_class + [None] * extra, self.names + [None] * extra)

    def permuted(self, perm: Sequence[int]) -> "ClassEmbeddingBank":
        """Reorder slots so that new slot ``i`` is old slot ``perm[i]``."""
        perm = np.asarray(perm)
        emb = ad.index(self.embeddings, (Ellipsis, perm, slice(None)))
        return ClassEmbeddingBank(emb, self.valid_mask[perm],
                                  [self.slot_to_class[i] for i in perm],
                                  [self.names[i] for i in perm] if self.names else [])


def embed_class_names(vocab, d: int) -> ClassEmbeddingBank:
    """Embed every class of ``vocab`` (a ClassVocabulary or list of names)."""
    names = list(vocab.names) if isinstance(vocab, ClassVocabulary) else [normalize_name(n) for n in vocab]
    emb = embed_names(names, d)
    n = len(names)
    return ClassEmbeddingBank(Tensor(emb), np.ones(n, bool), list(range(n)), names)


@dataclass(frozen=True)
class SamplingPolicy:
    n_slots: int
    seed: int = 0

    def __post_init__(self):
        if self.n_slots < 1:
            raise ValueError("n_slots must be positive")


class CapacityError(ValueError):
    """More positive classes than available slots."""


def sample_slot_classes(n_classes: int, positives: Sequence[int], n_slots: int,
                        rng: np.random.Generator, pool: Optional[Sequence[int]] = None
                        ) -> List[Optional[int]]:
    """Choose and shuffle the class (or ``None`` padding) held by each slot."""
    positives = sorted(set(int(p) for p in positives))
    if any(p < 0 or p >= n_classes for p in positives):
        raise ValueError("positive class index outside the vocabulary")
    if len(positives) > n_slots:
        raise CapacityError(f"{len(positives)} positive classes exceed {n_slots} slots")
    pool = range(n_classes) if pool is None else pool
    negatives = [c for c in pool if c not in set(positives)]
    k = min(n_slots - len(positives), len(negatives))
    chosen = list(rng.choice(negatives, size=k, replace=False)) if k else []
    slots: List[Optional[int]] = positives + [int(c) for c in chosen]
    slots += [None] * (n_slots - len(slots))
    return [slots[i] for i in rng.permutation(n_slots)]


def sample_training_classes(vocab: ClassVocabulary, positives: Sequence[int], policy: SamplingPolicy,
                            d: int = 64, table: Optional[np.ndarray] = None,
                            pool: Optional[Sequence[int]] = None
                            ) -> Tuple[ClassEmbeddingBank, Dict[int, int]]:
    """Build a shuffled slot bank holding every positive class.

    Remaining slots are filled with negatives drawn without replacement from
    ``pool`` (default: the whole vocabulary); if those run out the rest are
    empty-token padding.  ``table`` is an optional precomputed embedding
    matrix for ``vocab``.
    """
    rng = np.random.default_rng(policy.seed)
    slots = sample_slot_classes(len(vocab), positives, policy.n_slots, rng, pool)
    if table is None:
        table = embed_names(vocab.names, d)
    emb = np.zeros((policy.n_slots, table.shape[1]))
    for s, c in enumerate(slots):
        if c is not None:
            emb[s] = table[c]
    bank = ClassEmbeddingBank(Tensor(emb), np.array([c is not None for c in slots]), slots,
                              [vocab.names[c] if c is not None else None for c in slots])
    return bank, bank.class_to_slot()
