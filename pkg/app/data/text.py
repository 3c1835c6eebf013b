"""Closed-vocabulary text handling: tokenization, report phrasing, prompts and prompt alignment."""
import logging
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from app.exceptions import ConfigError, InputError
from app.models import PromptSet, TokenSeq

logger = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"

CONCEPT_NAMES: Tuple[str, ...] = (
    "atelectasis",
    "cardiomegaly",
    "effusion",
    "infiltration",
    "mass",
    "nodule",
    "pneumonia",
    "pneumothorax",
    "consolidation",
    "edema",
    "emphysema",
    "fibrosis",
    "hernia",
    "fracture",
)

# surface forms used when writing reports; none of them is a prompt template
PHRASINGS: Tuple[str, ...] = (
    "evidence of {c}",
    "{c} is observed",
    "findings consistent with {c}",
    "suspicious for {c} in the lung",
    "appearance compatible with {c}",
)
PAIR_PHRASING = "{a} and {b} are seen"

FILLERS: Tuple[str, ...] = (
    "the study is of diagnostic quality",
    "comparison is made with the prior exam",
    "bony structures are otherwise unremarkable",
    "lines and tubes are unchanged",
)

ALIGNED_TEMPLATE = "there is {c} ."
PROMPT_TEMPLATES: Dict[str, str] = {
    "P1": ALIGNED_TEMPLATE,
    "P2": "a disease of {c}",
}


def tokenize(sentence: str) -> List[str]:
    return sentence.lower().split()


def concept_names(k: int) -> List[str]:
    if k > len(CONCEPT_NAMES):
        raise ConfigError(
            f"K={k} exceeds the {len(CONCEPT_NAMES)} concepts the report templates can express"
        )
    return list(CONCEPT_NAMES[:k])


def canonical_sentence(concept: str) -> str:
    return ALIGNED_TEMPLATE.format(c=concept)


def build_vocabulary_tokens(concepts: Sequence[str]) -> List[str]:
    """Specials first, then every word the generator or the prompts can emit, sorted."""
    words = set(concepts)
    for text in PHRASINGS + (PAIR_PHRASING,) + FILLERS + tuple(PROMPT_TEMPLATES.values()):
        words.update(w for w in tokenize(text.replace("{c}", "").replace("{a}", "").replace("{b}", "")))
    return [PAD, UNK] + sorted(words)


class Vocabulary:
    """Whitespace tokenizer over a closed word list; id 0 is padding."""

    def __init__(self, tokens: Sequence[str]):
        if not tokens or tokens[0] != PAD or UNK not in tokens:
            raise ConfigError(f"vocabulary must start with {PAD} and contain {UNK}")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.pad_id = 0
        self.unk_id = self.index[UNK]

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    def encode(self, sentence: str, max_len: int) -> TokenSeq:
        words = tokenize(sentence)[:max_len]
        ids = np.full(max_len, self.pad_id, dtype=np.int64)
        ids[: len(words)] = [self.index.get(w, self.unk_id) for w in words]
        pad_mask = np.ones(max_len, dtype=bool)
        pad_mask[: len(words)] = False
        return TokenSeq(ids=ids, pad_mask=pad_mask)

    def encode_batch(self, sentences: Iterable[str], max_len: int) -> Tuple[np.ndarray, np.ndarray]:
        seqs = [self.encode(s, max_len) for s in sentences]
        if not seqs:
            raise InputError("cannot encode an empty batch of sentences")
        return np.stack([s.ids for s in seqs]), np.stack([s.pad_mask for s in seqs])

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.tokens[i] for i in ids if i != self.pad_id)


def mentioned_concepts(sentence: str, concepts: Sequence[str]) -> List[str]:
    words = set(tokenize(sentence))
    return [c for c in concepts if c in words]


def prompt_align(sentences: Sequence[str], concepts: Sequence[str]) -> List[str]:
    """Append "there is <concept> ." for every concept the report mentions.

    Originals are kept as a prefix, canonical sentences follow in vocabulary order,
    and a canonical sentence already in the report is not added twice.
    """
    mentioned = set()
    for sentence in sentences:
        mentioned.update(mentioned_concepts(sentence, concepts))
    present = {" ".join(tokenize(s)) for s in sentences}
    aligned = list(sentences)
    for concept in concepts:
        canonical = canonical_sentence(concept)
        if concept in mentioned and canonical not in present:
            aligned.append(canonical)
    return aligned


def resolve_template(template_id: str) -> str:
    try:
        return PROMPT_TEMPLATES[template_id]
    except KeyError:
        raise ConfigError(
            f"unknown prompt template {template_id!r}; expected one of {', '.join(PROMPT_TEMPLATES)}"
        ) from None


def build_prompt_set(template_id: str, concepts: Sequence[str], vocab: Vocabulary, max_len: int) -> PromptSet:
    template = resolve_template(template_id)
    missing = [c for c in concepts if c not in vocab]
    if missing:
        raise ConfigError(f"concepts not in vocabulary: {missing}")
    sentences = [template.format(c=c) for c in concepts]
    ids, pad_mask = vocab.encode_batch(sentences, max_len)
    return PromptSet(
        template_id=template_id,
        template=template,
        concepts=list(concepts),
        sentences=sentences,
        ids=ids,
        pad_mask=pad_mask,
    )
