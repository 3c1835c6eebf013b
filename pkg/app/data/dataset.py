"""Loading, validating and batching a generated dataset directory."""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence

import numpy as np

from app.data.text import Vocabulary, mentioned_concepts, prompt_align
from app.exceptions import DataError
from app.models import DatasetManifest, FileEntry

logger = logging.getLogger(__name__)


@dataclass
class Split:
    name: str
    ids: np.ndarray
    patches: np.ndarray
    labels: np.ndarray
    grounding: np.ndarray
    reports: List[List[str]]

    def __len__(self) -> int:
        return len(self.ids)

    def grounding_sets(self, row: int, concept: int) -> List[int]:
        return np.flatnonzero(self.grounding[row, concept]).tolist()


def read_f32(directory: Path, entry: FileEntry) -> np.ndarray:
    path = directory / entry.path
    if not path.is_file():
        raise DataError(f"dataset file missing: {path}")
    size = path.stat().st_size
    if size != entry.nbytes:
        raise DataError(f"{path} holds {size} bytes, manifest shape {entry.shape} needs {entry.nbytes}")
    return np.fromfile(path, dtype="<f4").reshape(entry.shape)


class SimRDataset:
    """A dataset directory opened read-only: manifest, vocabulary and all splits."""

    def __init__(self, directory: Path):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise DataError(f"dataset directory not found: {self.directory}")
        self.manifest = DatasetManifest.read(self.directory)
        self.vocab = Vocabulary(self.manifest.vocabulary)
        self.concepts = list(self.manifest.concepts)
        self.grid_dims = tuple(self.manifest.grid_dims)
        self.splits: Dict[str, Split] = {
            name: self._load_split(name) for name in self.manifest.counts
        }

    def _load_split(self, name: str) -> Split:
        m = self.manifest
        try:
            entries = [m.files[f"{name}_{kind}"] for kind in ("patches", "labels", "grounding")]
            report_name = m.reports[name]
        except KeyError as exc:
            raise DataError(f"manifest has no entry {exc} for split {name!r}") from None
        patches, labels, grounding = (read_f32(self.directory, e) for e in entries)
        n = m.counts[name]
        expected = {
            "patches": (n, m.l, m.p),
            "labels": (n, m.k),
            "grounding": (n, m.k, m.l),
        }
        for kind, array in zip(expected, (patches, labels, grounding)):
            if array.shape != expected[kind]:
                raise DataError(f"{name}_{kind} has shape {array.shape}, expected {expected[kind]}")
        try:
            payload = json.loads((self.directory / report_name).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read reports for split {name!r}: {exc}") from None
        if len(payload) != n:
            raise DataError(f"{report_name} lists {len(payload)} reports, expected {n}")
        return Split(
            name=name,
            ids=np.array([r["id"] for r in payload], dtype=np.int64),
            patches=patches,
            labels=labels,
            grounding=grounding.astype(bool),
            reports=[list(r["sentences"]) for r in payload],
        )

    @property
    def num_patches(self) -> int:
        return self.manifest.l

    @property
    def patch_dim(self) -> int:
        return self.manifest.p

    @property
    def max_len(self) -> int:
        return self.manifest.m

    def split(self, name: str) -> Split:
        try:
            return self.splits[name]
        except KeyError:
            raise DataError(f"dataset has no {name!r} split (has {sorted(self.splits)})") from None

    def validate(self) -> List[str]:
        """Consistency problems between labels, grounding and report text; empty when clean."""
        problems: List[str] = []
        seen: Dict[int, str] = {}
        for split in self.splits.values():
            for row, sample_id in enumerate(split.ids.tolist()):
                if sample_id in seen:
                    problems.append(f"sample {sample_id} appears in {seen[sample_id]} and {split.name}")
                seen[sample_id] = split.name
                mentioned = set()
                for sentence in split.reports[row]:
                    mentioned.update(mentioned_concepts(sentence, self.concepts))
                positives = {self.concepts[k] for k in np.flatnonzero(split.labels[row] > 0.5)}
                if mentioned != positives:
                    problems.append(
                        f"{split.name}[{row}]: labels {sorted(positives)} but text mentions {sorted(mentioned)}"
                    )
                for k, concept in enumerate(self.concepts):
                    has_cells = bool(split.grounding[row, k].any())
                    if has_cells != (concept in positives):
                        problems.append(f"{split.name}[{row}]: grounding for {concept} does not match its label")
                for sentence in split.reports[row]:
                    unknown = [w for w in sentence.lower().split() if w not in self.vocab]
                    if unknown:
                        problems.append(f"{split.name}[{row}]: out-of-vocabulary words {unknown}")
        return problems


def sentence_pools(
    reports: Sequence[Sequence[str]],
    concepts: Sequence[str],
    align: bool,
    rewriter: Optional[Callable[[List[str]], List[str]]] = None,
) -> List[List[str]]:
    """Per-sample sentence pools; with alignment on the canonical prompt sentences are merged in."""
    if not align:
        return [list(r) for r in reports]
    rewrite = rewriter or (lambda sentences: prompt_align(sentences, concepts))
    return [rewrite(list(r)) for r in reports]


def sample_sentences(pools: Sequence[Sequence[str]], indices: np.ndarray, rng: np.random.Generator) -> List[str]:
    """One sentence per sample, uniformly from its pool."""
    return [pools[i][int(rng.integers(len(pools[i])))] for i in indices]


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Shuffled index batches; a trailing batch of one sample has no negatives and is dropped."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        batch = order[start:start + batch_size]
        if len(batch) < 2:
            logger.warning("dropping a size-%d batch: InfoNCE needs in-batch negatives", len(batch))
            continue
        yield batch


def flip_horizontal(patches: np.ndarray, grid_dims: Sequence[int]) -> np.ndarray:
    """Mirror grid columns of (..., L, P) patches."""
    rows, cols = grid_dims
    lead = patches.shape[:-2]
    grid = patches.reshape(lead + (rows, cols, patches.shape[-1]))
    return grid[..., ::-1, :].reshape(patches.shape)


def augment(patches: np.ndarray, grid_dims: Sequence[int], rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    flips = rng.random(len(patches)) < p
    if not flips.any():
        return patches
    out = patches.copy()
    out[flips] = flip_horizontal(patches[flips], grid_dims)
    return out
