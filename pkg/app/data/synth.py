"""Deterministic generator of paired patch-grid images and reports with known concepts."""
import json
import logging
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from app.config import DataConfig
from app.data.text import FILLERS, PAIR_PHRASING, PHRASINGS, build_vocabulary_tokens, concept_names
from app.exceptions import DataError
from app.models import ConceptVocab, DatasetManifest, FileEntry, PairedSample, PatchGrid

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MIN_SIGNATURE_ANGLE_DEG = 15.0
MAX_SENTENCES = 4


def write_f32(path: Path, array: np.ndarray) -> FileEntry:
    np.ascontiguousarray(array, dtype="<f4").tofile(path)
    return FileEntry(path=path.name, shape=list(array.shape))


def expected_concept_frequency(config: DataConfig) -> float:
    """P(concept is positive) when 1..max concepts are drawn uniformly without replacement."""
    return (config.max_concepts_per_image + 1) / (2.0 * config.k)


class SyntheticDatasetGenerator:
    """Writes a dataset directory: manifest.json plus flat little-endian f32 tensors and report JSON."""

    def __init__(self, config: DataConfig, output_dir: Path):
        self.config = config
        self.output_dir = Path(output_dir)
        self.rng = np.random.default_rng(config.seed)
        self.vocab: ConceptVocab = None
        self.stats = {
            "samples": {},
            "positives": 0,
            "sentences": 0,
            "grounding_patches": 0,
            "signature_redraws": 0,
        }

    def run(self) -> DatasetManifest:
        logger.info("generating dataset in %s (seed %d)", self.output_dir, self.config.seed)
        self.vocab = self.build_concepts()
        next_id = 0
        splits: Dict[str, List[PairedSample]] = {}
        for split, count in zip(SPLITS, (self.config.n_train, self.config.n_val, self.config.n_test)):
            splits[split] = [self.generate_sample(next_id + i) for i in range(count)]
            next_id += count
            self.stats["samples"][split] = count
        manifest = self.write(splits)
        logger.info("dataset written: %s", self.stats)
        return manifest

    def build_concepts(self) -> ConceptVocab:
        """Gaussian signatures, redrawn until every pair is more than 15 degrees from collinear."""
        names = concept_names(self.config.k)
        limit = np.cos(np.deg2rad(MIN_SIGNATURE_ANGLE_DEG))
        signatures = np.zeros((self.config.k, self.config.p))
        for k in range(self.config.k):
            for _ in range(10_000):
                candidate = self.rng.standard_normal(self.config.p)
                if k == 0 or np.all(np.abs(cosines(signatures[:k], candidate)) < limit):
                    break
                self.stats["signature_redraws"] += 1
            else:
                raise DataError(f"could not draw {self.config.k} non-collinear signatures in P={self.config.p}")
            signatures[k] = candidate
        return ConceptVocab(names=names, signatures=signatures, templates=list(PHRASINGS))

    def generate_sample(self, sample_id: int) -> PairedSample:
        cfg, rng = self.config, self.rng
        n_concepts = int(rng.integers(1, cfg.max_concepts_per_image + 1))
        concepts = sorted(int(c) for c in rng.choice(cfg.k, size=n_concepts, replace=False))

        patches = cfg.noise_sigma * rng.standard_normal((cfg.l, cfg.p))
        free = list(rng.permutation(cfg.l))
        grounding: Dict[int, List[int]] = {}
        for position, concept in enumerate(concepts):
            still_needed = n_concepts - position - 1
            count = min(int(rng.integers(1, 4)), len(free) - still_needed)
            chosen = sorted(int(free.pop()) for _ in range(count))
            for patch in chosen:
                patches[patch] = self.vocab.signatures[concept] + cfg.noise_sigma * rng.standard_normal(cfg.p)
            grounding[concept] = chosen

        labels = np.zeros(cfg.k)
        labels[concepts] = 1.0
        sentences = self.write_report(concepts)
        self.stats["positives"] += n_concepts
        self.stats["sentences"] += len(sentences)
        self.stats["grounding_patches"] += sum(len(v) for v in grounding.values())
        return PairedSample(
            sample_id=sample_id,
            grid=PatchGrid(patches, (cfg.grid_rows, cfg.grid_cols)),
            sentences=sentences,
            labels=labels,
            grounding=grounding,
        )

    def write_report(self, concepts: List[int]) -> List[str]:
        """Mention every positive concept at least once, pad with fillers to 1-4 sentences."""
        rng = self.rng
        names = [self.vocab.names[c] for c in rng.permutation(concepts)]
        sentences = []
        if len(names) >= 2 and rng.random() < 0.3:
            sentences.append(PAIR_PHRASING.format(a=names[0], b=names[1]))
            names = names[2:]
        for name in names:
            sentences.append(PHRASINGS[int(rng.integers(len(PHRASINGS)))].format(c=name))
        target = max(len(sentences), int(rng.integers(1, MAX_SENTENCES + 1)))
        while len(sentences) < target:
            sentences.append(FILLERS[int(rng.integers(len(FILLERS)))])
        return [sentences[i] for i in rng.permutation(len(sentences))]

    def write(self, splits: Dict[str, List[PairedSample]]) -> DatasetManifest:
        cfg = self.config
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            files = {"signatures": write_f32(self.output_dir / "signatures.f32", self.vocab.signatures)}
            reports = {}
            for split, samples in splits.items():
                n = len(samples)
                patches = np.zeros((n, cfg.l, cfg.p))
                labels = np.zeros((n, cfg.k))
                grounding = np.zeros((n, cfg.k, cfg.l))
                for row, sample in enumerate(samples):
                    patches[row] = sample.grid.patches
                    labels[row] = sample.labels
                    for concept, cells in sample.grounding.items():
                        grounding[row, concept, cells] = 1.0
                files[f"{split}_patches"] = write_f32(self.output_dir / f"{split}_patches.f32", patches)
                files[f"{split}_labels"] = write_f32(self.output_dir / f"{split}_labels.f32", labels)
                files[f"{split}_grounding"] = write_f32(self.output_dir / f"{split}_grounding.f32", grounding)
                report_path = self.output_dir / f"{split}_reports.json"
                payload = [{"id": s.sample_id, "sentences": s.sentences} for s in samples]
                report_path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
                reports[split] = report_path.name

            manifest = DatasetManifest(
                seed=cfg.seed,
                counts={split: len(samples) for split, samples in splits.items()},
                k=cfg.k,
                l=cfg.l,
                p=cfg.p,
                m=cfg.max_len,
                grid_dims=(cfg.grid_rows, cfg.grid_cols),
                concepts=self.vocab.names,
                templates=self.vocab.templates,
                vocabulary=build_vocabulary_tokens(self.vocab.names),
                files=files,
                reports=reports,
                config=cfg.model_dump(mode="json"),
            )
            (self.output_dir / "manifest.json").write_text(manifest.to_json())
        except OSError as exc:
            raise DataError(f"cannot write dataset to {self.output_dir}: {exc}") from None
        return manifest

    def summary(self) -> List[Tuple[str, str]]:
        rows = [(f"{split} samples", str(n)) for split, n in self.stats["samples"].items()]
        total = max(1, sum(self.stats["samples"].values()))
        rows.append(("positive labels / sample", f"{self.stats['positives'] / total:.2f}"))
        rows.append(("sentences / sample", f"{self.stats['sentences'] / total:.2f}"))
        rows.append(("grounding patches", str(self.stats["grounding_patches"])))
        rows.append(("signature redraws", str(self.stats["signature_redraws"])))
        return rows


def cosines(matrix: np.ndarray, vector: np.ndarray) -> np.ndarray:
    return matrix @ vector / (np.linalg.norm(matrix, axis=1) * np.linalg.norm(vector))


def generate(config: DataConfig, output_dir: Path) -> DatasetManifest:
    return SyntheticDatasetGenerator(config, output_dir).run()
