"""Domain types for the alignment lab."""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from app.exceptions import DataError, InputError
from app.tensor import Tensor

MANIFEST_VERSION = 1


@dataclass(frozen=True)
class PatchGrid:
    """One image as an L x P matrix of raw patch features laid out on a rows x cols grid."""

    patches: np.ndarray
    grid_dims: Tuple[int, int]

    def __post_init__(self):
        rows, cols = self.grid_dims
        if self.patches.ndim != 2 or self.patches.shape[0] < 1:
            raise DataError(f"patch grid must be L x P with L >= 1, got shape {self.patches.shape}")
        if rows * cols != self.patches.shape[0]:
            raise DataError(f"grid {rows}x{cols} does not hold {self.patches.shape[0]} patches")
        if not np.all(np.isfinite(self.patches)):
            raise DataError("patch grid contains non-finite values")

    @property
    def num_patches(self) -> int:
        return self.patches.shape[0]


@dataclass(frozen=True)
class TokenSeq:
    """Token ids padded/truncated to M; ``pad_mask`` is True at padding positions."""

    ids: np.ndarray
    pad_mask: np.ndarray

    def __post_init__(self):
        if self.ids.shape != self.pad_mask.shape or self.ids.ndim != 1:
            raise InputError(f"ids {self.ids.shape} and pad_mask {self.pad_mask.shape} must be equal 1-d")
        if self.pad_mask.all():
            raise InputError("token sequence has no non-pad token")

    @property
    def length(self) -> int:
        return int((~self.pad_mask).sum())


@dataclass
class FeatureBundle:
    """x^l (I x L x D), x^g (I x D), y^l (T x M x D), y^g (T x D) plus the text validity mask."""

    x_local: Tensor
    x_global: Tensor
    y_local: Tensor
    y_global: Tensor
    y_valid: np.ndarray

    @property
    def num_images(self) -> int:
        return self.x_global.shape[0]

    @property
    def num_texts(self) -> int:
        return self.y_global.shape[0]

    @property
    def dim(self) -> int:
        return self.x_global.shape[-1]


@dataclass
class SimilarityOutput:
    """SimR in both directions, their projected similarity matrices and attention weights."""

    s_t2i: Tensor
    s_i2t: Tensor
    sr_t2i: Optional[Tensor] = None
    sr_i2t: Optional[Tensor] = None
    attn_t2i: Optional[np.ndarray] = None
    attn_i2t: Optional[np.ndarray] = None
    zero_norm_count: int = 0


@dataclass
class LossBreakdown:
    l_t2i: Tensor
    l_i2t: Tensor
    total: Tensor
    batch_size: int

    def as_floats(self) -> Dict[str, float]:
        return {"l_t2i": self.l_t2i.item(), "l_i2t": self.l_i2t.item(), "total": self.total.item()}


@dataclass
class ConceptVocab:
    """Concept names, their patch signatures and surface-form phrasing templates."""

    names: List[str]
    signatures: np.ndarray
    templates: List[str]

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DataError("concept names must be unique")
        if self.signatures.shape[0] != len(self.names):
            raise DataError("one signature per concept is required")

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass
class PairedSample:
    sample_id: int
    grid: PatchGrid
    sentences: List[str]
    labels: np.ndarray
    grounding: Dict[int, List[int]] = field(default_factory=dict)


class FileEntry(BaseModel):
    path: str
    shape: List[int]
    dtype: str = "<f4"

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape)) * np.dtype(self.dtype).itemsize


class DatasetManifest(BaseModel):
    """Describes a dataset directory: shapes live here, raw files hold flat little-endian f32."""

    version: int = MANIFEST_VERSION
    seed: int
    counts: Dict[str, int]
    k: int
    l: int
    p: int
    m: int
    grid_dims: Tuple[int, int]
    concepts: List[str]
    templates: List[str]
    vocabulary: List[str]
    files: Dict[str, FileEntry]
    reports: Dict[str, str] = Field(default_factory=dict)
    config: Dict[str, Any] = Field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    @classmethod
    def read(cls, directory: Path) -> "DatasetManifest":
        path = Path(directory) / "manifest.json"
        try:
            return cls.model_validate_json(path.read_text())
        except FileNotFoundError:
            raise DataError(f"dataset manifest not found: {path}") from None
        except ValueError as exc:
            raise DataError(f"dataset manifest {path} is invalid: {exc}") from None


@dataclass
class PromptSet:
    """One instantiated prompt per concept for a template id."""

    template_id: str
    template: str
    concepts: List[str]
    sentences: List[str]
    ids: np.ndarray
    pad_mask: np.ndarray


class ClassMetrics(BaseModel):
    concept: str
    n_pos: int
    auc: Optional[float] = Field(None, ge=0.0, le=1.0)
    mcc: float = Field(..., ge=-1.0, le=1.0)
    f1: float = Field(..., ge=0.0, le=1.0)
    acc: float = Field(..., ge=0.0, le=1.0)
    threshold: float
    threshold_fallback: bool = False
    pointing_hit_rate: Optional[float] = Field(None, ge=0.0, le=1.0)
    pointing_trials: int = 0


class MeanMetrics(BaseModel):
    auc: Optional[float] = None
    mcc: float
    f1: float
    acc: float
    pointing_hit_rate: Optional[float] = None
    auc_defined_classes: int
    pointing_defined_classes: int


class EvalReport(BaseModel):
    """Per-class and mean zero-shot metrics plus grounding hit rates."""

    template_id: str
    direction: str
    aligned: bool
    per_class: List[ClassMetrics]
    mean: MeanMetrics
    thresholds: Dict[str, float]
    config: Dict[str, Any] = Field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        rows = [m.model_dump() for m in self.per_class]
        mean = self.mean
        rows.append({
            "concept": "mean",
            "n_pos": sum(m.n_pos for m in self.per_class),
            "auc": mean.auc,
            "mcc": mean.mcc,
            "f1": mean.f1,
            "acc": mean.acc,
            "threshold": None,
            "threshold_fallback": any(m.threshold_fallback for m in self.per_class),
            "pointing_hit_rate": mean.pointing_hit_rate,
            "pointing_trials": sum(m.pointing_trials for m in self.per_class),
        })
        frame = pd.DataFrame(rows)
        frame.insert(0, "direction", self.direction)
        frame.insert(0, "template", self.template_id)
        return frame

    def write(self, directory: Path, stem: str) -> Tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        json_path = directory / f"{stem}.json"
        csv_path = directory / f"{stem}.csv"
        json_path.write_text(json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
        frame = self.to_frame()
        frame["config"] = json.dumps(self.config, sort_keys=True)
        frame.to_csv(csv_path, index=False, float_format="%.6f")
        return json_path, csv_path


class RewriteRequest(BaseModel):
    """Body of the remote prompt rewriter call."""

    report: str = Field(..., min_length=1, description="Report sentences separated by newlines")
    instruction: str = Field(..., description="What the rewriter is asked to do")
    vocab: List[str] = Field(..., min_length=1, description="Concept names the rewriter may insert")

    model_config = {
        "json_schema_extra": {
            "example": {
                "report": "evidence of fibrosis\nlines and tubes are unchanged",
                "instruction": "append 'there is <concept> .' for every mentioned concept",
                "vocab": ["fibrosis", "edema"],
            }
        }
    }


class RewriteResponse(BaseModel):
    rewritten: str = Field(..., description="Rewritten report, one sentence per line")
