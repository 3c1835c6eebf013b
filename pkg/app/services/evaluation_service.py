"""Zero-shot classification and attention grounding evaluation of a trained model."""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.data.dataset import SimRDataset, Split
from app.data.text import build_prompt_set
from app.exceptions import ConfigError, DataError, UndefinedMetricError, UnavailableError
from app.metrics import auc, pointing_game, select_thresholds, summarize, thresholded_metrics
from app.model.simr import SimRModel
from app.models import ClassMetrics, EvalReport, FeatureBundle, PromptSet
from app.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

DIRECTIONS = ("mean", "t2i", "i2t")


@dataclass
class ScoreResult:
    scores: np.ndarray
    attn_t2i: Optional[np.ndarray]
    local_count: int


class EvaluationService:
    """Scores images against per-concept prompts; prompts are encoded once per template."""

    def __init__(
        self,
        model: SimRModel,
        dataset: SimRDataset,
        config_echo: Optional[Dict[str, Any]] = None,
        chunk_size: int = 64,
    ):
        self.model = model
        self.dataset = dataset
        self.config_echo = config_echo or {}
        self.chunk_size = chunk_size
        self._prompt_cache: Dict[str, Tuple[PromptSet, Tensor, Tensor]] = {}

    def encode_prompts(self, template_id: str) -> Tuple[PromptSet, Tensor, Tensor]:
        if template_id not in self._prompt_cache:
            prompts = build_prompt_set(template_id, self.dataset.concepts, self.dataset.vocab, self.dataset.max_len)
            with no_grad():
                y_local, y_global = self.model.encode_text(prompts.ids, prompts.pad_mask)
            self._prompt_cache[template_id] = (prompts, y_local, y_global)
        return self._prompt_cache[template_id]

    def zero_shot_scores(self, patches: np.ndarray, template_id: str, direction: str = "mean") -> ScoreResult:
        """(n_images x K) raw scores; mean direction is (S_t2i[d, i] + S_i2t[i, d]) / 2."""
        if direction not in DIRECTIONS:
            raise ConfigError(f"unknown score direction {direction!r}; expected one of {', '.join(DIRECTIONS)}")
        prompts, y_local, y_global = self.encode_prompts(template_id)
        y_valid = ~prompts.pad_mask
        has_attention = self.model.has_attention
        scores, maps = [], []
        local_count = 0
        with no_grad():
            for start in range(0, len(patches), self.chunk_size):
                x_local, x_global = self.model.encode_image(patches[start:start + self.chunk_size])
                features = FeatureBundle(x_local, x_global, y_local, y_global, y_valid)
                out = self.model.similarity(features)
                s_t2i, s_i2t = out.s_t2i.numpy().T, out.s_i2t.numpy()
                if direction == "t2i":
                    scores.append(s_t2i)
                elif direction == "i2t":
                    scores.append(s_i2t)
                else:
                    scores.append(0.5 * (s_t2i + s_i2t))
                if has_attention:
                    maps.append(np.swapaxes(out.attn_t2i, 0, 1))
        if has_attention:
            local_count = select_kv_local_count(self.model.config.kv_choice, self.dataset.num_patches)
        return ScoreResult(
            scores=np.concatenate(scores).astype(np.float64),
            attn_t2i=np.concatenate(maps) if has_attention else None,
            local_count=local_count,
        )

    def thresholds(self, template_id: str, direction: str) -> List[Tuple[float, bool]]:
        val = self.dataset.splits.get("val")
        if val is None or len(val) == 0:
            raise DataError("threshold selection needs a non-empty validation split")
        result = self.zero_shot_scores(val.patches, template_id, direction)
        return select_thresholds(result.scores, val.labels)

    def evaluate(self, template_id: str, direction: str = "mean", split_name: str = "test") -> EvalReport:
        split = self.dataset.split(split_name)
        chosen = self.thresholds(template_id, direction)
        result = self.zero_shot_scores(split.patches, template_id, direction)
        per_class = [
            self.class_metrics(k, split, result, threshold, fallback)
            for k, (threshold, fallback) in enumerate(chosen)
        ]
        aligned = bool(self.config_echo.get("prompt_align")) and template_id == "P1"
        report = EvalReport(
            template_id=template_id,
            direction=direction,
            aligned=aligned,
            per_class=per_class,
            mean=summarize(per_class),
            thresholds={c: t for c, (t, _) in zip(self.dataset.concepts, chosen)},
            config={**self.config_echo, "eval": {"template": template_id, "direction": direction, "split": split_name}},
        )
        logger.info(
            "%s/%s: mean AUC %s, pointing %s", template_id, direction, report.mean.auc, report.mean.pointing_hit_rate
        )
        return report

    def class_metrics(
        self, k: int, split: Split, result: ScoreResult, threshold: float, fallback: bool
    ) -> ClassMetrics:
        scores, labels = result.scores[:, k], split.labels[:, k]
        try:
            class_auc = auc(scores, labels)
        except UndefinedMetricError:
            class_auc = None
        mcc, f1, acc = thresholded_metrics(scores, labels, threshold)
        hit_rate, trials = self.pointing_rate(k, split, result)
        return ClassMetrics(
            concept=self.dataset.concepts[k],
            n_pos=int((labels > 0.5).sum()),
            auc=class_auc,
            mcc=mcc,
            f1=f1,
            acc=acc,
            threshold=threshold,
            threshold_fallback=fallback,
            pointing_hit_rate=hit_rate,
            pointing_trials=trials,
        )

    def pointing_rate(self, k: int, split: Split, result: ScoreResult) -> Tuple[Optional[float], int]:
        if result.attn_t2i is None or result.local_count == 0:
            return None, 0
        positives = np.flatnonzero(split.labels[:, k] > 0.5)
        hits = [
            pointing_game(result.attn_t2i[i, k], split.grounding_sets(i, k), result.local_count)
            for i in positives
        ]
        return (float(np.mean(hits)) if hits else None), len(hits)

    def attention_for(self, template_id: str, split_name: str, rows: Sequence[int]) -> ScoreResult:
        if not self.model.has_attention:
            raise UnavailableError("cross-attention is disabled; no attention maps to export")
        split = self.dataset.split(split_name)
        return self.zero_shot_scores(split.patches[np.asarray(rows, dtype=int)], template_id)


def select_kv_local_count(kv_choice: str, num_patches: int) -> int:
    return 0 if kv_choice == "global" else num_patches


def write_reports(reports: List[EvalReport], output_dir: Path) -> List[Path]:
    """One JSON + CSV per report and, for several templates, a combined comparison CSV."""
    output_dir = Path(output_dir)
    paths: List[Path] = []
    for report in reports:
        paths.extend(report.write(output_dir, f"eval_{report.template_id}_{report.direction}"))
    if len(reports) > 1:
        rows = [
            {
                "template": r.template_id,
                "direction": r.direction,
                "aligned": r.aligned,
                "auc": r.mean.auc,
                "mcc": r.mean.mcc,
                "f1": r.mean.f1,
                "acc": r.mean.acc,
                "pointing_hit_rate": r.mean.pointing_hit_rate,
            }
            for r in reports
        ]
        path = output_dir / "comparison.csv"
        pd.DataFrame(rows).to_csv(path, index=False, float_format="%.6f")
        paths.append(path)
    return paths
