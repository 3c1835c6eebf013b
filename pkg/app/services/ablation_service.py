"""Variant grids: train and evaluate every requested cell, collect one comparison table."""
import itertools
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from app.config import RunConfig
from app.data.dataset import SimRDataset
from app.exceptions import SimRError
from app.model.alignment import COSINE_HEADS, LEARNED_HEADS
from app.services.evaluation_service import EvaluationService
from app.services.training_service import TrainingService

logger = logging.getLogger(__name__)

TABLE_COLUMNS = [
    "seed", "cross_attention", "prompt_align", "head_kind", "kv_choice", "template", "direction",
    "status", "auc", "mcc", "f1", "acc", "pointing_hit_rate", "error", "config",
]


@dataclass(frozen=True)
class Cell:
    head_kind: str
    kv_choice: str
    prompt_align: bool
    cross_attention: bool

    @property
    def name(self) -> str:
        if not self.cross_attention:
            return f"noca_pa{int(self.prompt_align)}"
        return f"{self.head_kind}_{self.kv_choice}_pa{int(self.prompt_align)}"


def build_cells(
    head_kinds: Sequence[str],
    kv_choices: Sequence[str],
    prompt_align: Sequence[bool],
    cross_attention: Sequence[bool] = (True,),
) -> List[Cell]:
    """Cartesian grid; with cross-attention off head and kv choice do not apply and collapse."""
    cells: List[Cell] = []
    for ca, pa, head, kv in itertools.product(cross_attention, prompt_align, head_kinds, kv_choices):
        cell = Cell(head, kv, pa, ca) if ca else Cell("none", "none", pa, False)
        if cell not in cells:
            cells.append(cell)
    return cells


class AblationService:
    def __init__(
        self,
        base: RunConfig,
        dataset: SimRDataset,
        templates: Sequence[str] = ("P1",),
        progress: bool = False,
    ):
        self.base = base
        self.dataset = dataset
        self.templates = list(templates)
        self.progress = progress
        self.output_dir = Path(base.output_dir)

    def cell_config(self, cell: Cell, seed: int) -> RunConfig:
        model = self.base.model.model_copy(update={"cross_attention": cell.cross_attention})
        if cell.cross_attention:
            model = model.model_copy(update={"head_kind": cell.head_kind, "kv_choice": cell.kv_choice})
        return self.base.model_copy(
            update={
                "seed": seed,
                "prompt_align": cell.prompt_align,
                "model": model,
                "output_dir": self.output_dir / f"seed{seed}" / cell.name,
            }
        )

    def run_cell(self, cell: Cell, seed: int) -> List[Dict]:
        config = self.cell_config(cell, seed)
        base_row = {
            "seed": seed,
            "cross_attention": cell.cross_attention,
            "prompt_align": cell.prompt_align,
            "head_kind": cell.head_kind,
            "kv_choice": cell.kv_choice,
            "direction": self.base.direction,
            "config": json.dumps(config.echo(), sort_keys=True),
        }
        try:
            result = TrainingService(config, self.dataset, progress=self.progress).run()
            evaluator = EvaluationService(result.model, self.dataset, config.echo())
            rows = []
            for template in self.templates:
                report = evaluator.evaluate(template, self.base.direction)
                rows.append({
                    **base_row,
                    "template": template,
                    "status": "ok",
                    "auc": report.mean.auc,
                    "mcc": report.mean.mcc,
                    "f1": report.mean.f1,
                    "acc": report.mean.acc,
                    "pointing_hit_rate": report.mean.pointing_hit_rate,
                    "error": None,
                })
            return rows
        except (SimRError, ValueError, ArithmeticError) as exc:
            logger.warning("cell %s (seed %d) failed: %s", cell.name, seed, exc)
            return [{**base_row, "template": t, "status": "failed", "error": str(exc)} for t in self.templates]

    def run_grid(self, cells: Sequence[Cell], seed: Optional[int] = None) -> pd.DataFrame:
        seed = self.base.seed if seed is None else seed
        rows: List[Dict] = []
        for index, cell in enumerate(cells, start=1):
            logger.info("ablation cell %d/%d: %s (seed %d)", index, len(cells), cell.name, seed)
            rows.extend(self.run_cell(cell, seed))
        return pd.DataFrame(rows, columns=TABLE_COLUMNS)

    def run(self, cells: Sequence[Cell], check_ordering: bool = True) -> pd.DataFrame:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        table = self.run_grid(cells)
        table.to_csv(self.output_dir / "ablation.csv", index=False, float_format="%.6f")
        if check_ordering and has_head_comparison(cells):
            verdict = {**self.ordering_check(cells, table), "config": self.base.echo()}
            (self.output_dir / "ordering.json").write_text(json.dumps(verdict, indent=2, sort_keys=True) + "\n")
        return table

    def ordering_check(self, cells: Sequence[Cell], table: pd.DataFrame, extra_seeds: int = 2) -> Dict:
        """Learned heads should reach the AUC of every cosine head; reseed twice when they do not."""
        seeds = [self.base.seed]
        outcomes = [learned_heads_lead(table, self.templates[0])]
        if not outcomes[0]:
            head_cells = [c for c in cells if c.cross_attention]
            for offset in range(1, extra_seeds + 1):
                seed = self.base.seed + offset
                rerun = self.run_grid(head_cells, seed)
                rerun.to_csv(self.output_dir / f"ablation_seed{seed}.csv", index=False, float_format="%.6f")
                seeds.append(seed)
                outcomes.append(learned_heads_lead(rerun, self.templates[0]))
        accepted = sum(outcomes) * 2 > len(outcomes)
        if not accepted:
            logger.warning("learned heads did not outrank cosine heads on a majority of seeds: %s", outcomes)
        return {"seeds": seeds, "holds": outcomes, "accepted": accepted}


def has_head_comparison(cells: Sequence[Cell]) -> bool:
    kinds = {c.head_kind for c in cells if c.cross_attention}
    return bool(kinds & set(LEARNED_HEADS)) and bool(kinds & set(COSINE_HEADS))


def learned_heads_lead(table: pd.DataFrame, template: str) -> bool:
    """True when, within each (kv, PA) group, every learned head AUC >= every cosine head AUC."""
    ok = table[(table["status"] == "ok") & table["cross_attention"].astype(bool) & (table["template"] == template)]
    for _, group in ok.groupby(["kv_choice", "prompt_align"]):
        learned = group[group["head_kind"].isin(LEARNED_HEADS)]["auc"].dropna()
        cosine = group[group["head_kind"].isin(COSINE_HEADS)]["auc"].dropna()
        if len(learned) and len(cosine) and learned.min() < cosine.max():
            return False
    return True
