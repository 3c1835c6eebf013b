"""Contrastive training of the SimR model on a generated dataset."""
import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from app.config import RunConfig
from app.data.checkpoint import save_checkpoint, sidecar_path
from app.data.dataset import SimRDataset, Split, augment, iterate_batches, sample_sentences, sentence_pools
from app.exceptions import NumericalError
from app.model.simr import SimRModel, build_model, model_metadata
from app.optim import build_optimizer
from app.services.rewrite_service import RewriteService
from app.tensor import Graph, backward, no_grad

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ["iter", "epoch", "l_t2i", "l_i2t", "total"]


@dataclass
class TrainingResult:
    model: SimRModel
    last_checkpoint: Path
    best_checkpoint: Path
    loss_log: Path
    history: pd.DataFrame
    val_losses: List[float] = field(default_factory=list)
    best_epoch: int = 0

    @property
    def initial_loss(self) -> float:
        return float(self.history["total"].iloc[0])

    @property
    def final_loss(self) -> float:
        return float(self.history["total"].iloc[-1])


@contextmanager
def run_log(path: Path):
    """Mirror package logs into a timestamped sidecar file for the duration of a run."""
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("app")
    previous = root.level
    root.addHandler(handler)
    if root.getEffectiveLevel() > logging.INFO:
        root.setLevel(logging.INFO)
    try:
        yield
    finally:
        root.removeHandler(handler)
        root.setLevel(previous)
        handler.close()


class TrainingService:
    """Epochs of shuffled mini-batches, one sampled sentence per image per iteration."""

    def __init__(
        self,
        config: RunConfig,
        dataset: SimRDataset,
        rewriter: Optional[RewriteService] = None,
        progress: bool = True,
    ):
        self.config = config
        self.dataset = dataset
        self.rewriter = rewriter
        self.progress = progress
        self.output_dir = Path(config.output_dir)
        self.metadata = model_metadata(dataset)
        self.stats = {"iterations": 0, "skipped_batches": 0}

    def checkpoint_config(self, **extra) -> Dict:
        return {"run": self.config.echo(), "dataset": self.metadata, **extra}

    def sentence_pools(self, split: Split) -> List[List[str]]:
        rewrite = self.rewriter.rewrite if (self.rewriter and self.config.prompt_align) else None
        return sentence_pools(split.reports, self.dataset.concepts, self.config.prompt_align, rewrite)

    def run(self) -> TrainingResult:
        self.output_dir.mkdir(parents=True, exist_ok=True)
        with run_log(self.output_dir / "run.log"):
            return self._train()

    def _train(self) -> TrainingResult:
        cfg, optim_cfg = self.config, self.config.optim
        train = self.dataset.split("train")
        val = self.dataset.splits.get("val")
        logger.info("training on %d samples: %s", len(train), cfg.echo())

        model = build_model(cfg.model, self.metadata, seed=cfg.seed)
        kwargs = {"betas": (optim_cfg.beta1, optim_cfg.beta2), "eps": optim_cfg.eps} if optim_cfg.kind == "adam" else {}
        optimizer = build_optimizer(optim_cfg.kind, model.parameters(), optim_cfg.lr, **kwargs)
        rng = np.random.default_rng(cfg.seed)
        pools = self.sentence_pools(train)
        val_pools = self.sentence_pools(val) if val is not None and len(val) >= 2 else None

        rows: List[Dict] = []
        val_losses: List[float] = []
        best_val, best_epoch = np.inf, 0
        last_good = model.state_dict()
        best_path = self.output_dir / "best.ckpt"
        last_path = self.output_dir / "last.ckpt"
        log_path = self.output_dir / "loss_log.csv"

        for epoch in range(optim_cfg.epochs):
            batches = list(iterate_batches(len(train), optim_cfg.batch_size, rng))
            bar = tqdm(batches, desc=f"Epoch {epoch + 1}/{optim_cfg.epochs}", disable=not self.progress, leave=False)
            for batch in bar:
                patches = train.patches[batch]
                if cfg.augment_flip:
                    patches = augment(patches, self.dataset.grid_dims, rng)
                sentences = sample_sentences(pools, batch, rng)
                ids, pad_mask = self.dataset.vocab.encode_batch(sentences, self.dataset.max_len)

                with Graph() as graph:
                    losses = model.loss(patches, ids, pad_mask)
                values = losses.as_floats()
                if not np.isfinite(values["total"]):
                    self._abort(rows, log_path, last_good, epoch, values)
                last_good = model.state_dict()
                backward(graph, losses.total)
                optimizer.step()

                self.stats["iterations"] += 1
                rows.append({"iter": self.stats["iterations"], "epoch": epoch + 1, **values})
                bar.set_postfix(loss=f"{values['total']:.4f}")

            val_loss = self.validation_loss(model, val, val_pools) if val_pools else rows[-1]["total"]
            val_losses.append(val_loss)
            logger.info("epoch %d: train loss %.4f, val loss %.4f", epoch + 1, rows[-1]["total"], val_loss)
            if val_loss < best_val:
                best_val, best_epoch = val_loss, epoch + 1
                save_checkpoint(model.state_dict(), best_path, self.checkpoint_config(epoch=epoch + 1))

        save_checkpoint(model.state_dict(), last_path, self.checkpoint_config(epoch=optim_cfg.epochs))
        history = self._write_log(rows, log_path)
        logger.info("training done: %d iterations, best val loss %.4f at epoch %d", len(rows), best_val, best_epoch)
        return TrainingResult(model, last_path, best_path, log_path, history, val_losses, best_epoch)

    def validation_loss(self, model: SimRModel, split: Split, pools: List[List[str]]) -> float:
        """Mean total loss over fixed validation batches with a fixed sentence draw."""
        rng = np.random.default_rng(self.config.seed + 1)
        size = self.config.optim.batch_size
        totals, weights = [], []
        with no_grad():
            for start in range(0, len(split), size):
                batch = np.arange(start, min(start + size, len(split)))
                if len(batch) < 2:
                    continue
                ids, pad_mask = self.dataset.vocab.encode_batch(
                    sample_sentences(pools, batch, rng), self.dataset.max_len
                )
                totals.append(model.loss(split.patches[batch], ids, pad_mask).total.item())
                weights.append(len(batch))
        return float(np.average(totals, weights=weights))

    def _write_log(self, rows: List[Dict], path: Path) -> pd.DataFrame:
        history = pd.DataFrame(rows, columns=LOSS_COLUMNS)
        history.to_csv(path, index=False, float_format="%.6f")
        sidecar_path(path).write_text(json.dumps(self.checkpoint_config(), indent=2, sort_keys=True) + "\n")
        return history

    def _abort(self, rows, log_path, last_good, epoch, values) -> None:
        self._write_log(rows, log_path)
        path = save_checkpoint(
            last_good, self.output_dir / "last_good.ckpt", self.checkpoint_config(epoch=epoch + 1)
        )
        raise NumericalError(
            f"non-finite loss at iteration {self.stats['iterations'] + 1} (epoch {epoch + 1}): "
            f"l_t2i={values['l_t2i']}, l_i2t={values['l_i2t']}; last good parameters kept in {path}"
        )
