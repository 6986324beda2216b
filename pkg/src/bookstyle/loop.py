"""Resumable epoch/step loop shared by the three training stages."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import torch

from .config import StageConfig

logger = logging.getLogger(__name__)

RESUME_FILE = "resume.pt"
LOSS_LOG = "losses.jsonl"
EPOCH_LOG = "epochs.jsonl"


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def inverse_sqrt_schedule(warmup_steps: int) -> Callable[[int], float]:
    """Linear warmup to 1 then decay as ``sqrt(warmup / step)``."""

    def factor(step: int) -> float:
        step = step + 1
        if warmup_steps <= 0:
            return 1.0
        return min(step / warmup_steps, math.sqrt(warmup_steps / step))

    return factor


def make_optimizer(params, cfg: StageConfig) -> tuple:
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2), eps=1e-9)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, inverse_sqrt_schedule(cfg.warmup_steps))
    return opt, sched


@dataclass
class Phase:
    name: str
    epochs: int
    batches: Callable[[int], list]  # epoch -> deterministic list of batches
    step: Callable[[Any], dict]  # batch -> {"total": loss tensor, ...}
    on_start: Optional[Callable[[], None]] = None
    on_epoch_end: Optional[Callable[[int], dict]] = None  # epoch -> extra summary values
    after_step: Optional[Callable[[int], None]] = None  # global step -> None, after the optimizer update


@dataclass
class LoopResult:
    steps: int
    interrupted: bool
    epochs: list = field(default_factory=list)
    best_val: Optional[float] = None


def read_jsonl(path: Path) -> list:
    if not path.exists():
        return []
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _truncate_log(path: Path, max_step: int, key: str = "step") -> None:
    rows = [r for r in read_jsonl(path) if r[key] <= max_step]
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


class StageLoop:
    """Runs phases of epochs over a trainable module with checkpoint/resume.

    ``save`` is called with ``"last"`` after every epoch and ``"best"`` when the
    epoch summary reports a new lowest ``val_loss``.
    """

    def __init__(self, run_dir: Path, module: torch.nn.Module, cfg: StageConfig, save: Callable[[str], None], params=None):
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.module = module
        self.cfg = cfg
        self.save = save
        params = [p for p in (params if params is not None else module.parameters()) if p.requires_grad]
        self.params = params
        self.optimizer, self.scheduler = make_optimizer(params, cfg)
        self.state = {"step": 0, "phase": 0, "epoch": 0, "batch": 0, "started": [], "best_val": None}

    @property
    def loss_log(self) -> Path:
        return self.run_dir / LOSS_LOG

    @property
    def epoch_log(self) -> Path:
        return self.run_dir / EPOCH_LOG

    def _save_resume(self) -> None:
        torch.save(
            {
                "module": self.module.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "scheduler": self.scheduler.state_dict(),
                "state": dict(self.state),
                "torch_rng": torch.get_rng_state(),
                "np_rng": np.random.get_state(),
                "py_rng": random.getstate(),
            },
            self.run_dir / RESUME_FILE,
        )

    def start(self, resume: bool = True) -> bool:
        """Resume from ``resume.pt`` when allowed and present, else start clean."""
        path = self.run_dir / RESUME_FILE
        if not (resume and path.exists()):
            for stale in (self.loss_log, self.epoch_log, path):
                stale.unlink(missing_ok=True)
            return False
        blob = torch.load(path, weights_only=False)
        self.module.load_state_dict(blob["module"])
        self.optimizer.load_state_dict(blob["optimizer"])
        self.scheduler.load_state_dict(blob["scheduler"])
        self.state = blob["state"]
        torch.set_rng_state(blob["torch_rng"])
        np.random.set_state(blob["np_rng"])
        random.setstate(blob["py_rng"])
        _truncate_log(self.loss_log, self.state["step"])
        done_epochs = [r for r in read_jsonl(self.epoch_log) if (r["phase_index"], r["epoch"]) < (self.state["phase"], self.state["epoch"])]
        with open(self.epoch_log, "w", encoding="utf-8") as fh:
            for r in done_epochs:
                fh.write(json.dumps(r) + "\n")
        logger.info("resumed %s at step %d", self.run_dir, self.state["step"])
        return True

    def _log_step(self, row: dict) -> None:
        with open(self.loss_log, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(row) + "\n")

    def run(self, phases: list) -> LoopResult:
        st = self.state
        max_steps = self.cfg.max_steps
        for p_idx in range(st["phase"], len(phases)):
            phase = phases[p_idx]
            if p_idx not in st["started"]:
                if phase.on_start is not None:
                    phase.on_start()
                st["started"].append(p_idx)
            for epoch in range(st["epoch"], phase.epochs):
                batches = phase.batches(epoch)
                self.module.train()
                for b_idx in range(st["batch"], len(batches)):
                    losses = phase.step(batches[b_idx])
                    total = losses["total"]
                    if not torch.isfinite(total):
                        raise FloatingPointError(f"non-finite loss at step {st['step'] + 1}: {losses}")
                    self.optimizer.zero_grad(set_to_none=True)
                    total.backward()
                    if self.cfg.grad_clip > 0:
                        torch.nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip)
                    self.optimizer.step()
                    self.scheduler.step()
                    st["step"] += 1
                    st["batch"] = b_idx + 1
                    row = {"step": st["step"], "phase": phase.name, "epoch": epoch}
                    row.update({k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in losses.items()})
                    self._log_step(row)
                    if phase.after_step is not None:
                        phase.after_step(st["step"])
                    every = self.cfg.checkpoint_every
                    if every > 0 and st["step"] % every == 0:
                        self._save_resume()
                    if max_steps and st["step"] >= max_steps and not (
                        b_idx == len(batches) - 1 and epoch == phase.epochs - 1 and p_idx == len(phases) - 1
                    ):
                        self._save_resume()
                        return LoopResult(st["step"], True, read_jsonl(self.epoch_log), st["best_val"])
                summary = self._summarize(phase.name, p_idx, epoch)
                if phase.on_epoch_end is not None:
                    self.module.eval()
                    summary.update(phase.on_epoch_end(epoch))
                with open(self.epoch_log, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(summary) + "\n")
                self.save("last")
                val = summary.get("val_loss")
                if val is not None and (st["best_val"] is None or val < st["best_val"]):
                    st["best_val"] = val
                    self.save("best")
                st["epoch"], st["batch"] = epoch + 1, 0
                if self.cfg.checkpoint_every == 0:
                    self._save_resume()
            st["phase"], st["epoch"], st["batch"] = p_idx + 1, 0, 0
        self._save_resume()
        self.module.eval()
        return LoopResult(st["step"], False, read_jsonl(self.epoch_log), st["best_val"])

    def _summarize(self, name: str, p_idx: int, epoch: int) -> dict:
        rows = [r for r in read_jsonl(self.loss_log) if r["phase"] == name and r["epoch"] == epoch]
        keys = [k for k in rows[0] if k not in ("step", "phase", "epoch")] if rows else []
        summary = {"phase": name, "phase_index": p_idx, "epoch": epoch, "last_step": rows[-1]["step"] if rows else 0}
        summary.update({k: float(np.mean([r[k] for r in rows])) for k in keys})
        return summary


def plot_losses(run_dir: Path, out_name: str = "loss_curve.png") -> Optional[Path]:
    rows = read_jsonl(Path(run_dir) / LOSS_LOG)
    if not rows:
        return None
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    keys = [k for k in rows[0] if k not in ("step", "phase", "epoch")]
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [r["step"] for r in rows]
    for k in keys:
        ax.plot(steps, [r.get(k, np.nan) for r in rows], label=k, linewidth=1)
    ax.set_xlabel("step")
    ax.set_yscale("symlog")
    ax.legend(fontsize=7)
    fig.tight_layout()
    out = Path(run_dir) / out_name
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out
