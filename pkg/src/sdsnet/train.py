"""Training and evaluation loops."""
from __future__ import annotations

import csv
import dataclasses
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import plotting
from .checkpoint import save_checkpoint
from .config import ModelConfig
from .data import RecordDataset, SynthSpec, load_split, split_ids, synthesize
from .errors import ConfigError, NonFiniteError
from .metrics import MetricReport, evaluate
from .model import SDSNet
from .supervision import total_loss


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    epochs: int = 1000
    batch_size: int = 4
    lr: float = 1e-3
    min_lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    loss: str = "bce"
    loss_weights: list | None = None
    data_root: str | None = None
    split_ratio: float = 0.8
    synth: dict | None = None
    synth_count: int = 8
    overfit: bool = False
    eval_every: int = 1
    threshold: float = 0.5
    match_radius: float = 3.0
    flip: bool = False
    output_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        if self.loss not in ("bce", "mse"):
            raise ConfigError("loss", f"must be 'bce' or 'mse', got {self.loss!r}")
        if not self.lr > 0 or self.min_lr < 0:
            raise ConfigError("lr", "learning rates must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every", "must be >= 1")
        if self.data_root is not None and not Path(self.data_root).is_dir():
            raise ConfigError("data_root", f"{self.data_root} is not a directory")

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown run config key")
        return cls(**d)

    @classmethod
    def from_yaml(cls, path):
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def seed_everything(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def synth_spec_for(run: RunConfig) -> SynthSpec:
    kw = dict(run.synth or {})
    kw.setdefault("image_size", tuple(run.model.input_size))
    return SynthSpec(**kw)


def load_records(run: RunConfig):
    """(train, val) records. Overfit mode validates on the training records."""
    if run.data_root is not None:
        train, test = load_split(run.data_root, run.split_ratio, run.seed)
    else:
        records = synthesize(synth_spec_for(run), run.synth_count)
        if run.overfit:
            train, test = records, []
        else:
            tr_ids, _ = split_ids([r.id for r in records], run.split_ratio, run.seed)
            tr_ids = set(tr_ids)
            train = [r for r in records if r.id in tr_ids]
            test = [r for r in records if r.id not in tr_ids]
    val = train if run.overfit else test
    return train, val


@torch.no_grad()
def predict_records(model: SDSNet, records, batch_size=8):
    """Fused probability maps (float32 [H, W] arrays), model in eval mode."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    try:
        for i in range(0, len(records), batch_size):
            batch = torch.from_numpy(np.stack([r.image for r in records[i:i + batch_size]])).to(dtype)
            probs = model(batch).fused
            out.extend(p[0].float().numpy() for p in probs)
    finally:
        model.train(was_training)
    return out


def evaluate_model(model, records, threshold=0.5, match_radius=3.0, roc_thresholds=None) -> MetricReport:
    probs = predict_records(model, records)
    return evaluate(probs, [r.mask for r in records], threshold, match_radius, roc_thresholds)


class TrainLog:
    """Append-only CSV log; each run starts with a commented config header."""

    def __init__(self, path, run: RunConfig, columns):
        self.path = Path(path)
        self.columns = columns
        with open(self.path, "a", newline="") as fh:
            fh.write(f"# run config: {json.dumps(run.to_dict(), sort_keys=True)}\n")
            csv.writer(fh).writerow(columns)

    def append(self, row):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow(["" if row.get(c) is None else repr(row[c]) for c in self.columns])


def train(run: RunConfig, records=None, progress=None):
    """Train per ``run``; writes ``train_log.csv``, ``best.ckpt``, ``last.ckpt``
    and ``training.png`` under ``run.output_dir``. Returns a summary dict."""
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed_everything(run.seed)
    train_recs, val_recs = records if records is not None else load_records(run)
    if not train_recs:
        raise ConfigError("data", "no training records")

    model = SDSNet(run.model)
    model.train()
    gen = torch.Generator().manual_seed(run.seed)
    loader = torch.utils.data.DataLoader(
        RecordDataset(train_recs, flip=run.flip, seed=run.seed),
        batch_size=run.batch_size, shuffle=True, generator=gen, num_workers=0)
    opt = torch.optim.Adam(model.parameters(), lr=run.lr, betas=(run.beta1, run.beta2))
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=run.epochs, eta_min=run.min_lr)

    n_maps = run.model.num_stages + 1 if run.model.deep_supervision else 1
    columns = ["epoch", "lr", "loss"] + [f"O{i + 1}" for i in range(n_maps)] + ["miou"]
    logger = TrainLog(out / "train_log.csv", run, columns)
    history, best, step = [], -1.0, 0
    for epoch in range(1, run.epochs + 1):
        if run.flip:
            loader.dataset.epoch = epoch
        lr = opt.param_groups[0]["lr"]
        sums = np.zeros(n_maps + 1)
        count = 0
        for b, (img, mask) in enumerate(loader):
            opt.zero_grad(set_to_none=True)
            preds = model(img)
            losses = total_loss(preds, mask, run.loss_weights, run.loss)
            for i, term in enumerate(losses.terms):
                if not torch.isfinite(term):
                    raise NonFiniteError(f"loss O{i + 1}",
                                         f"non-finite loss O{i + 1} at epoch {epoch}, batch {b}")
            losses.total.backward()
            opt.step()
            step += 1
            n = img.shape[0]
            sums += n * np.array([float(losses.total.detach())] + [float(t.detach()) for t in losses.terms])
            count += n
        sched.step()
        means = sums / count
        row = {"epoch": epoch, "lr": lr, "loss": float(means[0])}
        row.update({f"O{i + 1}": float(v) for i, v in enumerate(means[1:])})
        if val_recs and (epoch % run.eval_every == 0 or epoch == run.epochs):
            rep = evaluate_model(model, val_recs, run.threshold, run.match_radius)
            row["miou"] = rep.iou
            if rep.iou > best:
                best = rep.iou
                save_checkpoint(model, out / "best.ckpt", {"epoch": epoch, "miou": rep.iou})
        logger.append(row)
        history.append(row)
        if progress is not None:
            progress(row)
    save_checkpoint(model, out / "last.ckpt", {"epoch": run.epochs})
    if best < 0:
        save_checkpoint(model, out / "best.ckpt", {"epoch": run.epochs})
    plotting.plot_training(history, out / "training.png")
    return {"model": model, "history": history, "best_miou": best if best >= 0 else None,
            "steps": step, "output_dir": str(out)}


def write_report(report: MetricReport, out_dir, prefix="metrics", plot=True):
    """``<prefix>.json``, ``<prefix>.csv`` and, with ROC rows, ``roc.csv`` + ``roc.png``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d = report.to_dict()
    (out / f"{prefix}.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
    with open(out / f"{prefix}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k, v in d.items():
            if k != "roc":
                w.writerow([k, "" if v is None else v])
    paths = [out / f"{prefix}.json", out / f"{prefix}.csv"]
    if report.roc:
        with open(out / "roc.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fa", "pd"])
            w.writerows(report.roc)
        paths.append(out / "roc.csv")
        if plot:
            paths.append(plotting.plot_roc(report.roc, out / "roc.png"))
    return paths
