"""Training loop, evaluation, and run-directory bookkeeping.

A run is fully determined by (config, seed): model init, epoch shuffles and
dropout all draw from named children of one counter-based stream, metrics
lines carry no timestamps, and checkpoints store nothing environmental, so
re-running a config byte-reproduces both artifacts.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .attention import QuadrantMask
from .checkpoint import save_checkpoint
from .data import ToySample, read_dataset
from .errors import (
    ConfigurationError,
    DatasetError,
    RunLockError,
    TrainingDivergenceError,
)
from .heads import (
    GroundTruthScores,
    bce_loss,
    grounding_accuracy,
    total_grounding_loss,
    vqa_accuracy,
)
from .model import (
    ModelConfig,
    MuanModel,
    batch_grounding,
    batch_vqa,
    predict_grounding,
    predict_vqa,
)
from .optim import AdamState, adam_step
from .schedule import TrainHyper, lr_at
from .tensor import RngStream, backward

ABLATIONS = ("no-gate", "no-self", "no-co")


@dataclass
class RunConfig:
    model: ModelConfig
    train_path: Path
    val_path: Path
    hyper: TrainHyper

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | None = None) -> "RunConfig":
        extra = set(raw) - {"model", "data", "train"}
        if extra:
            raise ConfigurationError(f"unknown config sections: {sorted(extra)}")
        for section in ("model", "data"):
            if section not in raw:
                raise ConfigurationError(f"config is missing the {section!r} section")
        data = dict(raw["data"])
        bad = set(data) - {"train_path", "val_path"}
        if bad:
            raise ConfigurationError(f"unknown data fields: {sorted(bad)}")
        if "train_path" not in data or "val_path" not in data:
            raise ConfigurationError("data section needs train_path and val_path")
        base = base_dir or Path(".")
        return cls(
            model=ModelConfig.from_dict(raw["model"]),
            train_path=base / data["train_path"],
            val_path=base / data["val_path"],
            hyper=TrainHyper.from_dict(raw.get("train", {})),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"no config file at {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be an object")
        return cls.from_dict(raw, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(),
                "data": {"train_path": str(self.train_path), "val_path": str(self.val_path)},
                "train": self.hyper.to_dict()}


def ablation_quadrant(config: ModelConfig, ablate: str | None) -> QuadrantMask | None:
    if ablate is None or ablate == "no-gate":
        return None
    if ablate == "no-self":
        return QuadrantMask(m=config.m_max, n=config.n_visual, disable_self=True)
    if ablate == "no-co":
        return QuadrantMask(m=config.m_max, n=config.n_visual, disable_co=True)
    raise ConfigurationError(f"unknown ablation {ablate!r}, expected one of {ABLATIONS}")


def strip_gates(model: MuanModel) -> MuanModel:
    """Drop the gate parameters so attention falls back to the ungated form."""
    for block in model.blocks:
        block.attn.gate = None
    return model


# -- evaluation ------------------------------------------------------------------


def _batches(n: int, batch_size: int):
    for start in range(0, n, batch_size):
        yield range(start, min(start + batch_size, n))


def evaluate(model: MuanModel, samples: Sequence[ToySample], batch_size: int = 64,
             quad: QuadrantMask | None = None, refined: bool = True,
             lam: float = 0.0) -> dict:
    """Metrics over a dataset split with dropout off.

    For grounding, ``refined`` picks the regression-head box over the raw
    top proposal, and ``lam`` only weights the reported combined loss.
    """
    if not samples:
        raise DatasetError("evaluate: empty dataset")
    task = model.config.core.task
    if any(s.task != task for s in samples):
        raise ConfigurationError(
            f"evaluate: model trained for {task!r} but dataset contains other tasks"
        )
    if task == "vqa":
        return _evaluate_vqa(model, samples, batch_size, quad)
    return _evaluate_grounding(model, samples, batch_size, quad, refined, lam)


def _evaluate_vqa(model, samples, batch_size, quad) -> dict:
    total, loss_sum = 0.0, 0.0
    by_type: dict[str, list[float]] = {}
    n = len(samples)
    for idx in _batches(n, batch_size):
        batch = batch_vqa([samples[i] for i in idx], model.config)
        logits, _ = model.forward_vqa(batch, quad=quad, train=False)
        loss_sum += float(bce_loss(logits, batch.one_hot).data) * len(batch)
        preds = predict_vqa(logits)
        for j in range(len(batch)):
            credit = vqa_accuracy(int(preds[j]), batch.counts[j])
            total += credit
            by_type.setdefault(batch.question_types[j], []).append(credit)
    return {
        "task": "vqa",
        "n": n,
        "accuracy": total / n,
        "loss": loss_sum / n,
        "by_question_type": {
            k: {"accuracy": sum(v) / len(v), "n": len(v)} for k, v in sorted(by_type.items())
        },
    }


def _evaluate_grounding(model, samples, batch_size, quad, refined, lam) -> dict:
    hits, rank_sum, reg_sum = 0.0, 0.0, 0.0
    n = len(samples)
    for idx in _batches(n, batch_size):
        batch = batch_grounding([samples[i] for i in idx], model.config)
        pred, _ = model.forward_grounding(batch, quad=quad, train=False)
        gt = GroundTruthScores(s_star=batch.s_star, t_star=batch.t_star, eta=model.config.eta)
        losses = total_grounding_loss(pred, gt, lam=max(lam, 0.0))
        rank_sum += float(losses.rank.data) * len(batch)
        reg_sum += float(losses.reg.data) * len(batch)
        boxes = predict_grounding(pred, batch, refined=refined)
        hits += grounding_accuracy(boxes, batch.gt_boxes) * len(batch)
    return {
        "task": "grounding",
        "n": n,
        "accuracy": hits / n,
        "rank_loss": rank_sum / n,
        "reg_loss": reg_sum / n,
        "loss": (rank_sum + lam * reg_sum) / n,
        "refined": refined,
    }


# -- the training loop -----------------------------------------------------------


def _acquire_lock(run_dir: Path) -> Path:
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockError(
            f"{run_dir} is locked by another training process (remove {lock} if stale)"
        ) from None
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    return lock


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def train_run(config: RunConfig, run_dir, ablate: str | None = None,
              seed: int | None = None) -> dict:
    """Train per config, keep the best-validation checkpoint, return a summary.

    Writes ``best.ckpt``, ``metrics.jsonl`` (append-only, one JSON object per
    epoch) and ``manifest.json`` into ``run_dir``.
    """
    if ablate is not None and ablate not in ABLATIONS:
        raise ConfigurationError(f"unknown ablation {ablate!r}, expected one of {ABLATIONS}")
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = _acquire_lock(run_dir)
    try:
        return _train_locked(config, run_dir, ablate, seed)
    finally:
        lock.unlink(missing_ok=True)


def _train_locked(config: RunConfig, run_dir: Path, ablate: str | None,
                  seed: int | None) -> dict:
    hyper = config.hyper
    used_seed = hyper.seed if seed is None else seed
    model_config = config.model
    if ablate == "no-gate":
        model_config = ModelConfig.from_dict(model_config.to_dict())
        model_config.core.gated = False
    quad = ablation_quadrant(model_config, ablate)
    task = model_config.core.task

    train_samples = read_dataset(config.train_path)
    val_samples = read_dataset(config.val_path)
    for name, split in (("train", train_samples), ("val", val_samples)):
        if split[0].task != task:
            raise ConfigurationError(
                f"{name} dataset is {split[0].task!r} but the model is configured for {task!r}"
            )

    root = RngStream(used_seed)
    model = MuanModel(model_config, root.child("init"))
    pairs = list(model.parameters())
    names = [name for name, _ in pairs]
    tensors = [t for _, t in pairs]
    state = AdamState.for_params(tensors, names=names)

    metrics_path = run_dir / "metrics.jsonl"
    metrics_path.write_text("", encoding="utf-8")
    ckpt_path = run_dir / "best.ckpt"
    best_acc = -1.0
    best_epoch = -1
    best_val: dict = {}
    refined = task != "grounding" or hyper.lam > 0.0

    n = len(train_samples)
    for epoch in range(hyper.epochs):
        lr = lr_at(epoch, 0, hyper, d=model_config.core.d, L=model_config.core.L)
        order = root.child(f"shuffle-epoch{epoch}").permutation(n)
        loss_sum = 0.0
        seen = 0
        for b, idx in enumerate(_batches(n, hyper.batch_size)):
            picked = [train_samples[order[i]] for i in idx]
            batch_name = f"epoch{epoch}/batch{b}"
            batch_rng = root.child(batch_name)
            if task == "vqa":
                batch = batch_vqa(picked, model_config)
                logits, _ = model.forward_vqa(batch, quad=quad, rng=batch_rng, train=True)
                loss = bce_loss(logits, batch.one_hot)
            else:
                batch = batch_grounding(picked, model_config)
                usable = np.any(batch.s_star > 0.0, axis=-1)
                if not np.all(usable):
                    keep = [picked[i] for i in np.flatnonzero(usable)]
                    if not keep:
                        continue
                    batch = batch_grounding(keep, model_config)
                pred, _ = model.forward_grounding(batch, quad=quad, rng=batch_rng, train=True)
                gt = GroundTruthScores(s_star=batch.s_star, t_star=batch.t_star,
                                       eta=model_config.eta)
                loss = total_grounding_loss(pred, gt, lam=hyper.lam).total
            if not np.isfinite(loss.data):
                raise TrainingDivergenceError(
                    f"non-finite loss in batch {batch_name} (stream [{used_seed}, {batch_name!r}])"
                )
            model.zero_grads()
            backward(loss)
            try:
                adam_step(tensors, [t.grad for t in tensors], state, lr)
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(f"{exc} in batch {batch_name}") from None
            model.encoder.freeze_pad_row()
            loss_sum += float(loss.data) * len(batch)
            seen += len(batch)

        val = evaluate(model, val_samples, batch_size=hyper.batch_size, quad=quad,
                       refined=refined, lam=hyper.lam)
        line = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / max(seen, 1),
                "val_accuracy": val["accuracy"], "val_loss": val["loss"]}
        with metrics_path.open("a", encoding="utf-8") as fh:
            fh.write(_json_line(line) + "\n")
        if val["accuracy"] > best_acc:
            best_acc = val["accuracy"]
            best_epoch = epoch
            best_val = val
            save_checkpoint(model, ckpt_path)

    summary = {
        "ablate": ablate,
        "best_epoch": best_epoch,
        "best_val": best_val,
        "checkpoint": str(ckpt_path),
        "epochs": hyper.epochs,
        "seed": used_seed,
        "task": task,
    }
    manifest = {
        "code_version": __version__,
        "config": config.to_dict(),
        "datasets": {
            "train": {"path": str(config.train_path), "sha256": _sha256(config.train_path)},
            "val": {"path": str(config.val_path), "sha256": _sha256(config.val_path)},
        },
        "final": summary,
    }
    _write_atomic(run_dir / "manifest.json",
                  json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return summary
