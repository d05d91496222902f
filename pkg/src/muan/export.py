"""Attention-map export: per-block, per-head CSV matrices plus a JSON sidecar.

Output layout under ``out_dir``::

    attention.json           row/column labels, quadrant extents (m, n), label
    block00/head0.csv        s x s weight matrix, one softmax row per line
    block00/head1.csv        ...

The sidecar carries everything needed to redraw the four quadrants
(text->text, text->visual, visual->text, visual->visual): the first ``m``
rows/columns are text positions, the remaining ``n`` are visual rows.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import ToySample, toy_vocabulary
from .errors import ConfigurationError
from .model import MuanModel, batch_grounding, batch_vqa, predict_vqa

_CSV_FMT = "%.17g"  # round-trips float64 exactly


def _token_labels(tokens: np.ndarray) -> list[str]:
    vocab = toy_vocabulary()
    out = []
    for tid in tokens.tolist():
        out.append(vocab.decode([tid])[0] if tid < len(vocab) else f"#{tid}")
    return out


def _visual_labels(sample: ToySample, n_visual: int) -> list[str]:
    scene = sample.scene
    labels = []
    if sample.task == "vqa":
        for obj in scene.objects:
            labels.append(f"{obj.size} {obj.color} {obj.shape}")
        labels += ["(pad)"] * (n_visual - len(scene.objects))
    else:
        for box, src in zip(scene.proposals, scene.proposal_sources):
            obj = scene.objects[src]
            labels.append(f"proposal[{src}] {obj.size} {obj.color} {obj.shape}")
    return labels


def export_attention(model: MuanModel, sample: ToySample, out_dir) -> dict:
    """Run one sample through the stack and write every attention matrix."""
    if sample.task != model.config.core.task:
        raise ConfigurationError(
            f"sample task {sample.task!r} != model task {model.config.core.task!r}"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if sample.task == "vqa":
        batch = batch_vqa([sample], model.config)
        logits, states = model.forward_vqa(batch, train=False)
        extra = {"predicted_answer": int(predict_vqa(logits)[0])}
    else:
        batch = batch_grounding([sample], model.config)
        pred, states = model.forward_grounding(batch, train=False)
        extra = {"top_proposal": int(np.argmax(pred.scores.data, axis=-1)[0])}

    m = batch.tokens.shape[-1]
    n = model.config.n_visual
    heads = model.config.core.h
    files = []
    for b, state in enumerate(states):
        block_dir = out_dir / f"block{b:02d}"
        block_dir.mkdir(exist_ok=True)
        weights = state.weights[0]  # (h, s, s)
        for h in range(heads):
            path = block_dir / f"head{h}.csv"
            np.savetxt(path, weights[h], fmt=_CSV_FMT, delimiter=",")
            files.append(str(path.relative_to(out_dir)))

    sidecar = {
        "task": sample.task,
        "m": m,
        "n": n,
        "blocks": len(states),
        "heads": heads,
        "tokens": _token_labels(batch.tokens[0]),
        "visual": _visual_labels(sample, n),
        "label": sample.label,
        "files": files,
        **extra,
    }
    (out_dir / "attention.json").write_text(
        json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return sidecar
