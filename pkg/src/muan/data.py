"""Synthetic scenes, templated questions/queries, vocabulary, JSONL datasets.

Scenes are collections of colored shapes on a fixed canvas.  Questions and
grounding queries are templated from a closed vocabulary, and every label
is an exact function of the stored scene, so answers can always be
re-derived as an independent check (`derive_answer` / `derive_referent`).

Datasets are UTF-8 line-delimited JSON with sorted keys and no whitespace,
which makes write -> read -> write byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .encoders import COLORS, SHAPES, SIZES
from .errors import DatasetError, LabelError, VocabularyError
from .heads import Box, iou
from .tensor import RngStream

SCHEMA_VERSION = 1

ANSWERS: tuple[str, ...] = tuple(str(i) for i in range(11)) + ("yes", "no") + COLORS + SHAPES + SIZES

PAD_WORD = "<pad>"
ANS_WORD = "<ans>"

_TEMPLATE_WORDS = ("how", "many", "is", "there", "a", "what", "color", "shape",
                   "size", "the", "object", "left", "right", "above", "below", "of")

# word -> (attribute dimension, value)
_ATTR_WORDS = (
    {w: ("shape", w) for w in SHAPES}
    | {w: ("color", w) for w in COLORS}
    | {w: ("size", w) for w in SIZES}
)

_RELATIONS = ("left", "right", "above", "below")

_DIM_ORDER = ("size", "color", "shape")  # surface order inside a phrase


class Vocabulary:
    """Closed word list; id = position.  Ids 0 and 1 are pad and [ans]."""

    PAD = 0
    ANS = 1

    def __init__(self, words: Sequence[str]):
        words = list(words)
        if len(words) < 2 or words[0] != PAD_WORD or words[1] != ANS_WORD:
            raise VocabularyError(
                f"Vocabulary must start with {PAD_WORD!r}, {ANS_WORD!r}; got {words[:2]}"
            )
        if len(set(words)) != len(words):
            raise VocabularyError("Vocabulary contains duplicate words")
        self._words = words
        self._ids = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self._words)

    def __contains__(self, word: str) -> bool:
        return word in self._ids

    def encode(self, words: Iterable[str]) -> list[int]:
        try:
            return [self._ids[w] for w in words]
        except KeyError as exc:
            raise VocabularyError(f"word {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        try:
            return [self._words[i] for i in ids]
        except IndexError:
            raise VocabularyError(f"token id outside vocabulary of {len(self)}") from None

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self._words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        words = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(words)


def toy_vocabulary() -> Vocabulary:
    return Vocabulary([PAD_WORD, ANS_WORD, *_TEMPLATE_WORDS, *COLORS, *SHAPES, *SIZES])


# -- scene model -----------------------------------------------------------------


@dataclass
class SceneObject:
    shape: str
    color: str
    size: str
    box: Box

    def to_dict(self) -> dict:
        return {"shape": self.shape, "color": self.color, "size": self.size,
                "box": [self.box.x_tl, self.box.y_tl, self.box.x_br, self.box.y_br]}

    @classmethod
    def from_dict(cls, raw: dict) -> "SceneObject":
        return cls(shape=raw["shape"], color=raw["color"], size=raw["size"],
                   box=Box(*raw["box"]))


@dataclass
class SyntheticScene:
    width: float
    height: float
    objects: list[SceneObject]
    proposals: list[Box] = field(default_factory=list)
    proposal_sources: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.proposals) != len(self.proposal_sources):
            raise DatasetError("SyntheticScene: proposals and sources must pair up")

    def to_dict(self) -> dict:
        out = {"W": self.width, "H": self.height,
               "objects": [o.to_dict() for o in self.objects]}
        if self.proposals:
            out["proposals"] = [[b.x_tl, b.y_tl, b.x_br, b.y_br] for b in self.proposals]
            out["sources"] = list(self.proposal_sources)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticScene":
        return cls(
            width=raw["W"], height=raw["H"],
            objects=[SceneObject.from_dict(o) for o in raw["objects"]],
            proposals=[Box(*b) for b in raw.get("proposals", [])],
            proposal_sources=list(raw.get("sources", [])),
        )


@dataclass
class ToySample:
    task: str
    tokens: list[int]
    scene: SyntheticScene
    label: dict

    def to_dict(self) -> dict:
        return {"version": SCHEMA_VERSION, "task": self.task, "tokens": self.tokens,
                "scene": self.scene.to_dict(), "label": self.label}

    @classmethod
    def from_dict(cls, raw: dict) -> "ToySample":
        if raw.get("version") != SCHEMA_VERSION:
            raise DatasetError(f"unsupported dataset schema version {raw.get('version')!r}")
        if raw.get("task") not in ("vqa", "grounding"):
            raise DatasetError(f"unknown task {raw.get('task')!r}")
        return cls(task=raw["task"], tokens=list(raw["tokens"]),
                   scene=SyntheticScene.from_dict(raw["scene"]), label=dict(raw["label"]))


def sample_to_line(sample: ToySample) -> str:
    return json.dumps(sample.to_dict(), sort_keys=True, separators=(",", ":"))


def write_dataset(path, samples: Iterable[ToySample]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for sample in samples:
            f.write(sample_to_line(sample) + "\n")
            count += 1
    return count


def read_dataset(path) -> list[ToySample]:
    samples = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno + 1}: invalid JSON ({exc})") from None
            samples.append(ToySample.from_dict(raw))
    if not samples:
        raise DatasetError(f"{path}: dataset is empty")
    tasks = {s.task for s in samples}
    if len(tasks) > 1:
        raise DatasetError(f"{path}: mixed tasks in one dataset: {sorted(tasks)}")
    return samples


# -- generation config -------------------------------------------------------------


@dataclass
class GenConfig:
    task: str = "vqa"
    canvas: float = 100.0
    min_objects: int = 3
    max_objects: int = 10
    n_proposals: int = 100
    max_retries: int = 100

    @property
    def m_max(self) -> int:
        return 14 if self.task == "vqa" else 15


_SIZE_RANGES = {"small": (7.0, 13.0), "large": (16.0, 24.0)}


def _round2(v: float) -> float:
    return round(float(v), 2)


def _random_box(g: np.random.Generator, canvas: float, size: str) -> Box:
    lo, hi = _SIZE_RANGES[size]
    w = g.uniform(lo, hi)
    h = g.uniform(lo, hi)
    x = g.uniform(0.0, canvas - w)
    y = g.uniform(0.0, canvas - h)
    return Box(_round2(x), _round2(y), _round2(x + w), _round2(y + h))


def _place_objects(g: np.random.Generator, cfg: GenConfig,
                   attrs: Sequence[tuple[str, str, str]]) -> list[SceneObject] | None:
    """Boxes for the given attribute triples with pairwise IoU < 0.3."""
    boxes: list[Box] = []
    for shape, color, size in attrs:
        for _ in range(300):
            cand = _random_box(g, cfg.canvas, size)
            if all(iou(cand, b) < 0.3 for b in boxes):
                boxes.append(cand)
                break
        else:
            return None
    return [SceneObject(sh, c, sz, b) for (sh, c, sz), b in zip(attrs, boxes)]


def _random_attrs(g: np.random.Generator) -> tuple[str, str, str]:
    return (SHAPES[g.integers(len(SHAPES))], COLORS[g.integers(len(COLORS))],
            SIZES[g.integers(len(SIZES))])


def _matches(obj: SceneObject, filt: dict) -> bool:
    return all(getattr(obj, dim) == val for dim, val in filt.items())


def _attrs_match(attrs: tuple[str, str, str], filt: dict) -> bool:
    by_dim = {"shape": attrs[0], "color": attrs[1], "size": attrs[2]}
    return all(by_dim[dim] == val for dim, val in filt.items())


def _attrs_for_filter(g: np.random.Generator, filt: dict) -> tuple[str, str, str]:
    sh, c, sz = _random_attrs(g)
    return (filt.get("shape", sh), filt.get("color", c), filt.get("size", sz))


def _attrs_failing_filter(g: np.random.Generator, filt: dict) -> tuple[str, str, str]:
    for _ in range(100):
        cand = _random_attrs(g)
        if not _attrs_match(cand, filt):
            return cand
    raise DatasetError("could not draw attributes failing the filter")  # unreachable for non-empty filters


def _filter_words(filt: dict, noun_fallback: bool = True) -> list[str]:
    words = [filt[d] for d in _DIM_ORDER if d in filt]
    if "shape" not in filt and noun_fallback:
        words.append("object")
    return words


def _pick_filter_dims(g: np.random.Generator, allowed: Sequence[str], n_choices: Sequence[int]) -> list[str]:
    n = int(n_choices[g.integers(len(n_choices))])
    idx = g.permutation(len(allowed))[:n]
    return [allowed[i] for i in sorted(idx)]


# -- vqa generation -----------------------------------------------------------------


def _build_vqa(g: np.random.Generator, cfg: GenConfig, target: str) -> tuple[list[str], list[tuple[str, str, str]]]:
    """Question words plus the attribute triples of a scene answering `target`."""
    if target.isdigit():
        c = int(target)
        dims = _pick_filter_dims(g, _DIM_ORDER, (1, 2))
        base = _random_attrs(g)
        filt = {d: {"shape": base[0], "color": base[1], "size": base[2]}[d] for d in dims}
        total = int(g.integers(max(c, cfg.min_objects), cfg.max_objects + 1))
        attrs = [_attrs_for_filter(g, filt) for _ in range(c)]
        attrs += [_attrs_failing_filter(g, filt) for _ in range(total - c)]
        return ["how", "many", *_filter_words(filt)], attrs

    if target in ("yes", "no"):
        total = int(g.integers(cfg.min_objects, cfg.max_objects + 1))
        if target == "yes":
            dims = _pick_filter_dims(g, _DIM_ORDER, (1, 2, 3))
            base = _random_attrs(g)
            filt = {d: {"shape": base[0], "color": base[1], "size": base[2]}[d] for d in dims}
            attrs = [_attrs_for_filter(g, filt)]
            attrs += [_random_attrs(g) for _ in range(total - 1)]
        else:
            attrs = [_random_attrs(g) for _ in range(total)]
            filt = None
            for _ in range(200):
                dims = _pick_filter_dims(g, _DIM_ORDER, (1, 2, 3))
                base = _random_attrs(g)
                cand = {d: {"shape": base[0], "color": base[1], "size": base[2]}[d] for d in dims}
                if not any(_attrs_match(a, cand) for a in attrs):
                    filt = cand
                    break
            if filt is None:
                raise DatasetError("could not find an absent attribute combination")
        return ["is", "there", "a", *_filter_words(filt, noun_fallback=False)], attrs

    # attribute query: which dimension does the target answer belong to?
    if target in COLORS:
        kind, allowed = "color", ("size", "shape")
    elif target in SHAPES:
        kind, allowed = "shape", ("size", "color")
    else:
        kind, allowed = "size", ("color", "shape")
    dims = _pick_filter_dims(g, allowed, (1, 2))
    base = _random_attrs(g)
    filt = {d: {"shape": base[0], "color": base[1], "size": base[2]}[d] for d in dims}
    referent = dict(zip(("shape", "color", "size"), _attrs_for_filter(g, filt)))
    referent[kind] = target
    total = int(g.integers(cfg.min_objects, cfg.max_objects + 1))
    attrs = [(referent["shape"], referent["color"], referent["size"])]
    attrs += [_attrs_failing_filter(g, filt) for _ in range(total - 1)]
    return ["what", kind, "is", "the", *_filter_words(filt)], attrs


def gen_vqa_sample(rng: RngStream, cfg: GenConfig | None = None,
                   target: str | None = None) -> ToySample:
    """One scene + templated question whose answer is exactly derivable.

    ``target`` pins the answer class (used by the stratified dataset
    builder); when omitted a class is drawn uniformly.
    """
    cfg = cfg or GenConfig(task="vqa")
    g = rng.generator()
    if target is None:
        target = ANSWERS[g.integers(len(ANSWERS))]
    if target not in ANSWERS:
        raise LabelError(f"unknown answer class {target!r}")
    vocab = toy_vocabulary()
    for _ in range(cfg.max_retries):
        words, attrs = _build_vqa(g, cfg, target)
        perm = g.permutation(len(attrs))
        objects = _place_objects(g, cfg, [attrs[i] for i in perm])
        if objects is None:
            continue
        scene = SyntheticScene(width=cfg.canvas, height=cfg.canvas, objects=objects)
        derived = derive_answer(scene, words)
        if derived != target:  # e.g. a random distractor collided with the filter
            continue
        answer_id = ANSWERS.index(target)
        return ToySample(task="vqa", tokens=vocab.encode(words), scene=scene,
                         label={"answer": answer_id, "counts": {str(answer_id): 3}})
    raise DatasetError(f"gen_vqa_sample: no valid scene for target {target!r} "
                       f"after {cfg.max_retries} retries")


def _parse_filter(words: Sequence[str]) -> dict:
    filt = {}
    for w in words:
        if w in _ATTR_WORDS:
            dim, val = _ATTR_WORDS[w]
            if dim in filt:
                raise LabelError(f"duplicate {dim} constraint in {list(words)}")
            filt[dim] = val
    return filt


def derive_answer(scene: SyntheticScene, words: Sequence[str]) -> str:
    """Recompute the answer from scene state (the generator's own oracle)."""
    if not words:
        raise LabelError("empty question")
    if words[0] == "how":
        filt = _parse_filter(words[2:])
        return str(sum(1 for o in scene.objects if _matches(o, filt)))
    if words[0] == "is":
        filt = _parse_filter(words[3:])
        if not filt:
            raise LabelError(f"existence question without constraints: {list(words)}")
        return "yes" if any(_matches(o, filt) for o in scene.objects) else "no"
    if words[0] == "what":
        kind = words[1]
        if kind not in ("color", "shape", "size"):
            raise LabelError(f"unknown query attribute {kind!r}")
        filt = _parse_filter(words[2:])
        matchers = [o for o in scene.objects if _matches(o, filt)]
        if len(matchers) != 1:
            raise LabelError(f"query {list(words)} matches {len(matchers)} objects, expected 1")
        return getattr(matchers[0], kind)
    raise LabelError(f"unparseable question {list(words)}")


def question_type(sample: ToySample) -> str:
    """Coarse question family ("count" / "exists" / "query") for eval breakdowns."""
    if sample.task != "vqa":
        raise DatasetError(f"question_type expects a vqa sample, got {sample.task!r}")
    if not sample.tokens:
        raise DatasetError("question_type: sample has no tokens")
    first = toy_vocabulary().decode(sample.tokens[:1])[0]
    kind = {"how": "count", "is": "exists", "what": "query"}.get(first)
    if kind is None:
        raise DatasetError(f"question_type: unrecognised leading word {first!r}")
    return kind


def gen_vqa_dataset(count: int, seed: int, cfg: GenConfig | None = None) -> list[ToySample]:
    """Stratified: answer classes are cycled round-robin across samples."""
    cfg = cfg or GenConfig(task="vqa")
    root = RngStream(seed).child("vqa-data")
    order = root.child("class-order").permutation(len(ANSWERS))
    return [
        gen_vqa_sample(root.child(i), cfg, target=ANSWERS[order[i % len(ANSWERS)]])
        for i in range(count)
    ]


# -- grounding generation --------------------------------------------------------


def _descriptor_combos() -> list[tuple[str, ...]]:
    dims = _DIM_ORDER
    singles = [(d,) for d in dims]
    pairs = [(dims[i], dims[j]) for i in range(3) for j in range(i + 1, 3)]
    return singles + pairs + [dims]


def _unique_descriptor(scene: SyntheticScene, idx: int) -> dict | None:
    """Shortest attribute filter matching exactly the object at `idx`."""
    obj = scene.objects[idx]
    for combo in _descriptor_combos():
        filt = {d: getattr(obj, d) for d in combo}
        if sum(1 for o in scene.objects if _matches(o, filt)) == 1:
            return filt
    return None


def _center(box: Box) -> tuple[float, float]:
    return ((box.x_tl + box.x_br) / 2.0, (box.y_tl + box.y_br) / 2.0)


def _relation_holds(box: Box, anchor: Box, rel: str) -> bool:
    (cx, cy), (ax, ay) = _center(box), _center(anchor)
    if rel == "left":
        return cx < ax
    if rel == "right":
        return cx > ax
    if rel == "above":
        return cy < ay
    if rel == "below":
        return cy > ay
    raise LabelError(f"unknown relation {rel!r}")


def _relational_query(g: np.random.Generator, scene: SyntheticScene) -> tuple[list[str], int] | None:
    """Query of the form 'the X <rel> of the Y' with a unique referent."""
    n = len(scene.objects)
    candidates = list(g.permutation(n))
    for ref_idx in candidates:
        ref = scene.objects[ref_idx]
        filt = {"shape": ref.shape, "color": ref.color, "size": ref.size}
        for anchor_idx in g.permutation(n):
            if anchor_idx == ref_idx:
                continue
            anchor_filt = _unique_descriptor(scene, anchor_idx)
            if anchor_filt is None:
                continue
            for rel in _RELATIONS:
                hits = [
                    i for i, o in enumerate(scene.objects)
                    if i != anchor_idx and _matches(o, filt)
                    and _relation_holds(o.box, scene.objects[anchor_idx].box, rel)
                ]
                if hits == [ref_idx]:
                    words = ["the", *_filter_words(filt), rel, "of",
                             "the", *_filter_words(anchor_filt)]
                    return words, int(ref_idx)
    return None


def _jittered_box(g: np.random.Generator, src: Box, canvas: float) -> Box | None:
    sigma = g.uniform(1.0, 8.0)
    x1, y1, x2, y2 = (v + g.normal(0.0, sigma) for v in (src.x_tl, src.y_tl, src.x_br, src.y_br))
    x1, x2 = sorted((min(max(x1, 0.0), canvas), min(max(x2, 0.0), canvas)))
    y1, y2 = sorted((min(max(y1, 0.0), canvas), min(max(y2, 0.0), canvas)))
    if x2 - x1 < 2.0 or y2 - y1 < 2.0:
        return None
    return Box(_round2(x1), _round2(y1), _round2(x2), _round2(y2))


def _make_proposals(g: np.random.Generator, scene: SyntheticScene, cfg: GenConfig) -> None:
    boxes = [o.box for o in scene.objects]
    sources = list(range(len(boxes)))
    while len(boxes) < cfg.n_proposals:
        src = int(g.integers(len(scene.objects)))
        jit = _jittered_box(g, scene.objects[src].box, cfg.canvas)
        if jit is not None:
            boxes.append(jit)
            sources.append(src)
    perm = g.permutation(len(boxes))
    scene.proposals = [boxes[i] for i in perm]
    scene.proposal_sources = [sources[i] for i in perm]


def gen_grounding_sample(rng: RngStream, cfg: GenConfig | None = None) -> ToySample:
    """Scene + uniquely-referring query + proposal pool around the objects."""
    cfg = cfg or GenConfig(task="grounding")
    g = rng.generator()
    vocab = toy_vocabulary()
    for _ in range(cfg.max_retries):
        total = int(g.integers(cfg.min_objects, cfg.max_objects + 1))
        attrs = [_random_attrs(g) for _ in range(total)]
        objects = _place_objects(g, cfg, attrs)
        if objects is None:
            continue
        scene = SyntheticScene(width=cfg.canvas, height=cfg.canvas, objects=objects)

        uniquely = [i for i in range(total) if _unique_descriptor(scene, i) is not None]
        relational = _relational_query(g, scene)
        words: list[str] | None = None
        if uniquely and (relational is None or g.random() < 0.7):
            ref_idx = int(uniquely[g.integers(len(uniquely))])
            words = ["the", *_filter_words(_unique_descriptor(scene, ref_idx))]
        elif relational is not None:
            words, ref_idx = relational
        if words is None:
            continue
        if derive_referent(scene, words) != ref_idx:
            continue  # defensive; templates and parser must agree
        _make_proposals(g, scene, cfg)
        gt = scene.objects[ref_idx].box
        return ToySample(
            task="grounding", tokens=vocab.encode(words), scene=scene,
            label={"referent": ref_idx, "gt_box": [gt.x_tl, gt.y_tl, gt.x_br, gt.y_br]},
        )
    raise DatasetError(f"gen_grounding_sample: no uniquely-referring scene after {cfg.max_retries} retries")


def derive_referent(scene: SyntheticScene, words: Sequence[str]) -> int:
    """Recompute the referent index from the scene (the generator's oracle)."""
    words = list(words)
    rel = next((w for w in words if w in _RELATIONS), None)
    if rel is None:
        filt = _parse_filter(words)
        hits = [i for i, o in enumerate(scene.objects) if _matches(o, filt)]
    else:
        cut = words.index(rel)
        filt = _parse_filter(words[:cut])
        anchor_filt = _parse_filter(words[cut:])
        anchors = [i for i, o in enumerate(scene.objects) if _matches(o, anchor_filt)]
        if len(anchors) != 1:
            raise LabelError(f"anchor phrase matches {len(anchors)} objects, expected 1")
        anchor = scene.objects[anchors[0]].box
        hits = [
            i for i, o in enumerate(scene.objects)
            if i != anchors[0] and _matches(o, filt) and _relation_holds(o.box, anchor, rel)
        ]
    if len(hits) != 1:
        raise LabelError(f"query {words} matches {len(hits)} objects, expected 1")
    return hits[0]


def gen_grounding_dataset(count: int, seed: int, cfg: GenConfig | None = None) -> list[ToySample]:
    cfg = cfg or GenConfig(task="grounding")
    root = RngStream(seed).child("grounding-data")
    return [gen_grounding_sample(root.child(i), cfg) for i in range(count)]


# -- model-input assembly ---------------------------------------------------------


def assemble_tokens(tokens: Sequence[int], m_max: int, task: str) -> np.ndarray:
    """Fixed-length id row: [ans] prefix for vqa, right-padded/trimmed."""
    ids = list(tokens)
    if task == "vqa":
        ids = [Vocabulary.ANS] + ids
    ids = ids[:m_max]
    return np.array(ids + [Vocabulary.PAD] * (m_max - len(ids)), dtype=np.int64)
