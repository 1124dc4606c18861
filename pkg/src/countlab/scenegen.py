"""Synthetic counting scenes: instances, region proposals, templated questions.

A scene is a set of class/attribute-tagged instances with boxes on the unit
canvas.  Region proposals are jittered near-duplicates of instance boxes
plus background distractors; their feature vectors are class + attribute
prototypes with Gaussian noise, standing in for detector features.
Questions are templated (plain, attribute-filtered, or half-plane
positional) and every triplet stores the exact matching count and the
matching instances' boxes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .boxes import Box, iou

__all__ = [
    "SpecError",
    "QuestionUnsatisfiable",
    "SceneSpec",
    "Instance",
    "RegionProposal",
    "Question",
    "CountingTriplet",
    "Dataset",
    "DatasetView",
    "MODES",
    "PREDICATES",
    "generate_scene",
    "propose_regions",
    "make_question",
    "count_matches",
    "generate_dataset",
    "combine_pools",
    "save_dataset",
    "load_dataset",
    "dataset_lines",
]

MODES = ("simple", "complex-attribute", "complex-position")
PREDICATES = ("left-half", "right-half", "top-half", "bottom-half")

CLASS_NAMES = ("cat", "dog", "car", "tree", "cup", "book", "ball", "chair",
               "bird", "boat", "lamp", "fish", "shoe", "drum", "kite", "fork")
ATTRIBUTE_NAMES = ("red", "blue", "green", "yellow", "striped", "spotted",
                   "shiny", "fuzzy")

_FILE_KIND = "countlab-dataset"
_FILE_VERSION = 1


class SpecError(ValueError):
    pass


class QuestionUnsatisfiable(RuntimeError):
    """The requested question mode cannot be posed on this scene; resample."""


def _rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


@dataclass(frozen=True)
class SceneSpec:
    """Everything that determines scene content, features and questions."""

    n_classes: int = 8
    n_attributes: int = 4
    max_instances: int = 14
    size_range: tuple[float, float] = (0.08, 0.30)
    duplicate_range: tuple[int, int] = (1, 2)
    distractor_range: tuple[int, int] = (0, 2)
    feature_dim: int = 24
    noise_sd: float = 0.25
    jitter: float = 0.12
    coverage_iou: float = 0.5
    prototype_seed: int = 7
    label_weights: tuple[float, ...] = tuple([1.0] * 13)

    def validate(self) -> None:
        if self.n_classes < 1 or self.n_classes > len(CLASS_NAMES):
            raise SpecError(f"n_classes must be in 1..{len(CLASS_NAMES)}")
        if self.n_attributes < 2 or self.n_attributes > len(ATTRIBUTE_NAMES):
            raise SpecError(f"n_attributes must be in 2..{len(ATTRIBUTE_NAMES)}")
        if self.max_instances < 0:
            raise SpecError("max_instances must be >= 0")
        lo, hi = self.size_range
        if not (0.0 < lo <= hi <= 1.0):
            raise SpecError(f"size_range {self.size_range} must lie within (0, 1]")
        dlo, dhi = self.duplicate_range
        if not (1 <= dlo <= dhi):
            raise SpecError("duplicate_range must satisfy 1 <= lo <= hi")
        klo, khi = self.distractor_range
        if not (0 <= klo <= khi):
            raise SpecError("distractor_range must satisfy 0 <= lo <= hi")
        if self.feature_dim < self.n_classes:
            raise SpecError("feature_dim must be >= n_classes for separable prototypes")
        if self.noise_sd < 0.0:
            raise SpecError("noise_sd must be >= 0")
        if not 0.0 <= self.jitter < 0.5:
            raise SpecError("jitter must lie in [0, 0.5)")
        # inward jitter on all four sides keeps IoU >= (1-2j)^2
        if (1.0 - 2.0 * self.jitter) ** 2 < self.coverage_iou:
            raise SpecError(
                f"jitter {self.jitter} cannot guarantee duplicate IoU >= {self.coverage_iou}"
            )
        if not self.label_weights or any(w < 0.0 for w in self.label_weights):
            raise SpecError("label_weights must be non-negative and non-empty")
        if sum(self.label_weights) <= 0.0:
            raise SpecError("label_weights must have positive total mass")

    def prototypes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Seeded unit prototype vectors: (classes, attributes, background).

        Orthonormalized when the feature dim allows, random unit rows
        otherwise; pairwise distinct either way.
        """
        rng = _rng(self.prototype_seed, 0x9E37)
        n = self.n_classes + self.n_attributes + 1
        raw = rng.normal(0.0, 1.0, size=(n, self.feature_dim))
        if n <= self.feature_dim:
            q, _ = np.linalg.qr(raw.T)
            vecs = q.T[:n]
        else:
            vecs = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        classes = vecs[: self.n_classes]
        attributes = vecs[self.n_classes: self.n_classes + self.n_attributes]
        background = vecs[-1]
        return classes, attributes, background

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "n_attributes": self.n_attributes,
            "max_instances": self.max_instances,
            "size_range": list(self.size_range),
            "duplicate_range": list(self.duplicate_range),
            "distractor_range": list(self.distractor_range),
            "feature_dim": self.feature_dim,
            "noise_sd": self.noise_sd,
            "jitter": self.jitter,
            "coverage_iou": self.coverage_iou,
            "prototype_seed": self.prototype_seed,
            "label_weights": list(self.label_weights),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SceneSpec":
        return cls(
            n_classes=int(d["n_classes"]),
            n_attributes=int(d["n_attributes"]),
            max_instances=int(d["max_instances"]),
            size_range=tuple(float(v) for v in d["size_range"]),
            duplicate_range=tuple(int(v) for v in d["duplicate_range"]),
            distractor_range=tuple(int(v) for v in d["distractor_range"]),
            feature_dim=int(d["feature_dim"]),
            noise_sd=float(d["noise_sd"]),
            jitter=float(d["jitter"]),
            coverage_iou=float(d["coverage_iou"]),
            prototype_seed=int(d["prototype_seed"]),
            label_weights=tuple(float(v) for v in d["label_weights"]),
        )

    def content_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class Instance:
    class_id: int
    attribute_id: int
    box: Box


@dataclass
class RegionProposal:
    box: Box
    feature: np.ndarray
    source: int | None  # index of the covered instance, None for distractors


@dataclass(frozen=True)
class Question:
    mode: str
    class_id: int
    attribute_id: int | None = None
    predicate: str | None = None
    text: str = ""

    def __post_init__(self):
        if self.mode not in MODES:
            raise SpecError(f"unknown question mode {self.mode!r}")
        if (self.attribute_id is not None) != (self.mode == "complex-attribute"):
            raise SpecError("attribute_id is set iff mode is complex-attribute")
        if (self.predicate is not None) != (self.mode == "complex-position"):
            raise SpecError("predicate is set iff mode is complex-position")
        if self.predicate is not None and self.predicate not in PREDICATES:
            raise SpecError(f"unknown predicate {self.predicate!r}")

    def content_tokens(self) -> tuple[str, ...]:
        """Content symbols only; template scaffolding words are excluded."""
        toks = [f"cls:{CLASS_NAMES[self.class_id]}"]
        if self.attribute_id is not None:
            toks.append(f"attr:{ATTRIBUTE_NAMES[self.attribute_id]}")
        if self.predicate is not None:
            toks.append(f"pred:{self.predicate}")
        return tuple(toks)


@dataclass
class CountingTriplet:
    image_id: str
    regions: list[RegionProposal]
    question: Question
    count: int
    gt_boxes: list[Box]


def _render_text(mode: str, class_id: int, attribute_id: int | None,
                 predicate: str | None) -> str:
    cls = CLASS_NAMES[class_id]
    if mode == "simple":
        return f"how many {cls}?"
    if mode == "complex-attribute":
        return f"how many {ATTRIBUTE_NAMES[attribute_id]} {cls}?"
    side = predicate.split("-")[0]
    return f"how many {cls} in the {side} half?"


def _in_half(center: tuple[float, float], predicate: str) -> bool:
    cx, cy = center
    if predicate == "left-half":
        return cx < 0.5
    if predicate == "right-half":
        return cx > 0.5
    if predicate == "top-half":
        return cy < 0.5
    return cy > 0.5


def _matches(inst: Instance, q: Question) -> bool:
    if inst.class_id != q.class_id:
        return False
    if q.mode == "complex-attribute":
        return inst.attribute_id == q.attribute_id
    if q.mode == "complex-position":
        return _in_half(inst.box.center(), q.predicate)
    return True


def count_matches(scene: Sequence[Instance], question: Question) -> tuple[int, list[Box]]:
    """Count instances satisfying the question predicate; return their boxes."""
    boxes = [inst.box for inst in scene if _matches(inst, question)]
    return len(boxes), boxes


def _sample_box(rng: np.random.Generator, spec: SceneSpec,
                half: str | None = None, avoid_half: str | None = None) -> Box:
    """Uniform box within the canvas, optionally constrained by its center.

    Centers are kept a small margin away from the canvas midlines so
    half-plane membership is unambiguous.
    """
    margin = 1e-3
    w = float(rng.uniform(*spec.size_range))
    h = float(rng.uniform(*spec.size_range))
    predicate = half if half is not None else avoid_half
    flip = avoid_half is not None
    for _ in range(64):
        cx = float(rng.uniform(w / 2.0, 1.0 - w / 2.0))
        cy = float(rng.uniform(h / 2.0, 1.0 - h / 2.0))
        if predicate is None:
            if abs(cx - 0.5) < margin or abs(cy - 0.5) < margin:
                continue
            break
        inside = _in_half((cx, cy), predicate)
        clear = (abs(cx - 0.5) >= margin and abs(cy - 0.5) >= margin)
        if clear and (inside != flip):
            break
    return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


def generate_scene(spec: SceneSpec, seed: int) -> list[Instance]:
    """Scene with Uniform{0..max_instances} instances, each tagged and boxed."""
    spec.validate()
    rng = _rng(seed, 0x5C)
    n = int(rng.integers(0, spec.max_instances + 1))
    scene = []
    for _ in range(n):
        scene.append(Instance(
            class_id=int(rng.integers(spec.n_classes)),
            attribute_id=int(rng.integers(spec.n_attributes)),
            box=_sample_box(rng, spec),
        ))
    return scene


def _jitter_box(box: Box, rng: np.random.Generator, spec: SceneSpec,
                scale: float = 1.0) -> Box:
    j = spec.jitter * scale
    w, h = box.width, box.height
    x1 = box.x1 + float(rng.uniform(-j, j)) * w
    x2 = box.x2 + float(rng.uniform(-j, j)) * w
    y1 = box.y1 + float(rng.uniform(-j, j)) * h
    y2 = box.y2 + float(rng.uniform(-j, j)) * h
    out = Box(max(0.0, x1), max(0.0, y1), min(1.0, x2), min(1.0, y2))
    # canvas clipping can only grow IoU with the (in-canvas) source box
    return out


def propose_regions(scene: Sequence[Instance], spec: SceneSpec, seed: int) -> list[RegionProposal]:
    """Jittered near-duplicate proposals per instance plus background distractors.

    Within each duplicate group the first proposal is well framed (light box
    jitter, clean feature) and the rest are sloppier (full jitter, noisier
    feature), the way detector box quality and crop quality co-vary; that
    correlation is what makes committing to one box per instance learnable.
    """
    spec.validate()
    rng = _rng(seed, 0xA1)
    class_protos, attr_protos, background = spec.prototypes()
    proposals: list[RegionProposal] = []
    dlo, dhi = spec.duplicate_range
    for idx, inst in enumerate(scene):
        n_dup = int(rng.integers(dlo, dhi + 1))
        mean = class_protos[inst.class_id] + attr_protos[inst.attribute_id]
        for dup_idx in range(n_dup):
            primary = dup_idx == 0
            box = _jitter_box(inst.box, rng, spec, scale=0.25 if primary else 1.0)
            if iou(box, inst.box) < spec.coverage_iou:  # unreachable by construction
                box = inst.box
            sd = spec.noise_sd * (0.6 if primary else 1.3)
            feat = mean + rng.normal(0.0, sd, spec.feature_dim)
            proposals.append(RegionProposal(box=box, feature=feat, source=idx))
    klo, khi = spec.distractor_range
    for _ in range(int(rng.integers(klo, khi + 1))):
        box = _sample_box(rng, spec)
        feat = background + rng.normal(0.0, spec.noise_sd, spec.feature_dim)
        proposals.append(RegionProposal(box=box, feature=feat, source=None))
    return proposals


def make_question(scene: Sequence[Instance], mode: str, seed: int,
                  zero_count: bool = False) -> tuple[Question, int, list[Box]]:
    """Pose one question of the given mode about the scene.

    Zero-count questions target a class (or class/attribute, class/half
    combination) with no matching instance.  Raises QuestionUnsatisfiable
    when the scene admits no such question, so generators can resample.
    """
    if mode not in MODES:
        raise SpecError(f"unknown question mode {mode!r}")
    if not scene and not zero_count:
        raise QuestionUnsatisfiable("empty scene admits only zero-count questions")
    rng = _rng(seed, 0x0E5)
    n_classes = max([inst.class_id for inst in scene], default=-1) + 1
    n_classes = max(n_classes, 1)
    # candidate questions are enumerated, then one is drawn uniformly
    candidates: list[Question] = []
    if mode == "simple":
        present = {inst.class_id for inst in scene}
        universe = range(len(CLASS_NAMES))
        pool = [k for k in universe if (k not in present) == zero_count]
        candidates = [Question("simple", k, text=_render_text("simple", k, None, None))
                      for k in pool]
    elif mode == "complex-attribute":
        combos = {(inst.class_id, inst.attribute_id) for inst in scene}
        present_classes = {inst.class_id for inst in scene}
        if zero_count:
            pool = [(k, a) for k in present_classes for a in range(len(ATTRIBUTE_NAMES))
                    if (k, a) not in combos]
        else:
            pool = sorted(combos)
        candidates = [
            Question("complex-attribute", k, attribute_id=a,
                     text=_render_text("complex-attribute", k, a, None))
            for k, a in sorted(pool)
        ]
    else:
        present_classes = sorted({inst.class_id for inst in scene})
        pool = []
        for k in present_classes:
            for pred in PREDICATES:
                q = Question("complex-position", k, predicate=pred,
                             text=_render_text("complex-position", k, None, pred))
                c, _ = count_matches(scene, q)
                if (c == 0) == zero_count:
                    pool.append(q)
        candidates = pool
    if not candidates:
        raise QuestionUnsatisfiable(
            f"no {'zero-count ' if zero_count else ''}{mode} question fits this scene"
        )
    q = candidates[int(rng.integers(len(candidates)))]
    count, gt = count_matches(scene, q)
    return q, count, gt


# ---------------------------------------------------------------------------
# Dataset generation with label-histogram targeting.
# ---------------------------------------------------------------------------


def _apportion(n: int, weights: Sequence[float]) -> list[int]:
    """Largest-remainder split of n items over weighted labels (exact total)."""
    total_w = float(sum(weights))
    quotas = [n * w / total_w for w in weights]
    counts = [int(q) for q in quotas]
    remainders = sorted(range(len(weights)), key=lambda i: (quotas[i] - counts[i], -i),
                        reverse=True)
    short = n - sum(counts)
    for i in remainders[:short]:
        counts[i] += 1
    return counts


def _build_image(spec: SceneSpec, plans: list[tuple[int, str]], rng: np.random.Generator
                 ) -> tuple[list[Instance], list[tuple[Question, int, list[int]]]]:
    """Construct one scene satisfying several (label, mode) question plans.

    Each plan gets its own class so counts stay independent; decoys of the
    same class (wrong attribute or wrong half) and extra unrelated instances
    are added within the instance budget to keep questions non-trivial.
    Returns instances plus per-question (question, count, matching indices).
    """
    classes = [int(k) for k in rng.choice(spec.n_classes, size=len(plans), replace=False)]
    budget = spec.max_instances - sum(c for c, _ in plans)
    placed: list[Instance] = []
    built: list[Question] = []

    for (count, mode), k in zip(plans, classes):
        if mode == "simple":
            for _ in range(count):
                attr = int(rng.integers(spec.n_attributes))
                placed.append(Instance(k, attr, _sample_box(rng, spec)))
            built.append(Question("simple", k, text=_render_text("simple", k, None, None)))
        elif mode == "complex-attribute":
            attr = int(rng.integers(spec.n_attributes))
            for _ in range(count):
                placed.append(Instance(k, attr, _sample_box(rng, spec)))
            n_decoys = int(rng.integers(0, min(budget, 2) + 1))
            for _ in range(n_decoys):
                other = int(rng.integers(spec.n_attributes - 1))
                if other >= attr:
                    other += 1
                placed.append(Instance(k, other, _sample_box(rng, spec)))
            budget -= n_decoys
            built.append(Question("complex-attribute", k, attribute_id=attr,
                                  text=_render_text("complex-attribute", k, attr, None)))
        else:
            pred = PREDICATES[int(rng.integers(len(PREDICATES)))]
            for _ in range(count):
                attr = int(rng.integers(spec.n_attributes))
                placed.append(Instance(k, attr, _sample_box(rng, spec, half=pred)))
            n_decoys = int(rng.integers(0, min(budget, 2) + 1))
            for _ in range(n_decoys):
                attr = int(rng.integers(spec.n_attributes))
                placed.append(Instance(k, attr, _sample_box(rng, spec, avoid_half=pred)))
            budget -= n_decoys
            built.append(Question("complex-position", k, predicate=pred,
                                  text=_render_text("complex-position", k, None, pred)))

    unused = [k for k in range(spec.n_classes) if k not in set(classes)]
    if unused and budget > 0:
        # an all-zero-count image must still contain something to look at
        lo = 1 if not placed else 0
        for _ in range(int(rng.integers(lo, min(budget, 2) + 1))):
            k = unused[int(rng.integers(len(unused)))]
            attr = int(rng.integers(spec.n_attributes))
            placed.append(Instance(k, attr, _sample_box(rng, spec)))

    instances = [placed[i] for i in rng.permutation(len(placed))]

    questions: list[tuple[Question, int, list[int]]] = []
    for (count, _), q in zip(plans, built):
        c, _gt = count_matches(instances, q)
        if c != count:
            raise QuestionUnsatisfiable(
                f"constructed scene yields count {c} for a plan targeting {count}"
            )
        idxs = [i for i, inst in enumerate(instances) if _matches(inst, q)]
        questions.append((q, c, idxs))
    return instances, questions


def generate_dataset(spec: SceneSpec, n: int, seed: int,
                     label_weights: Sequence[float] | None = None,
                     mode_weights: tuple[float, float, float] = (0.5, 0.25, 0.25),
                     questions_per_image: tuple[int, int] = (1, 2),
                     image_prefix: str = "img",
                     scenes_out: dict | None = None) -> "Dataset":
    """Generate ``n`` triplets whose label histogram matches the target ±1.

    Scenes are constructed to realize requested labels exactly; several
    questions may share one image (distinct target classes).  Deterministic
    given (spec, seed): repeated calls serialize byte-identically.  When
    ``scenes_out`` is given it receives image_id -> instances, so label
    correctness can be re-verified against the raw scenes.
    """
    spec.validate()
    if n < 0:
        raise SpecError("n must be >= 0")
    weights = tuple(label_weights) if label_weights is not None else spec.label_weights
    if any(w < 0 for w in weights) or sum(weights) <= 0:
        raise SpecError("label weights must be non-negative with positive mass")
    for label, w in enumerate(weights):
        if w > 0.0 and label > spec.max_instances:
            raise SpecError(
                f"label {label} is unreachable: max_instances is {spec.max_instances}"
            )

    rng = _rng(seed, 0xD5)
    counts = _apportion(n, weights)
    labels: list[int] = []
    for label, c in enumerate(counts):
        labels.extend([label] * c)
    labels = [labels[i] for i in rng.permutation(len(labels))]
    mw = np.asarray(mode_weights, dtype=float)
    mw = mw / mw.sum()
    modes = [MODES[i] for i in rng.choice(3, size=len(labels), p=mw)]

    qlo, qhi = questions_per_image
    if not (1 <= qlo <= qhi):
        raise SpecError("questions_per_image must satisfy 1 <= lo <= hi")
    if qhi >= spec.n_classes:
        raise SpecError("questions_per_image must stay below n_classes")

    triplets: list[CountingTriplet] = []
    pos = 0
    image_idx = 0
    while pos < len(labels):
        want = int(rng.integers(qlo, qhi + 1))
        plans = [(labels[pos], modes[pos])]
        pos += 1
        while len(plans) < want and pos < len(labels):
            if sum(c for c, _ in plans) + labels[pos] > spec.max_instances:
                break
            plans.append((labels[pos], modes[pos]))
            pos += 1
        image_id = f"{image_prefix}-{image_idx:06d}"
        for attempt in range(32):
            try:
                scene, questions = _build_image(spec, plans, _rng(seed, 0x1A6, image_idx, attempt))
                break
            except QuestionUnsatisfiable:
                continue
        else:
            raise SpecError(f"could not realize plans {plans} within spec bounds")
        proposals = propose_regions(scene, spec, seed=_derive_seed(seed, image_idx))
        if scenes_out is not None:
            scenes_out[image_id] = scene
        for q, c, match_idx in questions:
            covered = {p.source for p in proposals if p.source is not None}
            if any(i not in covered for i in match_idx):  # defensive; dup_range lo >= 1
                raise SpecError("matching instance left uncovered by proposals")
            triplets.append(CountingTriplet(
                image_id=image_id,
                regions=proposals,
                question=q,
                count=c,
                gt_boxes=[scene[i].box for i in match_idx],
            ))
        image_idx += 1

    meta = {
        "seed": seed,
        "n": n,
        "label_weights": list(weights),
        "mode_weights": [float(v) for v in mw],
        "questions_per_image": list(questions_per_image),
        "image_prefix": image_prefix,
    }
    return Dataset(spec=spec, triplets=triplets, meta=meta)


def _derive_seed(seed: int, index: int) -> int:
    return (seed * 1_000_003 + index) % (2 ** 63)


# ---------------------------------------------------------------------------
# Dataset container and JSONL serialization.
# ---------------------------------------------------------------------------


class DatasetView:
    """Read-only id -> triplet mapping restricted to an id subset."""

    def __init__(self, dataset: "Dataset", ids: Iterable[int]):
        self._map = {int(i): dataset.triplets[int(i)] for i in ids}

    @property
    def ids(self) -> tuple[int, ...]:
        return tuple(self._map)

    def __getitem__(self, tid: int) -> CountingTriplet:
        return self._map[tid]

    def __contains__(self, tid: int) -> bool:
        return tid in self._map

    def __len__(self) -> int:
        return len(self._map)


@dataclass
class Dataset:
    spec: SceneSpec
    triplets: list[CountingTriplet]
    meta: dict
    test_ids: tuple[int, ...] = ()
    _hash: str | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.triplets)

    def labels(self) -> list[int]:
        return [t.count for t in self.triplets]

    def image_ids(self) -> list[str]:
        return [t.image_id for t in self.triplets]

    def restrict(self, ids: Iterable[int]) -> DatasetView:
        return DatasetView(self, ids)

    def content_hash(self) -> str:
        if self._hash is None:
            h = hashlib.sha256()
            for line in dataset_lines(self):
                h.update(line.encode())
                h.update(b"\n")
            self._hash = h.hexdigest()
        return self._hash


def _box_to_list(b: Box) -> list[float]:
    return [float(b.x1), float(b.y1), float(b.x2), float(b.y2)]


def _triplet_to_dict(t: CountingTriplet) -> dict:
    return {
        "image_id": t.image_id,
        "regions": [
            {
                "box": _box_to_list(r.box),
                "feature": [float(v) for v in r.feature],
                "source": r.source,
            }
            for r in t.regions
        ],
        "question": {
            "mode": t.question.mode,
            "class_id": t.question.class_id,
            "attribute_id": t.question.attribute_id,
            "predicate": t.question.predicate,
            "text": t.question.text,
        },
        "count": t.count,
        "gt_boxes": [_box_to_list(b) for b in t.gt_boxes],
    }


def _triplet_from_dict(d: Mapping) -> CountingTriplet:
    q = d["question"]
    return CountingTriplet(
        image_id=d["image_id"],
        regions=[
            RegionProposal(
                box=Box(*[float(v) for v in r["box"]]),
                feature=np.asarray(r["feature"], dtype=np.float64),
                source=r["source"],
            )
            for r in d["regions"]
        ],
        question=Question(
            mode=q["mode"],
            class_id=int(q["class_id"]),
            attribute_id=None if q["attribute_id"] is None else int(q["attribute_id"]),
            predicate=q["predicate"],
            text=q["text"],
        ),
        count=int(d["count"]),
        gt_boxes=[Box(*[float(v) for v in b]) for b in d["gt_boxes"]],
    )


def dataset_lines(ds: Dataset) -> list[str]:
    """Canonical JSONL representation: header line then one triplet per line."""
    header = {
        "kind": _FILE_KIND,
        "version": _FILE_VERSION,
        "spec": ds.spec.to_dict(),
        "spec_hash": ds.spec.content_hash(),
        "meta": ds.meta,
        "n_triplets": len(ds.triplets),
        "test_ids": list(ds.test_ids),
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for t in ds.triplets:
        lines.append(json.dumps(_triplet_to_dict(t), sort_keys=True, separators=(",", ":")))
    return lines


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in dataset_lines(ds):
            fh.write(line)
            fh.write("\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    if not raw:
        raise SpecError(f"{path} is empty")
    header = json.loads(raw[0])
    if header.get("kind") != _FILE_KIND:
        raise SpecError(f"{path} is not a dataset file")
    if header.get("version") != _FILE_VERSION:
        raise SpecError(f"unsupported dataset version {header.get('version')}")
    triplets = [_triplet_from_dict(json.loads(line)) for line in raw[1:] if line]
    if len(triplets) != header["n_triplets"]:
        raise SpecError("triplet count does not match header")
    return Dataset(
        spec=SceneSpec.from_dict(header["spec"]),
        triplets=triplets,
        meta=header["meta"],
        test_ids=tuple(int(i) for i in header["test_ids"]),
    )


def combine_pools(train_pool: Dataset, test_pool: Dataset) -> Dataset:
    """Merge a training pool and a designated test pool into one dataset.

    Image ids must not collide (use distinct prefixes); test triplet ids are
    recorded so split construction can withhold them from training.
    """
    if train_pool.spec != test_pool.spec:
        raise SpecError("pools must share one scene spec")
    shared = set(train_pool.image_ids()) & set(test_pool.image_ids())
    if shared:
        raise SpecError(f"pools share image ids, e.g. {sorted(shared)[:3]}")
    triplets = list(train_pool.triplets) + list(test_pool.triplets)
    test_ids = tuple(range(len(train_pool.triplets), len(triplets)))
    meta = {"train_pool": train_pool.meta, "test_pool": test_pool.meta}
    return Dataset(spec=train_pool.spec, triplets=triplets, meta=meta, test_ids=test_ids)
