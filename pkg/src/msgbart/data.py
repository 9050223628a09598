"""Synthetic video worlds, dialogue instances and their on-disk format.

Each video has a pool of objects and a handful of relation facts
``(subject, relation, object)``.  Every frame shows one to three facts plus
filler objects.  Frame features are the sum of fixed per-label vectors for
the objects in view plus Gaussian noise, so they say which objects are
present but never how they relate: questions about relations can only be
answered from the scene graph.

Layout of a corpus directory::

    world.json  labels.json  vocab.txt  instances.jsonl
    assets/<video_id>.graph.json
    assets/<video_id>.features.bin    # little-endian f32, coarse rows then fine rows
    assets/<video_id>.features.json   # {"T_c": .., "T_f": .., "d_v": ..}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .gvp import FeatureTrack, coarsen
from .lm import Vocab
from .scenegraph import (
    RELATION_CLASSES,
    FrameGraph,
    LabelSet,
    SceneGraph,
    scene_graph_from_json,
    scene_graph_to_json,
)

QUESTION_KINDS = ("graph_dependent", "feature_dependent", "history_dependent")

OBJECT_NAMES = (
    "person", "cup", "table", "chair", "book", "phone",
    "bag", "door", "laptop", "bottle", "shelf", "towel",
)
RELATION_NAMES = {
    "spatial": ("above", "beneath", "beside", "behind"),
    "contact": ("holding", "touching", "wiping", "sitting_on"),
    "attention": ("looking_at", "not_looking_at", "watching", "ignoring"),
}
ORDINALS = ("first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth")
TEMPLATE_WORDS = ("what", "is", "?", "there", "a", "yes", "no", "was", "the", "answer")


class CorpusFormatError(ValueError):
    pass


@dataclass
class WorldConfig:
    num_videos: int = 500
    num_objects: int = 12
    relations_per_class: int = 4
    frames: int = 8
    window: int = 4
    turns: int = 3
    feature_dim: int = 16
    noise: float = 0.1
    objects_per_video: int = 6
    facts_per_video: int = 4
    seed: int = 0

    def validate(self) -> None:
        if self.window < 1 or self.frames % self.window:
            raise ValueError(f"window ratio {self.window} must divide frames {self.frames}")
        if self.noise < 0:
            raise ValueError("feature noise must be >= 0")
        if self.feature_dim % 2:
            raise ValueError("feature_dim must be even (visual half + audio half)")
        if not 2 <= self.objects_per_video <= self.num_objects:
            raise ValueError("objects_per_video must lie in [2, num_objects]")
        if self.turns < 1 or self.turns > len(ORDINALS) + 1:
            raise ValueError(f"turns must lie in [1, {len(ORDINALS) + 1}]")
        if self.facts_per_video < 1:
            raise ValueError("facts_per_video must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DialogueInstance:
    video_id: str
    history: List[Tuple[str, str]]
    question: str
    answer: str
    kind: str

    def to_json(self) -> dict:
        return {
            "video_id": self.video_id,
            "history": [list(t) for t in self.history],
            "question": self.question,
            "answer": self.answer,
            "kind": self.kind,
        }

    @classmethod
    def from_json(cls, d: dict) -> "DialogueInstance":
        inst = cls(d["video_id"], [tuple(t) for t in d["history"]], d["question"], d["answer"], d["kind"])
        if not inst.answer.strip():
            raise ValueError("answer must be nonempty")
        if inst.kind not in QUESTION_KINDS:
            raise ValueError(f"unknown question kind {inst.kind!r}")
        return inst

    def history_text(self) -> str:
        return " ".join(f"{q} {a}" for q, a in self.history)


@dataclass
class Corpus:
    labels: LabelSet
    instances: List[DialogueInstance]
    graphs: Dict[str, SceneGraph]
    features: Dict[str, FeatureTrack]
    world: Optional[WorldConfig] = None

    def video_ids(self) -> List[str]:
        return sorted(self.graphs)

    def vocab(self) -> Vocab:
        return build_vocab(self.labels, self.world.turns if self.world else len(ORDINALS) + 1)

    def subset(self, video_ids: Iterable[str]) -> "Corpus":
        keep = set(video_ids)
        return Corpus(
            self.labels,
            [i for i in self.instances if i.video_id in keep],
            {v: g for v, g in self.graphs.items() if v in keep},
            {v: f for v, f in self.features.items() if v in keep},
            self.world,
        )


def make_labels(cfg: WorldConfig) -> LabelSet:
    objects = [OBJECT_NAMES[i] if i < len(OBJECT_NAMES) else f"object{i}" for i in range(cfg.num_objects)]
    relations, classes = [], []
    for cls in RELATION_CLASSES:
        names = RELATION_NAMES[cls]
        for i in range(cfg.relations_per_class):
            relations.append(names[i] if i < len(names) else f"{cls}{i}")
            classes.append(cls)
    return LabelSet(tuple(objects), tuple(relations), tuple(classes))


def build_vocab(labels: LabelSet, turns: int = len(ORDINALS) + 1) -> Vocab:
    return Vocab([*TEMPLATE_WORDS, *ORDINALS[: max(turns - 1, 0)], *labels.objects, *labels.relations])


# ----------------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------------


def _sample_facts(rng: np.random.Generator, pool: np.ndarray, n_rel: int, count: int) -> List[Tuple[int, int, int]]:
    facts: List[Tuple[int, int, int]] = []
    seen = set()
    while len(facts) < count:
        src, dst = rng.choice(pool, size=2, replace=False)
        rel = int(rng.integers(n_rel))
        if (src, rel) in seen:
            continue
        seen.add((int(src), rel))
        facts.append((int(src), rel, int(dst)))
    return facts


def _sample_frame(rng, pool, facts, labels: LabelSet) -> FrameGraph:
    while True:
        k = int(rng.integers(1, 4))
        chosen = sorted(rng.choice(len(facts), size=min(k, len(facts)), replace=False))
        shown = [facts[i] for i in chosen]
        endpoints = sorted({x for s, _, d in shown for x in (s, d)})
        if len(endpoints) <= 4:
            break
    n_obj = int(rng.integers(max(2, len(endpoints)), 5))
    spare = [o for o in pool if o not in endpoints]
    extra = list(rng.choice(spare, size=min(n_obj - len(endpoints), len(spare)), replace=False)) if spare else []
    present = endpoints + [int(o) for o in extra]
    order = rng.permutation(len(present))
    node_of = {present[j]: i for i, j in enumerate(order)}
    objects = tuple(sorted((node_of[label], label) for label in present))
    relations = tuple((node_of[s], r, node_of[d], labels.relation_classes[r]) for s, r, d in shown)
    return FrameGraph(objects, relations)


def _dialogue(rng, vid: str, graph: SceneGraph, facts, labels: LabelSet, cfg: WorldConfig) -> List[DialogueInstance]:
    shown = sorted({(s_lab, r, d_lab) for f in graph.frames for s_lab, r, d_lab in _frame_facts(f)})
    present = sorted({label for f in graph.frames for _, label in f.objects})
    absent = [o for o in range(cfg.num_objects) if o not in present]
    history: List[Tuple[str, str]] = []
    out = []
    for turn in range(cfg.turns):
        weights = [0.6, 0.4, 0.0] if turn == 0 else [0.5, 0.25, 0.25]
        kind = QUESTION_KINDS[int(rng.choice(3, p=weights))]
        if kind == "graph_dependent":
            s, r, d = shown[int(rng.integers(len(shown)))]
            q, a = f"what is {labels.objects[s]} {labels.relations[r]} ?", labels.objects[d]
        elif kind == "feature_dependent":
            if absent and rng.random() < 0.5:
                q, a = f"is there a {labels.objects[absent[int(rng.integers(len(absent)))]]} ?", "no"
            else:
                q, a = f"is there a {labels.objects[present[int(rng.integers(len(present)))]]} ?", "yes"
        else:
            k = int(rng.integers(len(history)))
            q, a = f"what was the {ORDINALS[k]} answer ?", history[k][1]
        out.append(DialogueInstance(vid, list(history), q, a, kind))
        history.append((q, a))
    return out


def _frame_facts(frame: FrameGraph):
    label = dict(frame.objects)
    return [(label[s], r, label[d]) for s, r, d, _ in frame.relations]


def frame_features(frame: FrameGraph, label_vectors: np.ndarray) -> np.ndarray:
    """Sum of per-label vectors for the objects in view; relations never enter."""
    return label_vectors[[label for _, label in frame.objects]].sum(axis=0)


def generate_world(cfg: WorldConfig) -> Corpus:
    """Build a corpus as a pure function of ``cfg``; each video draws from its own derived seed."""
    cfg.validate()
    labels = make_labels(cfg)
    label_vectors = np.random.default_rng([cfg.seed, 0]).normal(size=(cfg.num_objects, cfg.feature_dim))
    graphs, features, instances = {}, {}, []
    for v in range(cfg.num_videos):
        rng = np.random.default_rng([cfg.seed, 1, v])
        vid = f"v{v:05d}"
        pool = rng.choice(cfg.num_objects, size=cfg.objects_per_video, replace=False)
        facts = _sample_facts(rng, pool, len(labels.relations), cfg.facts_per_video)
        graph = SceneGraph(tuple(_sample_frame(rng, pool, facts, labels) for _ in range(cfg.frames)))
        fine = np.stack([frame_features(f, label_vectors) for f in graph.frames])
        fine = (fine + cfg.noise * rng.normal(size=fine.shape)).astype(np.float32)
        graphs[vid] = graph
        features[vid] = FeatureTrack(coarsen(fine, cfg.window).astype(np.float32), fine)
        instances.extend(_dialogue(rng, vid, graph, facts, labels, cfg))
    return Corpus(labels, instances, graphs, features, cfg)


def split(corpus: Corpus, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> Dict[str, List[str]]:
    """Partition video ids into train/dev/test; no video crosses splits."""
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {list(ratios)}")
    vids = corpus.video_ids()
    order = [vids[i] for i in np.random.default_rng(seed).permutation(len(vids))]
    n_train = int(round(ratios[0] * len(vids)))
    n_dev = int(round(ratios[1] * len(vids)))
    return {
        "train": sorted(order[:n_train]),
        "dev": sorted(order[n_train : n_train + n_dev]),
        "test": sorted(order[n_train + n_dev :]),
    }


# ----------------------------------------------------------------------------
# I/O
# ----------------------------------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_features(assets: Path, vid: str, track: FeatureTrack) -> None:
    body = np.concatenate([track.coarse, track.fine]).astype("<f4").tobytes()
    (assets / f"{vid}.features.bin").write_bytes(body)
    sidecar = {"T_c": int(track.coarse.shape[0]), "T_f": int(track.fine.shape[0]), "d_v": int(track.fine.shape[1])}
    (assets / f"{vid}.features.json").write_text(_dump(sidecar) + "\n")


def read_features(assets: Path, vid: str) -> FeatureTrack:
    meta = json.loads((assets / f"{vid}.features.json").read_text())
    tc, tf, dv = int(meta["T_c"]), int(meta["T_f"]), int(meta["d_v"])
    raw = (assets / f"{vid}.features.bin").read_bytes()
    expected = (tc + tf) * dv * 4
    if len(raw) != expected:
        raise CorpusFormatError(f"{vid}.features.bin: length mismatch, expected {expected} bytes, got {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    return FeatureTrack(flat[: tc * dv].reshape(tc, dv), flat[tc * dv :].reshape(tf, dv))


def write_instances(path: Path, instances: Iterable[DialogueInstance]) -> None:
    path.write_text("".join(_dump(i.to_json()) + "\n" for i in instances))


def read_instances(path: Path) -> List[DialogueInstance]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(DialogueInstance.from_json(json.loads(line)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise CorpusFormatError(f"{path}:{lineno}: {exc}") from exc
    return out


def save_corpus(path, corpus: Corpus) -> None:
    root = Path(path)
    assets = root / "assets"
    assets.mkdir(parents=True, exist_ok=True)
    if corpus.world is not None:
        (root / "world.json").write_text(_dump(corpus.world.to_dict()) + "\n")
    (root / "labels.json").write_text(_dump(corpus.labels.to_dict()) + "\n")
    corpus.vocab().save(root / "vocab.txt")
    write_instances(root / "instances.jsonl", corpus.instances)
    for vid in corpus.video_ids():
        (assets / f"{vid}.graph.json").write_text(_dump(scene_graph_to_json(corpus.graphs[vid], corpus.labels)) + "\n")
        write_features(assets, vid, corpus.features[vid])


def load_labels(root: Path) -> LabelSet:
    return LabelSet.from_dict(json.loads((Path(root) / "labels.json").read_text()))


def load_assets(root, vid: str, labels: LabelSet) -> Tuple[SceneGraph, FeatureTrack]:
    assets = Path(root) / "assets"
    if not (assets / f"{vid}.graph.json").exists():
        raise KeyError(f"no assets for video id {vid!r} under {assets}")
    try:
        doc = json.loads((assets / f"{vid}.graph.json").read_text())
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"{vid}.graph.json: line {exc.lineno}: {exc.msg}") from exc
    return scene_graph_from_json(doc, labels), read_features(assets, vid)


def load_corpus(path, instances_file: str = "instances.jsonl") -> Corpus:
    root = Path(path)
    labels = load_labels(root)
    world = None
    if (root / "world.json").exists():
        world = WorldConfig(**json.loads((root / "world.json").read_text()))
    instances = read_instances(root / instances_file)
    graphs, feats = {}, {}
    vids = sorted({i.video_id for i in instances} | {p.name[: -len(".graph.json")] for p in (root / "assets").glob("*.graph.json")})
    for vid in vids:
        graphs[vid], feats[vid] = load_assets(root, vid, labels)
    return Corpus(labels, instances, graphs, feats, world)


def kind_counts(instances: Iterable[DialogueInstance]) -> Dict[str, int]:
    counts = {k: 0 for k in QUESTION_KINDS}
    for inst in instances:
        counts[inst.kind] += 1
    return counts
