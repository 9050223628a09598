"""Scene graphs, the relational-node (RN) transform and question-aware graph reasoning.

Adjacency convention: ``adjacency[t, s] == 1`` iff there is a directed link
``s -> t``.  Row ``t`` therefore lists the sources feeding node ``t``; row sums
are in-degrees and column sums out-degrees.

The numeric routines work on padded batches (any leading shape, then a node
axis, then features) so the model can push every frame of every instance
through one call.  The single-frame functions below are thin wrappers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import ParamStore, Tensor

RELATION_CLASSES = ("spatial", "contact", "attention")
OBJECT, RELATION = "object", "relation"


class GraphValidationError(ValueError):
    pass


@dataclass(frozen=True)
class FrameGraph:
    objects: Tuple[Tuple[int, int], ...] = ()
    relations: Tuple[Tuple[int, int, int, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(tuple(o) for o in self.objects))
        object.__setattr__(self, "relations", tuple(tuple(r) for r in self.relations))

    def validate(self) -> None:
        ids = [node_id for node_id, _ in self.objects]
        if len(set(ids)) != len(ids):
            raise GraphValidationError(f"duplicate node ids in frame: {ids}")
        known = set(ids)
        for src, rel, dst, cls in self.relations:
            missing = [n for n in (src, dst) if n not in known]
            if missing:
                raise GraphValidationError(
                    f"relation ({src}, {rel}, {dst}) references unknown node id(s) {missing}; frame has {sorted(known)}"
                )
            if cls not in RELATION_CLASSES:
                raise GraphValidationError(f"relation class {cls!r} not in {RELATION_CLASSES}")


@dataclass(frozen=True)
class SceneGraph:
    frames: Tuple[FrameGraph, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))

    def validate(self) -> None:
        for frame in self.frames:
            frame.validate()


@dataclass(frozen=True)
class LabelSet:
    """Label vocabularies for objects and relations (index = label id)."""

    objects: Tuple[str, ...]
    relations: Tuple[str, ...]
    relation_classes: Tuple[str, ...]

    def object_id(self, label: str) -> int:
        try:
            return self.objects.index(label)
        except ValueError:
            raise GraphValidationError(f"unknown object label {label!r}") from None

    def relation_id(self, label: str) -> int:
        try:
            return self.relations.index(label)
        except ValueError:
            raise GraphValidationError(f"unknown relation label {label!r}") from None

    def to_dict(self) -> dict:
        return {
            "objects": list(self.objects),
            "relations": list(self.relations),
            "relation_classes": list(self.relation_classes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSet":
        return cls(tuple(d["objects"]), tuple(d["relations"]), tuple(d["relation_classes"]))


def scene_graph_to_json(graph: SceneGraph, labels: LabelSet) -> dict:
    return {
        "frames": [
            {
                "objects": [[node_id, labels.objects[label]] for node_id, label in f.objects],
                "relations": [[s, labels.relations[r], d, cls] for s, r, d, cls in f.relations],
            }
            for f in graph.frames
        ]
    }


def scene_graph_from_json(doc: dict, labels: LabelSet) -> SceneGraph:
    if not isinstance(doc, dict) or "frames" not in doc:
        raise GraphValidationError("scene graph document must be an object with a 'frames' list")
    frames = []
    for i, f in enumerate(doc["frames"]):
        try:
            objects = tuple((int(n), labels.object_id(lab)) for n, lab in f["objects"])
            relations = tuple((int(s), labels.relation_id(r), int(d), str(c)) for s, r, d, c in f["relations"])
        except (KeyError, TypeError, ValueError) as exc:
            raise GraphValidationError(f"frame {i}: {exc}") from exc
        frame = FrameGraph(objects, relations)
        frame.validate()
        frames.append(frame)
    return SceneGraph(tuple(frames))


def dumps_scene_graph(graph: SceneGraph, labels: LabelSet) -> str:
    return json.dumps(scene_graph_to_json(graph, labels), sort_keys=True, separators=(",", ":"))


# ----------------------------------------------------------------------------
# RN transform
# ----------------------------------------------------------------------------


@dataclass
class RNGraph:
    """Object nodes (in node-id order) followed by one relational node per relation."""

    node_kinds: List[str]
    node_labels: List[int]
    node_ids: List[int]
    adjacency: np.ndarray
    relation_classes: List[str] = field(default_factory=list)
    node_features: Optional[Tensor] = None

    @property
    def num_nodes(self) -> int:
        return len(self.node_kinds)

    @property
    def num_relations(self) -> int:
        return self.node_kinds.count(RELATION)

    @property
    def degree(self) -> np.ndarray:
        return np.diag((self.adjacency + np.eye(self.num_nodes)).sum(axis=1))

    def relations(self) -> List[Tuple[int, int, int, str]]:
        """Recover ``(src_id, rel_label, dst_id, class)`` from the relational nodes."""
        out = []
        k = 0
        for idx, kind in enumerate(self.node_kinds):
            if kind != RELATION:
                continue
            src = int(np.flatnonzero(self.adjacency[idx])[0])
            dst = int(np.flatnonzero(self.adjacency[:, idx])[0])
            out.append((self.node_ids[src], self.node_labels[idx], self.node_ids[dst], self.relation_classes[k]))
            k += 1
        return out


def rn_transform(frame: FrameGraph) -> RNGraph:
    frame.validate()
    objects = sorted(frame.objects)
    position = {node_id: i for i, (node_id, _) in enumerate(objects)}
    n, m = len(objects), len(frame.relations)
    adj = np.zeros((n + m, n + m))
    kinds = [OBJECT] * n + [RELATION] * m
    labels = [label for _, label in objects]
    ids = [node_id for node_id, _ in objects]
    for k, (src, rel, dst, _) in enumerate(frame.relations):
        r = n + k
        adj[r, position[src]] = 1.0
        adj[position[dst], r] = 1.0
        labels.append(rel)
        ids.append(-(k + 1))
    return RNGraph(kinds, labels, ids, adj, [c for *_, c in frame.relations])


# ----------------------------------------------------------------------------
# batched core
# ----------------------------------------------------------------------------


def embed_nodes(labels: np.ndarray, is_relation: np.ndarray, object_table: Tensor, relation_table: Tensor) -> Tensor:
    """Object rows from the object-label table, relational rows from the relation-label table."""
    labels = np.asarray(labels, dtype=np.int64)
    is_relation = np.asarray(is_relation, dtype=bool)
    obj = T.embedding_lookup(object_table, np.where(is_relation, 0, labels))
    rel = T.embedding_lookup(relation_table, np.where(is_relation, labels, 0))
    return T.where(is_relation[..., None], rel, obj)


def propagate_similarity(s_c: Tensor, adjacency: np.ndarray) -> Tensor:
    """``M_D^-1 (M_A + I) s_c`` with ``M_D`` the row-degree of ``M_A + I``."""
    k = adjacency.shape[-1]
    a_hat = np.asarray(adjacency, dtype=T.dtype()) + np.eye(k, dtype=T.dtype())
    norm = a_hat / a_hat.sum(axis=-1, keepdims=True)
    return T.reshape(T.matmul(T.Tensor(norm), T.reshape(s_c, s_c.shape + (1,))), s_c.shape)


def masked_argmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Argmax over the last axis ignoring masked slots; ties go to the lowest index."""
    return np.argmax(np.where(mask, scores, -np.inf), axis=-1)


def aggregate(features: Tensor, scores: np.ndarray, mask: np.ndarray, empty: Tensor) -> Tensor:
    """Pick the highest-scoring valid row per graph; graphs with no valid rows get ``empty``."""
    mask = np.asarray(mask, dtype=bool)
    if features.shape[-2] == 0:
        return T.add(T.Tensor(np.zeros(mask.shape[:-1] + (empty.shape[-1],))), empty)
    picked = T.select_rows(features, masked_argmax(scores, mask))
    return T.where(mask.any(axis=-1)[..., None], picked, empty)


def _init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    return rng.normal(0.0, fan_in**-0.5, size=shape)


class GraphAttention:
    """Question-aware multi-head attention over RN graphs.

    Per head, a target ``j`` attends over its sources ``X_j`` with logits
    ``sigmoid(w_q.q + w_s.x_i + w_t.x_j)``; messages use a per-head value
    projection, heads are concatenated and passed through a two-layer FFN,
    and the result is added to ``x_j``.
    """

    def __init__(
        self,
        params: ParamStore,
        prefix: str,
        d: int,
        heads: int,
        rng: np.random.Generator,
        self_loops: bool = True,
        group: str = "gvp",
    ):
        if d % heads:
            raise ValueError(f"heads ({heads}) must divide width ({d})")
        self.d, self.heads, self.self_loops = d, heads, self_loops
        p = prefix
        self.w_query = params.add(f"{p}.w_query", _init(rng, d, (d, heads)), group)
        self.w_source = params.add(f"{p}.w_source", _init(rng, d, (d, heads)), group)
        self.w_target = params.add(f"{p}.w_target", _init(rng, d, (d, heads)), group)
        self.w_value = params.add(f"{p}.w_value", _init(rng, d, (d, d)), group)
        self.ffn_in = params.add(f"{p}.ffn_in", _init(rng, d, (d, 2 * d)), group)
        self.ffn_in_b = params.add(f"{p}.ffn_in_b", np.zeros(2 * d), group)
        self.ffn_out = params.add(f"{p}.ffn_out", _init(rng, 2 * d, (2 * d, d)), group)
        self.ffn_out_b = params.add(f"{p}.ffn_out_b", np.zeros(d), group)

    def source_mask(self, adjacency: np.ndarray, node_mask: np.ndarray) -> np.ndarray:
        """``[..., i, j]``: True iff source ``i`` feeds target ``j``."""
        src = np.swapaxes(np.asarray(adjacency) > 0, -1, -2)
        if self.self_loops:
            src = src | np.eye(src.shape[-1], dtype=bool)
        node_mask = np.asarray(node_mask, dtype=bool)
        return src & node_mask[..., :, None] & node_mask[..., None, :]

    def weights(self, x: Tensor, q: Tensor, adjacency: np.ndarray, node_mask: np.ndarray) -> Tensor:
        """Attention ``alpha[..., h, i, j]``; all-zero columns for targets with no source."""
        lead = x.ndim - 2
        s_q = T.matmul(q, self.w_query)  # [..., H]
        s_q = T.reshape(s_q, s_q.shape + (1, 1))
        s_src = T.transpose(T.matmul(x, self.w_source), tuple(range(lead)) + (lead + 1, lead))
        s_src = T.reshape(s_src, s_src.shape + (1,))  # [..., H, K, 1]
        s_tgt = T.transpose(T.matmul(x, self.w_target), tuple(range(lead)) + (lead + 1, lead))
        s_tgt = T.reshape(s_tgt, s_tgt.shape[:-1] + (1, s_tgt.shape[-1]))  # [..., H, 1, K]
        logits = T.sigmoid(T.add(T.add(s_q, s_src), s_tgt))
        mask = self.source_mask(adjacency, node_mask)[..., None, :, :]
        bias = np.where(mask, 0.0, T.MASK_VALUE)
        alpha = T.softmax(T.add(logits, bias), axis=-2)
        has_source = mask.any(axis=-2, keepdims=True)
        return T.mul(alpha, has_source.astype(T.dtype()))

    def __call__(self, x: Tensor, q: Tensor, adjacency: np.ndarray, node_mask: np.ndarray) -> Tensor:
        alpha = self.weights(x, q, adjacency, node_mask)
        lead = x.ndim - 2
        k, h, dh = x.shape[-2], self.heads, self.d // self.heads
        v = T.reshape(T.matmul(x, self.w_value), x.shape[:-1] + (h, dh))
        v = T.transpose(v, tuple(range(lead)) + (lead + 1, lead, lead + 2))  # [..., H, K, dh]
        msg = T.matmul(T.swapaxes(alpha, -1, -2), v)  # [..., H, K_tgt, dh]
        msg = T.transpose(msg, tuple(range(lead)) + (lead + 1, lead, lead + 2))
        msg = T.reshape(msg, x.shape[:-2] + (k, self.d))
        hidden = T.relu(T.linear(msg, self.ffn_in, self.ffn_in_b))
        return T.add(x, T.linear(hidden, self.ffn_out, self.ffn_out_b))


class TripletProjection:
    """``[emb(src), emb(rel), emb(dst)]`` (width 3d) projected to width d."""

    def __init__(self, params: ParamStore, prefix: str, d: int, rng: np.random.Generator, group: str = "gvp"):
        self.weight = params.add(f"{prefix}.weight", _init(rng, 3 * d, (3 * d, d)), group)
        self.bias = params.add(f"{prefix}.bias", np.zeros(d), group)

    def __call__(self, src, rel, dst, object_table: Tensor, relation_table: Tensor) -> Tensor:
        parts = [
            T.embedding_lookup(object_table, src),
            T.embedding_lookup(relation_table, rel),
            T.embedding_lookup(object_table, dst),
        ]
        return T.linear(T.concat(parts, axis=-1), self.weight, self.bias)


# ----------------------------------------------------------------------------
# single-frame API
# ----------------------------------------------------------------------------


def embed_rn_nodes(rn: RNGraph, object_table: Tensor, relation_table: Tensor) -> Tensor:
    is_rel = np.array([k == RELATION for k in rn.node_kinds], dtype=bool)
    feats = embed_nodes(np.array(rn.node_labels, dtype=np.int64), is_rel, object_table, relation_table)
    rn.node_features = feats
    return feats


def node_similarity(rn: RNGraph, q_vec: Tensor) -> Tensor:
    if rn.node_features is None:
        raise ValueError("RN graph has no node features; call embed_rn_nodes first")
    s_c = T.cosine_similarity(rn.node_features, q_vec)
    return propagate_similarity(s_c, rn.adjacency)


def graph_attention(rn: RNGraph, q_vec: Tensor, layer: GraphAttention) -> Tensor:
    mask = np.ones(rn.num_nodes, dtype=bool)
    return layer(rn.node_features, q_vec, rn.adjacency, mask)


def graph_aggregate(x_prime: Tensor, s_n, empty: Optional[Tensor] = None) -> Tensor:
    if x_prime.shape[0] == 0:
        if empty is None:
            raise ValueError("empty graph and no empty-graph embedding supplied")
        return empty
    scores = s_n.data if isinstance(s_n, Tensor) else np.asarray(s_n)
    if scores.shape[0] != x_prime.shape[0]:
        raise ValueError(f"score length {scores.shape[0]} != node count {x_prime.shape[0]}")
    return T.select_rows(x_prime, np.array(np.argmax(scores)))


@dataclass
class TripletSet:
    triplets: List[Tuple[int, int, int]]
    features: Tensor


def build_triplets(
    frame: FrameGraph, object_table: Tensor, relation_table: Tensor, proj: TripletProjection
) -> TripletSet:
    frame.validate()
    label = dict(frame.objects)
    triplets = [(s, r, d) for s, r, d, _ in frame.relations]
    if not triplets:
        return TripletSet([], T.Tensor(np.zeros((0, proj.weight.shape[1]))))
    src = np.array([label[s] for s, _, _ in triplets])
    rel = np.array([r for _, r, _ in triplets])
    dst = np.array([label[d] for _, _, d in triplets])
    return TripletSet(triplets, proj(src, rel, dst, object_table, relation_table))


def triplet_similarity(t: TripletSet, q_vec: Tensor) -> Optional[Tensor]:
    """Cosine of each triplet feature with the question; ``None`` for an empty set."""
    if not t.triplets:
        return None
    return T.cosine_similarity(t.features, q_vec)


def triplet_aggregate(t: TripletSet, s_t, empty: Optional[Tensor] = None) -> Tensor:
    return graph_aggregate(t.features, s_t if s_t is not None else np.zeros(0), empty)


# ----------------------------------------------------------------------------
# padding scene graphs into batches
# ----------------------------------------------------------------------------


@dataclass
class GraphBatch:
    """Padded per-frame RN graphs and triplets for a batch of videos.

    Shapes: ``B`` videos, ``F`` frames, ``K`` RN nodes, ``R`` triplets.
    """

    node_labels: np.ndarray  # [B, F, K]
    node_is_relation: np.ndarray  # [B, F, K]
    node_mask: np.ndarray  # [B, F, K]
    adjacency: np.ndarray  # [B, F, K, K]
    triplet_src: np.ndarray  # [B, F, R] object label ids
    triplet_rel: np.ndarray  # [B, F, R]
    triplet_dst: np.ndarray  # [B, F, R]
    triplet_mask: np.ndarray  # [B, F, R]
    frame_mask: np.ndarray  # [B, F]


def batch_graphs(graphs: Sequence[SceneGraph]) -> GraphBatch:
    rns = [[rn_transform(f) for f in g.frames] for g in graphs]
    b = len(graphs)
    f = max([len(g.frames) for g in graphs] + [1])
    k = max([rn.num_nodes for rs in rns for rn in rs] + [1])
    r = max([len(fr.relations) for g in graphs for fr in g.frames] + [1])
    out = GraphBatch(
        node_labels=np.zeros((b, f, k), dtype=np.int64),
        node_is_relation=np.zeros((b, f, k), dtype=bool),
        node_mask=np.zeros((b, f, k), dtype=bool),
        adjacency=np.zeros((b, f, k, k)),
        triplet_src=np.zeros((b, f, r), dtype=np.int64),
        triplet_rel=np.zeros((b, f, r), dtype=np.int64),
        triplet_dst=np.zeros((b, f, r), dtype=np.int64),
        triplet_mask=np.zeros((b, f, r), dtype=bool),
        frame_mask=np.zeros((b, f), dtype=bool),
    )
    for i, (g, rs) in enumerate(zip(graphs, rns)):
        for j, (frame, rn) in enumerate(zip(g.frames, rs)):
            n = rn.num_nodes
            out.frame_mask[i, j] = True
            out.node_labels[i, j, :n] = rn.node_labels
            out.node_is_relation[i, j, :n] = [kind == RELATION for kind in rn.node_kinds]
            out.node_mask[i, j, :n] = True
            out.adjacency[i, j, :n, :n] = rn.adjacency
            label = dict(frame.objects)
            for t, (s, rel, d, _) in enumerate(frame.relations):
                out.triplet_src[i, j, t] = label[s]
                out.triplet_rel[i, j, t] = rel
                out.triplet_dst[i, j, t] = label[d]
                out.triplet_mask[i, j, t] = True
    return out


def degree_counts(rn: RNGraph) -> Dict[str, np.ndarray]:
    return {"in": rn.adjacency.sum(axis=1), "out": rn.adjacency.sum(axis=0)}
