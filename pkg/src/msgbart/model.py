"""Full model: text encoder-decoder + graph/video fusion + multi-pointer output.

The forward pass is split in two so decoding can reuse the encoder side:

* :meth:`MsgBart.encode` runs everything that does not depend on the answer
  prefix (text encoder, video/graph encoders, fused memory, video/graph
  decoders) and returns a :class:`Context`.
* :meth:`MsgBart.decode` runs the text decoder over a prefix, fuses the GVP
  decoder output and mixes the two vocabulary distributions.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .data import Corpus, DialogueInstance
from .gvp import GVP, FeatureTrack, assemble_memory
from .lm import BOS, EOS, PAD, LMConfig, MiniBart, Vocab, encoder_layout
from .pointer import POINTER_MODES, POINTER_PAIRINGS, PointerNetwork, mix, pointer_values
from .scenegraph import GraphAttention, GraphBatch, SceneGraph, TripletProjection, aggregate, batch_graphs, embed_nodes, propagate_similarity
from .tensor import ParamStore, Tensor

CHECKPOINT_MAGIC = b"MSGBART1"
PENALTY_STYLES = ("plain", "gnmt")
LABEL_EMBEDDINGS = ("shared", "separate")


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    lm: LMConfig = field(default_factory=LMConfig)
    feature_dim: int = 16
    graph_heads: int = 4
    pointer_mode: str = "multi"
    pointer_pairing: str = "as_printed"
    self_loops: bool = True
    use_video_encoder: bool = True
    use_graph_encoder: bool = True
    use_video_decoder: bool = True
    use_graph_decoder: bool = True
    use_gat: bool = True
    use_node_similarity: bool = True
    use_triplet_similarity: bool = True
    max_answer_len: int = 6
    label_embeddings: str = "shared"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.lm, dict):
            self.lm = LMConfig(**self.lm)
        if self.pointer_mode not in POINTER_MODES:
            raise ValueError(f"pointer_mode must be one of {POINTER_MODES}, got {self.pointer_mode!r}")
        if self.pointer_pairing not in POINTER_PAIRINGS:
            raise ValueError(f"pointer_pairing must be one of {POINTER_PAIRINGS}, got {self.pointer_pairing!r}")
        if self.label_embeddings not in LABEL_EMBEDDINGS:
            raise ValueError(f"label_embeddings must be one of {LABEL_EMBEDDINGS}, got {self.label_embeddings!r}")
        if self.lm.d_model % self.graph_heads:
            raise ValueError(f"graph_heads ({self.graph_heads}) must divide d_model ({self.lm.d_model})")

    def to_dict(self) -> dict:
        return asdict(self)


# ----------------------------------------------------------------------------
# batches
# ----------------------------------------------------------------------------


@dataclass
class Batch:
    enc_ids: np.ndarray  # [B, L]
    enc_mask: np.ndarray  # [B, L]
    question_mask: np.ndarray  # [B, L]
    dec_in: np.ndarray  # [B, T]
    dec_target: np.ndarray  # [B, T]
    dec_mask: np.ndarray  # [B, T]
    coarse: np.ndarray  # [B, T_c, d_v]
    coarse_mask: np.ndarray  # [B, T_c]
    fine: np.ndarray  # [B, T_f, d_v]
    fine_mask: np.ndarray  # [B, T_f]
    graphs: GraphBatch

    @property
    def size(self) -> int:
        return self.enc_ids.shape[0]


def _pad(rows: Sequence[Sequence[int]], value: int = PAD) -> Tuple[np.ndarray, np.ndarray]:
    width = max([len(r) for r in rows] + [1])
    out = np.full((len(rows), width), value, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, r in enumerate(rows):
        out[i, : len(r)] = r
        mask[i, : len(r)] = True
    return out, mask


def _pad_features(arrays: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    length = max(a.shape[0] for a in arrays)
    out = np.zeros((len(arrays), length, arrays[0].shape[1]))
    mask = np.zeros((len(arrays), length), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, : a.shape[0]] = a
        mask[i, : a.shape[0]] = True
    return out, mask


def collate(
    instances: Sequence[DialogueInstance],
    graphs: Sequence[SceneGraph],
    features: Sequence[FeatureTrack],
    vocab: Vocab,
    max_len: int,
) -> Batch:
    enc_rows, q_spans, dec_rows = [], [], []
    for inst in instances:
        ids, span = encoder_layout(vocab.tokenize(inst.history_text()), vocab.tokenize(inst.question), max_len)
        enc_rows.append(ids)
        q_spans.append(span)
        dec_rows.append([BOS, *vocab.tokenize(inst.answer), EOS])
    enc_ids, enc_mask = _pad(enc_rows)
    q_mask = np.zeros_like(enc_mask)
    for i, (s, e) in enumerate(q_spans):
        q_mask[i, s:e] = True
    dec, dec_mask = _pad([r[:-1] for r in dec_rows])
    tgt, _ = _pad([r[1:] for r in dec_rows])
    coarse, coarse_mask = _pad_features([f.coarse for f in features])
    fine, fine_mask = _pad_features([f.fine for f in features])
    return Batch(enc_ids, enc_mask, q_mask, dec, tgt, dec_mask, coarse, coarse_mask, fine, fine_mask, batch_graphs(graphs))


def collate_corpus(instances: Sequence[DialogueInstance], corpus: Corpus, vocab: Vocab, max_len: int) -> Batch:
    return collate(
        instances,
        [corpus.graphs[i.video_id] for i in instances],
        [corpus.features[i.video_id] for i in instances],
        vocab,
        max_len,
    )


# ----------------------------------------------------------------------------
# model
# ----------------------------------------------------------------------------


@dataclass
class Context:
    """Prefix-independent state for a batch."""

    y_en: Tensor
    enc_mask: np.ndarray
    q_vec: Tensor
    memory: Tensor
    memory_mask: Optional[np.ndarray]
    segments: Dict[str, Tuple[int, int]]
    y_enc: Tensor
    y_v_de: Optional[Tensor]
    v_de_mask: Optional[np.ndarray]
    y_g_de: Optional[Tensor]
    g_de_mask: Optional[np.ndarray]
    node_scores: Optional[np.ndarray] = None
    triplet_scores: Optional[np.ndarray] = None

    def take(self, rows: Sequence[int]) -> "Context":
        """Copy of selected batch rows, detached from the graph."""
        rows = np.asarray(rows)
        t = lambda x: None if x is None else T.Tensor(x.data[rows])
        a = lambda x: None if x is None else x[rows]
        return Context(
            t(self.y_en), a(self.enc_mask), t(self.q_vec), t(self.memory), a(self.memory_mask), self.segments,
            t(self.y_enc), t(self.y_v_de), a(self.v_de_mask), t(self.y_g_de), a(self.g_de_mask),
        )


@dataclass
class DecodeOutput:
    dist: Tensor  # [B, T, V] mixed
    dist_base: Tensor
    dist_gvp: Tensor
    p1: Tensor
    p2: Tensor
    y_base: Tensor
    y_gvp: Tensor


def label_token_ids(vocab: Vocab, labels) -> Dict[str, List[int]]:
    """Vocabulary ids of every object and relation label word."""
    missing = [w for w in (*labels.objects, *labels.relations) if w not in vocab.stoi]
    if missing:
        raise ValueError(f"label words missing from the vocabulary: {missing}")
    return {"objects": [vocab.stoi[w] for w in labels.objects], "relations": [vocab.stoi[w] for w in labels.relations]}


class MsgBart:
    """Scene-graph label embeddings are either the text embeddings of the
    label words (``label_embeddings="shared"``, the default, which puts nodes
    and questions in one space) or separate tables (``"separate"``).
    """

    def __init__(
        self,
        cfg: ModelConfig,
        vocab_size: int,
        num_objects: int,
        num_relations: int,
        label_tokens: Optional[Dict[str, List[int]]] = None,
    ):
        self.cfg = cfg
        self.vocab_size, self.num_objects, self.num_relations = vocab_size, num_objects, num_relations
        d = cfg.lm.d_model
        rng = np.random.default_rng(cfg.seed)
        self.params = ParamStore()
        self.lm = MiniBart(self.params, cfg.lm, vocab_size, rng)
        self.gvp = GVP(self.params, d, cfg.feature_dim, cfg.lm.heads, rng, cfg.lm.norm_style, dropout=cfg.lm.dropout)
        self.label_tokens = None
        if cfg.label_embeddings == "shared":
            if label_tokens is None:
                raise ValueError("shared label embeddings need the label token ids")
            if len(label_tokens["objects"]) != num_objects or len(label_tokens["relations"]) != num_relations:
                raise ValueError("label token ids do not match the label counts")
            self.label_tokens = {k: [int(i) for i in v] for k, v in label_tokens.items()}
        else:
            self._object_table = self.params.add("graph.object_emb", rng.normal(0.0, 1.0, size=(num_objects, d)), "gvp")
            self._relation_table = self.params.add("graph.relation_emb", rng.normal(0.0, 1.0, size=(num_relations, d)), "gvp")
        self.empty_graph = self.params.add("graph.empty", rng.normal(0.0, 1.0, size=d), "gvp")
        self.gat = GraphAttention(self.params, "graph.gat", d, cfg.graph_heads, rng, cfg.self_loops)
        self.triplet_proj = TripletProjection(self.params, "graph.triplet", d, rng)
        self.pointer = PointerNetwork(self.params, d, rng)

    def label_tables(self) -> Tuple[Tensor, Tensor]:
        """Object and relation label embeddings, ``[num_objects, d]`` and ``[num_relations, d]``."""
        if self.label_tokens is None:
            return self._object_table, self._relation_table
        scale = math.sqrt(self.cfg.lm.d_model)
        emb = self.lm.embedding
        return (
            T.mul(T.embedding_lookup(emb, np.array(self.label_tokens["objects"])), scale),
            T.mul(T.embedding_lookup(emb, np.array(self.label_tokens["relations"])), scale),
        )

    # -- encoder side ---------------------------------------------------------

    def encode(self, batch: Batch) -> Context:
        cfg = self.cfg
        object_table, relation_table = self.label_tables()
        y_en = self.lm.encode_ids(batch.enc_ids, batch.enc_mask)
        q_vec = T.mean_pool(y_en, axis=1, mask=batch.question_mask)
        blocks: List[Tuple[str, Tensor, Optional[np.ndarray]]] = [("text", y_en, batch.enc_mask)]
        if cfg.use_video_encoder:
            v_c = self.gvp.project_features(batch.coarse)
            blocks.append(("video", self.gvp.video_encoder(v_c, y_en, batch.enc_mask), batch.coarse_mask))
        g = batch.graphs
        q_frames = T.reshape(q_vec, (q_vec.shape[0], 1, q_vec.shape[1]))
        q_nodes = T.reshape(q_vec, (q_vec.shape[0], 1, 1, q_vec.shape[1]))
        node_scores = triplet_scores = None
        if cfg.use_graph_encoder:
            x = embed_nodes(g.node_labels, g.node_is_relation, object_table, relation_table)
            if cfg.use_node_similarity:
                s_c = T.cosine_similarity(T.Tensor(x.data), T.Tensor(q_nodes.data))
                node_scores = propagate_similarity(s_c, g.adjacency).data
            else:
                node_scores = np.zeros(g.node_mask.shape)
            x_prime = self.gat(x, q_frames, g.adjacency, g.node_mask) if cfg.use_gat else x
            g_r = aggregate(x_prime, node_scores, g.node_mask, self.empty_graph)
            blocks.append(("graph", self.gvp.graph_encoder(g_r, y_en, batch.enc_mask), g.frame_mask))
        mem = assemble_memory(blocks)
        y_enc = T.mean_pool(mem.memory, axis=1, mask=mem.mask)

        y_v_de = y_g_de = None
        if cfg.use_video_decoder:
            v_f = self.gvp.project_features(batch.fine)
            y_v_de = self.gvp.video_decoder(v_f, y_en, batch.enc_mask)
        if cfg.use_graph_decoder:
            feats = self.triplet_proj(g.triplet_src, g.triplet_rel, g.triplet_dst, object_table, relation_table)
            if cfg.use_triplet_similarity:
                triplet_scores = T.cosine_similarity(T.Tensor(feats.data), T.Tensor(q_nodes.data)).data
            else:
                triplet_scores = np.zeros(g.triplet_mask.shape)
            g_t = aggregate(feats, triplet_scores, g.triplet_mask, self.empty_graph)
            y_g_de = self.gvp.graph_decoder(g_t, y_en, batch.enc_mask)
        return Context(
            y_en, batch.enc_mask, q_vec, mem.memory, mem.mask, mem.segments, y_enc,
            y_v_de, batch.fine_mask if y_v_de is not None else None,
            y_g_de, g.frame_mask if y_g_de is not None else None,
            node_scores, triplet_scores,
        )

    # -- decoder side ---------------------------------------------------------

    def decode(self, ctx: Context, prefix_ids: np.ndarray, prefix_mask: Optional[np.ndarray] = None) -> DecodeOutput:
        prefix_ids = np.asarray(prefix_ids)
        y_b = self.lm.decode_ids(prefix_ids, ctx.memory, ctx.memory_mask, prefix_mask)
        y_g = self.gvp.decoder_fuse(y_b, ctx.y_v_de, ctx.y_g_de, ctx.v_de_mask, ctx.g_de_mask)
        dist_b = self.lm.vocab_project(y_b)
        dist_g = self.lm.vocab_project(y_g)
        y_prev = T.embedding_lookup(self.lm.embedding, prefix_ids)
        lead = lambda v: T.reshape(v, (v.shape[0], 1, v.shape[1]))
        p1_logit, p2_logit = self.pointer.logits(y_b, y_g, y_prev, lead(ctx.y_enc), lead(ctx.q_vec))
        p1, p2 = pointer_values(p1_logit, p2_logit, self.cfg.pointer_mode)
        dist = mix(p1, p2, dist_g, dist_b, self.cfg.pointer_pairing, validate=False)
        return DecodeOutput(dist, dist_b, dist_g, p1, p2, y_b, y_g)

    def forward(self, batch: Batch) -> Tensor:
        """Teacher-forced mixed distributions ``[B, T, V]``."""
        return self.decode(self.encode(batch), batch.dec_in, batch.dec_mask).dist

    def loss(self, batch: Batch) -> Tensor:
        return sequence_loss(self.forward(batch), batch.dec_target, batch.dec_mask)

    # -- decoding -------------------------------------------------------------

    def step_fn(self, ctx: Context) -> Callable[[List[List[int]]], np.ndarray]:
        """Next-token distributions for equal-length prefixes sharing one single-row context."""

        def step(prefixes: List[List[int]]) -> np.ndarray:
            c = ctx.take([0] * len(prefixes))
            return self.decode(c, np.array(prefixes)).dist.data[:, -1, :]

        return step

    def greedy_batch(self, batch: Batch, max_len: Optional[int] = None) -> List[List[int]]:
        """Greedy decoding for a whole batch; each output ends at its first EOS (kept)."""
        max_len = max_len or self.cfg.max_answer_len
        ctx = self.encode(batch)
        prefix = np.full((batch.size, 1), BOS, dtype=np.int64)
        done = np.zeros(batch.size, dtype=bool)
        for _ in range(max_len):
            probs = self.decode(ctx, prefix).dist.data[:, -1, :]
            nxt = np.where(done, PAD, np.argmax(probs, axis=-1))
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
        out = []
        for row in prefix[:, 1:]:
            toks = []
            for tok in row:
                if tok == PAD:
                    break
                toks.append(int(tok))
                if tok == EOS:
                    break
            out.append(toks)
        return out

    # -- checkpoints ----------------------------------------------------------

    def header(self, vocab: Optional[Vocab] = None, extra: Optional[dict] = None) -> dict:
        manifest, offset = [], 0
        for name, t in self.params.items():
            manifest.append({"name": name, "shape": list(t.shape), "offset": offset})
            offset += int(t.data.size) * 4
        head = {
            "format": "msgbart-checkpoint/1",
            "config": self.cfg.to_dict(),
            "sizes": {"vocab": self.vocab_size, "objects": self.num_objects, "relations": self.num_relations},
            "params": manifest,
        }
        if self.label_tokens is not None:
            head["label_tokens"] = self.label_tokens
        if vocab is not None:
            head["vocab"] = vocab.itos
        if extra:
            head["extra"] = extra
        return head

    def save(self, path, vocab: Optional[Vocab] = None, extra: Optional[dict] = None) -> None:
        head = json.dumps(self.header(vocab, extra), sort_keys=True, separators=(",", ":")).encode()
        body = b"".join(np.ascontiguousarray(t.data, dtype="<f4").tobytes() for _, t in self.params.items())
        Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + body)

    @classmethod
    def load(cls, path) -> Tuple["MsgBart", dict]:
        raw = Path(path).read_bytes()
        if raw[:8] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", raw[8:16])
        head = json.loads(raw[16 : 16 + hlen])
        body = raw[16 + hlen :]
        sizes = head["sizes"]
        model = cls(ModelConfig(**head["config"]), sizes["vocab"], sizes["objects"], sizes["relations"], head.get("label_tokens"))
        names = [p["name"] for p in head["params"]]
        if names != model.params.names():
            missing = sorted(set(model.params.names()) ^ set(names))
            raise CheckpointError(f"{path}: parameter manifest mismatch: {missing}")
        expected = sum(int(np.prod(p["shape"])) * 4 for p in head["params"])
        if len(body) != expected:
            raise CheckpointError(f"{path}: body is {len(body)} bytes, manifest needs {expected}")
        for p in head["params"]:
            t = model.params[p["name"]]
            if list(t.shape) != p["shape"]:
                raise CheckpointError(f"{path}: {p['name']} has shape {p['shape']}, model expects {list(t.shape)}")
            n = int(np.prod(p["shape"]))
            t.data = np.frombuffer(body, dtype="<f4", count=n, offset=p["offset"]).reshape(p["shape"]).astype(T.dtype())
        return model, head


def sequence_loss(dist: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean over valid positions of ``-log dist[t, y_t]``."""
    targets = np.asarray(targets)
    if dist.shape[:-1] != targets.shape:
        raise ValueError(f"distribution positions {dist.shape[:-1]} != target shape {targets.shape}")
    return T.nll(dist, targets, mask)


def log_prob_floor(p: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(p, T.PROB_FLOOR))


# ----------------------------------------------------------------------------
# single-instance decoding
# ----------------------------------------------------------------------------


@dataclass
class Hypothesis:
    tokens: List[int]
    logprob: float
    finished: bool = False


def length_penalty(length: int, alpha: float, style: str = "plain") -> float:
    if style == "plain":
        return float(max(length, 1)) ** alpha
    if style == "gnmt":
        return ((5.0 + length) / 6.0) ** alpha
    raise ValueError(f"penalty style must be one of {PENALTY_STYLES}, got {style!r}")


def normalized_score(h: Hypothesis, alpha: float, style: str = "plain") -> float:
    return h.logprob / length_penalty(len(h.tokens), alpha, style)


def greedy_search(step: Callable[[List[List[int]]], np.ndarray], max_len: int, bos: int = BOS, eos: int = EOS) -> Hypothesis:
    tokens: List[int] = []
    logprob = 0.0
    for _ in range(max_len):
        probs = step([[bos, *tokens]])[0]
        tok = int(np.argmax(probs))
        tokens.append(tok)
        logprob += float(log_prob_floor(probs[tok]))
        if tok == eos:
            return Hypothesis(tokens, logprob, True)
    return Hypothesis(tokens, logprob, True)


def beam_search(
    step: Callable[[List[List[int]]], np.ndarray],
    beam_size: int = 6,
    max_len: int = 6,
    penalty: float = 0.6,
    style: str = "plain",
    bos: int = BOS,
    eos: int = EOS,
) -> Tuple[Hypothesis, List[Hypothesis]]:
    """Beam search; returns the best finished hypothesis and all finished ones.

    At every step the ``beam_size`` best expansions by cumulative log-prob are
    kept (ties: lower token id, then lower hypothesis index).  Expansions
    ending in ``eos`` finish; hypotheses still open at ``max_len`` are closed.
    Finished hypotheses are ranked by ``logprob / length_penalty(len)``.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    alive = [Hypothesis([], 0.0)]
    finished: List[Hypothesis] = []
    for depth in range(max_len):
        logp = log_prob_floor(step([[bos, *h.tokens] for h in alive]))
        scores = np.array([h.logprob for h in alive])[:, None] + logp
        hyp_idx, tok_idx = np.meshgrid(np.arange(len(alive)), np.arange(logp.shape[1]), indexing="ij")
        order = np.lexsort((hyp_idx.ravel(), tok_idx.ravel(), -scores.ravel()))[:beam_size]
        nxt = []
        for flat in order:
            i, tok = divmod(int(flat), logp.shape[1])
            h = Hypothesis(alive[i].tokens + [tok], float(scores[i, tok]))
            if tok == eos or depth == max_len - 1:
                h.finished = True
                finished.append(h)
            else:
                nxt.append(h)
        alive = nxt
        if not alive:
            break
    ranked = sorted(
        range(len(finished)),
        key=lambda k: (-normalized_score(finished[k], penalty, style), finished[k].tokens, k),
    )
    return finished[ranked[0]], finished


def strip_eos(tokens: Sequence[int]) -> List[int]:
    out = []
    for t in tokens:
        if t == EOS:
            break
        out.append(int(t))
    return out


def instance_step(model: MsgBart, instance: DialogueInstance, graph: SceneGraph, track: FeatureTrack, vocab: Vocab):
    batch = collate([instance], [graph], [track], vocab, model.cfg.lm.max_len)
    return model.step_fn(model.encode(batch))


def greedy_decode(model: MsgBart, instance: DialogueInstance, graph: SceneGraph, track: FeatureTrack, vocab: Vocab, max_len: int) -> List[int]:
    """Argmax decoding for one instance; the returned ids end with EOS unless ``max_len`` cut them."""
    return greedy_search(instance_step(model, instance, graph, track, vocab), max_len).tokens


def beam_decode(
    model: MsgBart,
    instance: DialogueInstance,
    graph: SceneGraph,
    track: FeatureTrack,
    vocab: Vocab,
    beam_size: int = 6,
    penalty: float = 0.6,
    max_len: int = 6,
    style: str = "plain",
) -> List[int]:
    best, _ = beam_search(instance_step(model, instance, graph, track, vocab), beam_size, max_len, penalty, style)
    return best.tokens
