"""Toy dense relational captioning on generated scenes.

A scene is a set of regions (each with a noisy feature vector and a name
that may have synonyms) plus subject-predicate-object relations between
them. One decoder per relation captions it as "subject description
predicate object description", predicting a word and a part-of-speech tag
(subject / predicate / object) at every step. Decoders whose relations
share a region are coupled through the fusion graph.

Ground-truth captions are deliberately inconsistent: each scene draws a
preferred synonym per region, and each mention follows the preference only
with probability `preference_strength`, mimicking datasets whose captions
were merged from multiple annotators. The consistent label-set variant
replaces every mention with the region's modal description.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diffcore as dc
from .cells import EmbeddingTable, LstmParams, embed, linear, uniform_init
from .decoder import DecodeConfig, DecoderGraph, decode, decode_batched
from .diffcore import Parameter, Tensor
from .errors import ConfigError, TrainingDivergedError
from .fusion import FusionParams, build_adjacency
from .metrics import BoxDescriptionGroup

SCENES_FORMAT = "conseq-relcap"
SCENES_VERSION = 1

POS_SUBJ, POS_PRED, POS_OBJ = 0, 1, 2
POS_NAMES = ("SUBJ", "PRED", "OBJ")

SOS, EOS = "<sos>", "<eos>"

SYNONYM_GROUPS = [
    ("table", "desk", "stand"),
    ("sofa", "couch", "settee"),
    ("cup", "mug", "beaker"),
    ("picture", "photo", "portrait"),
    ("tv", "television", "screen"),
    ("rug", "carpet", "mat"),
    ("kid", "child", "youngster"),
    ("car", "automobile", "vehicle"),
    ("bag", "sack", "pouch"),
    ("lamp", "light", "lantern"),
]
PLAIN_NOUNS = ["chair", "window", "door", "tree", "dog", "cat", "book", "plant", "shelf", "box"]
ADJECTIVES = ["red", "blue", "green", "white", "black", "brown", "small", "large", "wooden", "round"]
PREDICATES = ["on", "under", "near", "beside", "behind", "above", "holding", "facing", "inside", "touching"]


@dataclass
class Vocabulary:
    tokens: list[str]
    index: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    @property
    def sos(self) -> int:
        return self.index[SOS]

    @property
    def eos(self) -> int:
        return self.index[EOS]

    def encode(self, toks: list[str]) -> list[int]:
        return [self.index[t] for t in toks]

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


def default_vocabulary() -> Vocabulary:
    tokens = [SOS, EOS]
    for group in SYNONYM_GROUPS:
        tokens.extend(group)
    tokens.extend(PLAIN_NOUNS)
    tokens.extend(ADJECTIVES)
    tokens.extend(PREDICATES)
    return Vocabulary(tokens)


@dataclass
class Region:
    id: int
    group: tuple[str, ...]  # synonym set; first entry is canonical
    adjective: str | None
    feature: np.ndarray


@dataclass
class Relation:
    subject: int
    predicate: str
    object: int
    feature: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class CaptionRecord:
    pair_index: int
    tokens: list[str]
    pos: list[int]


@dataclass
class Scene:
    id: int
    regions: list[Region]
    relations: list[Relation]
    captions_original: list[CaptionRecord]
    captions_consistent: list[CaptionRecord] = field(default_factory=list)

    @property
    def n_pairs(self) -> int:
        return len(self.relations)

    def adjacency(self) -> np.ndarray:
        """Two caption decoders are connected iff their relations share a region."""
        cached = getattr(self, "_adjacency", None)
        if cached is not None:
            return cached
        pairs = []
        for i, ri in enumerate(self.relations):
            for j in range(i + 1, len(self.relations)):
                rj = self.relations[j]
                if {ri.subject, ri.object} & {rj.subject, rj.object}:
                    pairs.append((i, j))
        self._adjacency = build_adjacency(pairs, len(self.relations))
        return self._adjacency

    def captions(self, label_set: str) -> list[CaptionRecord]:
        if label_set == "original":
            return self.captions_original
        if label_set == "consistent":
            return self.captions_consistent
        raise ConfigError(f"unknown label set {label_set!r}")


@dataclass
class RelcapConfig:
    n_scenes: int = 200
    n_eval_scenes: int = 40
    n_regions: int = 8
    n_pairs: int = 20
    synonym_rate: float = 0.5
    adjective_rate: float = 0.7
    # probability each individual mention includes the region's adjective;
    # below 1.0 caption lengths stagger, so simultaneous mentions decouple
    adjective_mention_rate: float = 1.0
    preference_strength: float = 0.8
    feature_dim: int = 8  # per part; pair visual input is 3x + adjective slots
    feature_noise: float = 0.4
    max_caption_len: int = 8
    seed: int = 0
    # training
    hidden: int = 128
    embed: int = 32
    lr: float = 1e-3
    momentum: float = 0.98
    epochs: int = 10
    k: int = 2
    fusion_mode: str = "full"
    label_set: str = "original"
    lambda_pos: float = 0.1
    lr_halve_every: int = 2
    min_lr: float = 1e-6
    # True fuses ground-truth previous words during training (full teacher
    # forcing); False fuses the words actually predicted, so consistency is
    # learned from the model's own outputs
    fuse_teacher: bool = False

    @property
    def region_feature_dim(self) -> int:
        return 2 * self.feature_dim  # name part + adjective part

    @property
    def visual_dim(self) -> int:
        return 2 * self.region_feature_dim + self.feature_dim  # subject, predicate, object


def _token_vectors(seed: int, dim: int) -> dict[str, np.ndarray]:
    """Deterministic base embedding per token, shared across a corpus."""
    rng = np.random.default_rng(seed)
    vocab = default_vocabulary()
    return {tok: rng.normal(size=dim) for tok in vocab.tokens}


def _mention(region: Region, preferred: str, rng: np.random.Generator, strength: float) -> list[str]:
    if len(region.group) == 1 or rng.random() < strength:
        name = preferred
    else:
        others = [g for g in region.group if g != preferred]
        name = others[int(rng.integers(len(others)))]
    return ([region.adjective] if region.adjective else []) + [name]


def generate_scene(rng: np.random.Generator, scene_id: int, config: RelcapConfig,
                   vectors: dict[str, np.ndarray]) -> Scene:
    """One scene: regions with noisy name/adjective features, a connected
    relation structure covering every region, and original-label captions
    whose synonym mentions follow a per-scene preference."""
    n, m = config.n_regions, config.n_pairs
    max_pairs = n * (n - 1) // 2
    if not (n - 1) <= m <= max_pairs:
        raise ConfigError(f"n_pairs={m} inconsistent with n_regions={n} (need {n - 1}..{max_pairs})")
    regions = []
    for rid in range(n):
        if rng.random() < config.synonym_rate:
            group = SYNONYM_GROUPS[int(rng.integers(len(SYNONYM_GROUPS)))]
        else:
            group = (PLAIN_NOUNS[int(rng.integers(len(PLAIN_NOUNS)))],)
        adjective = ADJECTIVES[int(rng.integers(len(ADJECTIVES)))] if rng.random() < config.adjective_rate else None
        name_part = vectors[group[0]]
        adj_part = vectors[adjective] if adjective else np.zeros(config.feature_dim)
        feature = np.concatenate([name_part, adj_part]) + rng.normal(0.0, config.feature_noise,
                                                                     size=config.region_feature_dim)
        regions.append(Region(rid, group, adjective, feature))
    # spanning chain guarantees coverage and shared regions, then extras
    order = rng.permutation(n)
    pair_set = {tuple(sorted((int(order[i]), int(order[i + 1])))) for i in range(n - 1)}
    while len(pair_set) < m:
        i, j = rng.integers(n), rng.integers(n)
        if i != j:
            pair_set.add(tuple(sorted((int(i), int(j)))))
    pairs = sorted(pair_set)
    relations = []
    for i, j in pairs:
        s, o = (i, j) if rng.random() < 0.5 else (j, i)
        predicate = PREDICATES[int(rng.integers(len(PREDICATES)))]
        feat = vectors[predicate] + rng.normal(0.0, config.feature_noise, size=config.feature_dim)
        relations.append(Relation(s, predicate, o, feat))
    preference = {r.id: r.group[int(rng.integers(len(r.group)))] for r in regions}
    captions = []
    for k, rel in enumerate(relations):
        subj = _mention(regions[rel.subject], preference[rel.subject], rng, config.preference_strength)
        obj = _mention(regions[rel.object], preference[rel.object], rng, config.preference_strength)
        tokens = subj + [rel.predicate] + obj
        pos = [POS_SUBJ] * len(subj) + [POS_PRED] + [POS_OBJ] * len(obj)
        captions.append(CaptionRecord(k, tokens, pos))
    scene = Scene(scene_id, regions, relations, captions)
    scene.captions_consistent = make_consistent_labels(scene)
    return scene


def region_descriptions(scene: Scene, captions: list[CaptionRecord]) -> dict[int, list[list[str]]]:
    """Per region, the description tokens of each of its mentions, using the
    caption's POS tags to split subject and object spans."""
    out: dict[int, list[list[str]]] = {r.id: [] for r in scene.regions}
    for cap in captions:
        rel = scene.relations[cap.pair_index]
        subj = [t for t, p in zip(cap.tokens, cap.pos) if p == POS_SUBJ]
        obj = [t for t, p in zip(cap.tokens, cap.pos) if p == POS_OBJ]
        out[rel.subject].append(subj)
        out[rel.object].append(obj)
    return out


def make_consistent_labels(scene: Scene) -> list[CaptionRecord]:
    """Replace every mention of a region with its modal description.

    Ties break lexicographically on the token tuple.
    """
    mentions = region_descriptions(scene, scene.captions_original)
    modal: dict[int, list[str]] = {}
    for rid, descs in mentions.items():
        if not descs:
            continue
        counts: dict[tuple, int] = {}
        for d in descs:
            counts[tuple(d)] = counts.get(tuple(d), 0) + 1
        best = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        modal[rid] = list(best)
    captions = []
    for cap in scene.captions_original:
        rel = scene.relations[cap.pair_index]
        subj = modal[rel.subject]
        obj = modal[rel.object]
        tokens = subj + [rel.predicate] + obj
        pos = [POS_SUBJ] * len(subj) + [POS_PRED] + [POS_OBJ] * len(obj)
        captions.append(CaptionRecord(cap.pair_index, tokens, pos))
    return captions


def build_corpus(config: RelcapConfig) -> tuple[list[Scene], list[Scene]]:
    """Seeded train and eval scene lists."""
    vectors = _token_vectors(config.seed, config.feature_dim)
    rng = np.random.default_rng(config.seed + 1)
    train = [generate_scene(rng, i, config, vectors) for i in range(config.n_scenes)]
    evals = [generate_scene(rng, config.n_scenes + i, config, vectors) for i in range(config.n_eval_scenes)]
    return train, evals


# ---------------------------------------------------------------------------
# serialization


def save_scenes(path, scenes: list[Scene], config: RelcapConfig):
    with open(path, "w") as fh:
        header = {"format": SCENES_FORMAT, "version": SCENES_VERSION, "config": asdict(config)}
        fh.write(json.dumps(header) + "\n")
        for s in scenes:
            rec = {
                "id": s.id,
                "regions": [
                    {"id": r.id, "group": list(r.group), "adjective": r.adjective, "feature": r.feature.tolist()}
                    for r in s.regions
                ],
                "relations": [
                    {"subject": r.subject, "predicate": r.predicate, "object": r.object,
                     "feature": r.feature.tolist()}
                    for r in s.relations
                ],
                "captions": {
                    "original": [{"pair": c.pair_index, "tokens": c.tokens, "pos": c.pos} for c in s.captions_original],
                    "consistent": [{"pair": c.pair_index, "tokens": c.tokens, "pos": c.pos} for c in s.captions_consistent],
                },
            }
            fh.write(json.dumps(rec) + "\n")


def load_scenes(path) -> tuple[list[Scene], RelcapConfig]:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("format") != SCENES_FORMAT or header.get("version") != SCENES_VERSION:
            raise ConfigError(f"unrecognized scene file header in {path}")
        config = RelcapConfig(**header["config"])
        scenes = []
        for line in fh:
            rec = json.loads(line)
            regions = [
                Region(r["id"], tuple(r["group"]), r["adjective"], np.array(r["feature"]))
                for r in rec["regions"]
            ]
            relations = [
                Relation(r["subject"], r["predicate"], r["object"], np.array(r["feature"]))
                for r in rec["relations"]
            ]
            orig = [CaptionRecord(c["pair"], c["tokens"], c["pos"]) for c in rec["captions"]["original"]]
            cons = [CaptionRecord(c["pair"], c["tokens"], c["pos"]) for c in rec["captions"]["consistent"]]
            scenes.append(Scene(rec["id"], regions, relations, orig, cons))
    return scenes, config


# ---------------------------------------------------------------------------
# model


class CaptionModel:
    """Shared-parameter caption decoder bank over the relations of a scene."""

    def __init__(self, config: RelcapConfig, mode: str, rng: np.random.Generator):
        if mode not in ("independent", "baseline2x", "consistent"):
            raise ConfigError(f"unknown mode {mode!r}")
        self.config = config
        self.mode = mode
        self.vocab = default_vocabulary()
        e, h, v = config.embed, config.hidden, len(self.vocab)
        d_in = e if mode == "independent" else 2 * e
        self.visual_w = Parameter(uniform_init(rng, (e, config.visual_dim), config.visual_dim), "visual_w")
        self.visual_b = Parameter(np.zeros(e), "visual_b")
        self.words = EmbeddingTable.init(rng, v, e, "words")
        self.lstm = LstmParams.init(rng, d_in, h, "lstm")
        self.word_head_w = Parameter(uniform_init(rng, (v, h), h), "word_head_w")
        self.word_head_b = Parameter(np.zeros(v), "word_head_b")
        self.pos_head_w = Parameter(uniform_init(rng, (3, h), h), "pos_head_w")
        self.pos_head_b = Parameter(np.zeros(3), "pos_head_b")
        self.fusion = FusionParams.init(rng, e, "fusion") if mode == "consistent" else None

    def parameters(self) -> list[Parameter]:
        params = [self.visual_w, self.visual_b, self.word_head_w, self.word_head_b,
                  self.pos_head_w, self.pos_head_b]
        params += self.words.parameters() + self.lstm.parameters()
        if self.fusion is not None:
            params += self.fusion.active_parameters(self.config.fusion_mode)
        return params

    def checkpoint_parameters(self) -> list[Parameter]:
        params = [self.visual_w, self.visual_b, self.word_head_w, self.word_head_b,
                  self.pos_head_w, self.pos_head_b]
        params += self.words.parameters() + self.lstm.parameters()
        if self.fusion is not None:
            params += self.fusion.parameters()
        return params

    def scene_visuals(self, scene: Scene) -> np.ndarray:
        vecs = []
        for rel in scene.relations:
            subj = scene.regions[rel.subject].feature
            obj = scene.regions[rel.object].feature
            vecs.append(np.concatenate([subj, rel.feature, obj]))
        return np.stack(vecs)

    def graph_for(self, scene: Scene) -> DecoderGraph:
        return DecoderGraph(scene.n_pairs, scene.adjacency(), max(self.config.k, 1))

    def decode_config(self, total_steps: int, teacher_forcing: bool, sampling: str = "greedy",
                      temperature: float = 1.0) -> DecodeConfig:
        return DecodeConfig(
            mode=self.mode,
            total_steps=total_steps,
            k=self.config.k,
            fusion_mode=self.config.fusion_mode,
            teacher_forcing=teacher_forcing,
            sampling=sampling,
            temperature=temperature,
        )


class _TrainBank:
    """Teacher forcing for the decoder's own stream; the fusion stream sees
    embeddings of the words actually predicted at the previous step."""

    def __init__(self, model: CaptionModel, scene: Scene, label_set: str):
        self.model = model
        self.scene = scene
        caps = scene.captions(label_set)
        eos = model.vocab.eos
        self.targets = []
        for cap in caps:
            ids = model.vocab.encode(cap.tokens) + [eos]
            self.targets.append((ids, cap.pos + [POS_OBJ]))
        self.max_len = max(len(t[0]) for t in self.targets)
        self.visuals = model.scene_visuals(scene)
        self.n_rows = len(caps)
        self.fusion_params = model.fusion
        self.lstm = model.lstm

    def total_steps(self) -> int:
        return self.max_len + 1  # visual step + SOS step + len-1 teacher steps

    def _row_ids(self, rows):
        return range(self.n_rows) if rows is None else [rows]

    def init_state(self, rows):
        n = self.n_rows if rows is None else 1
        h = Tensor(np.zeros((n, self.model.config.hidden)))
        c = Tensor(np.zeros((n, self.model.config.hidden)))
        return h, c

    def own_input(self, t, prev_own, rows):
        ids = list(self._row_ids(rows))
        if t == 0:
            vis = Tensor(self.visuals[ids])
            return linear(vis, self.model.visual_w, self.model.visual_b)
        eos = self.model.vocab.eos
        if t == 1:
            tok = [self.model.vocab.sos] * len(ids)
        else:
            tok = [self.targets[i][0][t - 2] if t - 2 < len(self.targets[i][0]) else eos for i in ids]
        return embed(np.array(tok), self.model.words)

    def emit(self, h, t, rows, rng):
        ids = list(self._row_ids(rows))
        word_logits = linear(h, self.model.word_head_w, self.model.word_head_b)
        pos_logits = linear(h, self.model.pos_head_w, self.model.pos_head_b)
        eos = self.model.vocab.eos
        if self.model.config.fuse_teacher:
            emitted = np.array([self.targets[i][0][t - 1] if t - 1 < len(self.targets[i][0]) else eos
                                for i in ids])
        else:
            emitted = np.argmax(word_logits.data, axis=1)
            # rows already past their caption end broadcast a neutral EOS signal
            for row_pos, i in enumerate(ids):
                if t - 1 >= len(self.targets[i][0]):
                    emitted[row_pos] = eos
        fuse_next = embed(emitted, self.model.words)
        payload = (t, word_logits, pos_logits)
        return payload, None, fuse_next

    def merge_rows(self, per_row):
        merged = []
        for step in range(len(per_row[0])):
            t = per_row[0][step][0]
            words = dc.concat_rows([p[step][1] for p in per_row])
            pos = dc.concat_rows([p[step][2] for p in per_row])
            merged.append((t, words, pos))
        return merged


class _DecodeBank:
    """Free-running decoding; own and fusion streams both re-embed the
    emitted word (sampled or argmax)."""

    def __init__(self, model: CaptionModel, scene: Scene, sampling: str, temperature: float):
        self.model = model
        self.scene = scene
        self.sampling = sampling
        self.temperature = temperature
        self.visuals = model.scene_visuals(scene)
        self.n_rows = scene.n_pairs
        self.fusion_params = model.fusion
        self.lstm = model.lstm
        self.done = np.zeros(scene.n_pairs, dtype=bool)
        self.last_words: np.ndarray | None = None

    def total_steps(self) -> int:
        return self.model.config.max_caption_len + 2

    def _row_ids(self, rows):
        return list(range(self.n_rows)) if rows is None else [rows]

    def init_state(self, rows):
        n = self.n_rows if rows is None else 1
        if rows is None:
            self.done[:] = False
        else:
            self.done[rows] = False
        h = Tensor(np.zeros((n, self.model.config.hidden)))
        c = Tensor(np.zeros((n, self.model.config.hidden)))
        return h, c

    def own_input(self, t, prev_own, rows):
        ids = self._row_ids(rows)
        if t == 0:
            return linear(Tensor(self.visuals[ids]), self.model.visual_w, self.model.visual_b)
        if t == 1:
            return embed(np.full(len(ids), self.model.vocab.sos), self.model.words)
        return prev_own

    def emit(self, h, t, rows, rng):
        ids = self._row_ids(rows)
        word_logits = linear(h, self.model.word_head_w, self.model.word_head_b)
        pos_logits = linear(h, self.model.pos_head_w, self.model.pos_head_b)
        eos = self.model.vocab.eos
        if self.sampling == "sample":
            logits = word_logits.data / max(self.temperature, 1e-300)
            logits = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            words = np.array([rng.choice(len(p), p=p) for p in probs])
        else:
            words = np.argmax(word_logits.data, axis=1)
        pos = np.argmax(pos_logits.data, axis=1)
        done_view = self.done[ids]
        words = np.where(done_view, eos, words)
        self.done[ids] = done_view | (words == eos)
        nxt = embed(words, self.model.words)
        return (words, pos), nxt, nxt

    def merge_rows(self, per_row):
        merged = []
        for step in range(len(per_row[0])):
            words = np.concatenate([p[step][0] for p in per_row])
            pos = np.concatenate([p[step][1] for p in per_row])
            merged.append((words, pos))
        return merged


def scene_loss(model: CaptionModel, scene: Scene, label_set: str) -> Tensor:
    """Caption + POS cross-entropy, token-mean, combined with the POS weight."""
    bank = _TrainBank(model, scene, label_set)
    config = model.decode_config(bank.total_steps(), teacher_forcing=True)
    graph = model.graph_for(scene) if model.mode == "consistent" else None
    payloads = decode_batched(bank, graph, config)
    word_terms, pos_terms = [], []
    total_tokens = 0
    for t, word_logits, pos_logits in payloads:
        w_tgt = np.array([tgt[0][t - 1] if t - 1 < len(tgt[0]) else 0 for tgt in bank.targets])
        p_tgt = np.array([tgt[1][t - 1] if t - 1 < len(tgt[1]) else 0 for tgt in bank.targets])
        mask = np.array([1.0 if t - 1 < len(tgt[0]) else 0.0 for tgt in bank.targets])
        # POS has no meaningful class on the EOS step
        pos_mask = mask * np.array([1.0 if t - 1 < len(tgt[0]) - 1 else 0.0 for tgt in bank.targets])
        if mask.any():
            word_terms.append(dc.cross_entropy(word_logits, w_tgt, weights=mask, reduction="sum"))
        if pos_mask.any():
            pos_terms.append(dc.cross_entropy(pos_logits, p_tgt, weights=pos_mask, reduction="sum"))
        total_tokens += int(mask.sum())
    word_sum = word_terms[0]
    for term in word_terms[1:]:
        word_sum = dc.add(word_sum, term)
    loss = dc.scale(word_sum, 1.0 / total_tokens)
    if pos_terms and model.config.lambda_pos != 0.0:
        pos_sum = pos_terms[0]
        for term in pos_terms[1:]:
            pos_sum = dc.add(pos_sum, term)
        n_pos = sum(len(t[0]) - 1 for t in bank.targets)  # real tokens, EOS step excluded
        loss = dc.add(loss, dc.scale(pos_sum, model.config.lambda_pos / max(n_pos, 1)))
    return loss


def train_relcap(scenes: list[Scene], config: RelcapConfig, mode: str,
                 progress=None, resume_state: dict | None = None):
    """Train a caption model; lr halves every lr_halve_every epochs down to
    min_lr. Trace rows: (epoch, train_loss, lr)."""
    rng = np.random.default_rng(config.seed + 11)
    model = CaptionModel(config, mode, rng)
    order_rng = np.random.default_rng(config.seed + 12)
    params = model.parameters()
    trace = []
    start_epoch = 0
    if resume_state is not None:
        arrays, momenta = resume_state["params"], resume_state["momenta"]
        for p in model.checkpoint_parameters():
            p.data = arrays[p.name].copy()
            p.momentum = momenta[p.name].copy()
        order_rng.bit_generator.state = resume_state["rng_state"]
        start_epoch = resume_state["epoch"]
        trace = list(resume_state.get("trace", []))
    for epoch in range(start_epoch, config.epochs):
        lr = max(config.lr * (0.5 ** (epoch // config.lr_halve_every)), config.min_lr)
        order = order_rng.permutation(len(scenes))
        total = 0.0
        for si in order:
            loss = scene_loss(model, scenes[si], config.label_set)
            value = loss.item()
            if not np.isfinite(value) or abs(value) > 1e30:
                raise TrainingDivergedError(epoch, f"scene loss {value}")
            dc.zero_grads(params)
            dc.backward(loss)
            dc.sgd_step(params, lr, config.momentum)
            dc.tape().clear()
            total += value
        trace.append((epoch, total / max(len(scenes), 1), lr))
        if progress is not None:
            progress(epoch, total / max(len(scenes), 1), lr)
        model._train_state = {"rng_state": order_rng.bit_generator.state, "epoch": epoch + 1, "trace": trace}
    if not hasattr(model, "_train_state"):
        model._train_state = {"rng_state": order_rng.bit_generator.state, "epoch": start_epoch, "trace": trace}
    return model, trace


def caption_scene(model: CaptionModel, scene: Scene, sampling: str = "greedy", runs: int = 1,
                  rng: np.random.Generator | None = None, temperature: float = 1.0) -> list[list[CaptionRecord]]:
    """Decode captions for every relation; returns one caption list per run.

    Decoding stops per caption at EOS or the maximum length; predicted POS
    tags ride along with the words (argmax even when sampling words).
    """
    if sampling == "sample" and rng is None:
        rng = np.random.default_rng(0)
    results = []
    with dc.no_grad():
        for _ in range(runs):
            bank = _DecodeBank(model, scene, sampling, temperature)
            config = model.decode_config(bank.total_steps(), teacher_forcing=False,
                                         sampling=sampling, temperature=temperature)
            graph = model.graph_for(scene) if model.mode == "consistent" else None
            payloads = decode(bank, graph, config, rng=rng)
            captions = []
            eos = model.vocab.eos
            for row in range(scene.n_pairs):
                toks, pos = [], []
                for words, tags in payloads:
                    w = int(words[row])
                    if w == eos or len(toks) >= model.config.max_caption_len:
                        break
                    toks.append(model.vocab.tokens[w])
                    pos.append(int(tags[row]))
                captions.append(CaptionRecord(row, toks, pos))
            results.append(captions)
    return results


# ---------------------------------------------------------------------------
# evaluation plumbing


def box_groups(scene: Scene, captions: list[CaptionRecord]) -> list[BoxDescriptionGroup]:
    """Per-region description groups extracted via the captions' POS tags."""
    mentions = region_descriptions(scene, captions)
    return [BoxDescriptionGroup.collect(rid, descs) for rid, descs in mentions.items()]


def slot_descriptions_across_runs(scene: Scene, runs: list[list[CaptionRecord]]) -> list[list[list[str]]]:
    """Box-in-relation description lists across repeated captioning runs."""
    slots = []
    for k, rel in enumerate(scene.relations):
        subj_runs, obj_runs = [], []
        for caps in runs:
            cap = caps[k]
            subj_runs.append([t for t, p in zip(cap.tokens, cap.pos) if p == POS_SUBJ])
            obj_runs.append([t for t, p in zip(cap.tokens, cap.pos) if p == POS_OBJ])
        slots.append(subj_runs)
        slots.append(obj_runs)
    return slots
