"""Contrastive classification loss, training loop, evaluation harnesses, checkpoints."""
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapter import ALTModel
from .alignment import cosine_matrix, gumbel_noise
from .config import TrainConfig
from .corpus import (Corpus, build_corpus, embed_action_labels, embed_entities,
                     filter_by_category, tokenize)
from .errors import ContractError, IntegrityError, NumericError, ParameterError, ValidationError
from .tensor import Tensor

log = logging.getLogger(__name__)


# -- loss -----------------------------------------------------------------
def labels_from_onehot(y):
    y = np.asarray(y)
    if y.ndim != 2 or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
        raise ContractError("labels must be one-hot rows")
    return y.argmax(axis=1)


def logits(Z, C, temperature=0.07):
    C = np.asarray(C, dtype=Z.dtype)
    return T.matmul(Z, Tensor(C.T)) * (1.0 / temperature)


def classification_loss(Z, C, y, temperature=0.07):
    """Mean over videos of -log softmax_i(c_i . z_n / temperature) at the true class.

    ``y`` is an (n, I) one-hot matrix.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    targets = labels_from_onehot(y)
    return T.cross_entropy(logits(T.as_tensor(Z), C, temperature), targets)


def label_entity_mask(labels, corpus):
    """(I, K) mask: entity k's unit occurs as a contiguous word run in label i."""
    mask = np.zeros((len(labels), corpus.K), dtype=bool)
    for i, label in enumerate(labels):
        words = tokenize(label)
        for k, e in enumerate(corpus):
            unit = tokenize(e.unit)
            n = len(unit)
            mask[i, k] = n > 0 and any(words[j:j + n] == unit for j in range(len(words) - n + 1))
    return mask


def grounding_loss(tokens, S, positives, visible=None, temperature=0.07):
    """Weak region-entity grounding from caption-level entity lists.

    ``tokens`` are (F, R, d) frame tokens whose first row is the class
    token; ``positives`` is an (F, K) mask of the entities each frame's
    label names. Two terms, averaged over frames:

    * frame level: each entity's score is a soft maximum of its region
      similarities; a softmax over the ``visible`` entities should spread
      its mass evenly over the named ones, so every named entity needs a
      region that matches it;
    * region level: each region's softmax over all K entities should put
      its mass somewhere in the named set, which pushes regions away from
      entities the caption rules out (including invisible ones).

    Entities outside ``visible`` (K,) are never targets; frames that name
    no visible entity are skipped.
    """
    K = S.shape[0]
    visible = np.ones(K, dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
    pos = np.asarray(positives, dtype=bool) & visible
    idx = np.flatnonzero(pos.any(axis=1))
    if len(idx) == 0:
        return Tensor(np.zeros((), dtype=tokens.dtype))
    pos = pos[idx]
    regions = T.getitem(tokens, (idx, slice(1, None)))
    z = cosine_matrix(regions, S) * (1.0 / temperature)            # (F, R-1, K)
    frame = T.logsumexp(z, -2) + Tensor(np.where(visible, 0.0, -1e4).astype(z.dtype))
    weights = (pos / pos.sum(axis=1, keepdims=True)).astype(z.dtype)
    frame_term = -T.tsum(T.log_softmax(frame, -1) * Tensor(weights)) * (1.0 / len(idx))
    named = Tensor(np.where(pos, 0.0, -1e4)[:, None, :].astype(z.dtype))
    region_term = -T.mean(T.logsumexp(T.log_softmax(z, -1) + named, -1))
    return frame_term + region_term


# -- optimiser --------------------------------------------------------------
class AdamW:
    """Adam with decoupled weight decay; decay skips vectors (biases, norms)."""

    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-3):
        self.params = dict(named_params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lrs):
        """``lrs`` maps parameter name -> learning rate for this step."""
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            lr = lrs[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.wd and p.data.ndim >= 2:
                p.data -= lr * self.wd * p.data
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def lr_factor(step, total_steps, warmup_steps):
    """Linear warmup to 1, then cosine decay to 0."""
    if total_steps <= 0:
        return 0.0
    if step < warmup_steps:
        return (step + 1) / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


# -- text side ------------------------------------------------------------
@dataclass
class TextSide:
    corpus: Corpus
    S: np.ndarray           # (K, d)
    labels: list            # training labels
    C: np.ndarray           # (I, d)

    def class_matrix(self, labels, cfg):
        return embed_action_labels(labels, cfg.templates, cfg.text_seed, cfg.d).C


def action_name_corpus(labels):
    from .corpus import EntityRecord
    return Corpus(EntityRecord(label, "", "motion") for label in labels)


def build_text_side(cfg, dataset, corpus=None):
    """Entity matrix S and class embeddings C for the dataset's seen labels."""
    labels = dataset.seen_labels()
    if cfg.corpus_mode == "action_names":
        corpus = action_name_corpus(labels)
        S = embed_action_labels(labels, cfg.templates, cfg.text_seed, cfg.d).C.astype(np.float32)
    else:
        if corpus is None:
            corpus = build_corpus(labels, dataset.lexicon())
        corpus = filter_by_category(corpus, cfg.corpus_categories)
        S = embed_entities(corpus, cfg.text_seed, cfg.d).S
    C = embed_action_labels(labels, cfg.templates, cfg.text_seed, cfg.d).C
    return TextSide(corpus=corpus, S=S, labels=labels, C=C)


def text_side_from_meta(cfg, meta):
    corpus = Corpus.from_records(meta["corpus"])
    labels = meta["labels"]
    if cfg.corpus_mode == "action_names":
        S = embed_action_labels(labels, cfg.templates, cfg.text_seed, cfg.d).C.astype(np.float32)
    else:
        S = embed_entities(corpus, cfg.text_seed, cfg.d).S
    C = embed_action_labels(labels, cfg.templates, cfg.text_seed, cfg.d).C
    return TextSide(corpus=corpus, S=S, labels=labels, C=C)


# -- checkpoints ------------------------------------------------------------
@dataclass
class Checkpoint:
    params: dict                    # name -> float32 array
    config: TrainConfig
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)   # labels, corpus records

    def model(self):
        model = ALTModel(self.config, np.random.default_rng(0))
        named = dict(model.named_parameters())
        missing = set(named) ^ set(self.params)
        if missing:
            raise IntegrityError(f"checkpoint/model parameter mismatch: {sorted(missing)[:5]}")
        for name, p in named.items():
            arr = self.params[name]
            if arr.shape != p.shape:
                raise IntegrityError(f"parameter {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(self.config.dtype)
        return model

    def text_side(self):
        return text_side_from_meta(self.config, self.meta)


def checkpoint_from_model(model, step=0, rng_state=None, meta=None):
    params = {name: p.data.astype(np.float32) for name, p in model.named_parameters()}
    return Checkpoint(params, model.cfg, step, rng_state or {}, meta or {})


_CKPT_MAGIC = b"ALTW"


def save_checkpoint(ckpt, path):
    out = bytearray()
    out += struct.pack("<4sII", _CKPT_MAGIC, 1, len(ckpt.params))
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    echo = json.dumps({"config": ckpt.config.to_dict(), "step": ckpt.step,
                       "rng_state": ckpt.rng_state, "meta": ckpt.meta}, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(echo)) + echo
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    try:
        magic, version, count = struct.unpack_from("<4sII", blob, 0)
        if magic != _CKPT_MAGIC or version != 1:
            raise IntegrityError(f"{path}: not an ALTW v1 checkpoint")
        off = 12
        params = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + n].decode("utf-8")
            off += n
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            params[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        echo = json.loads(blob[off:off + n].decode("utf-8"))
        if off + n != len(blob):
            raise IntegrityError(f"{path}: trailing bytes")
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt checkpoint ({exc})") from None
    cfg = TrainConfig.from_dict(echo["config"])
    return Checkpoint(params, cfg, echo.get("step", 0), echo.get("rng_state", {}), echo.get("meta", {}))


# -- training -------------------------------------------------------------
@dataclass
class TrainResult:
    model: ALTModel
    checkpoint: Checkpoint
    history: list
    text: TextSide


def _streams(seed):
    ss = np.random.SeedSequence(seed)
    init, shuffle, noise = ss.spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(shuffle),
            np.random.default_rng(noise))


def train(cfg, dataset, corpus=None, train_ids=None, log_path=None, eval_split=None,
          callback=None):
    """Train a model on the dataset's train split (or ``train_ids``).

    Returns a TrainResult holding the model, its checkpoint and the per-epoch log.
    """
    init_rng, shuffle_rng, noise_rng = _streams(cfg.seed)
    text = build_text_side(cfg, dataset, corpus)
    model = ALTModel(cfg, init_rng)
    ids = list(train_ids) if train_ids is not None else dataset.ids("train")
    frames, labels = dataset.arrays(ids)
    frames = frames.astype(cfg.dtype, copy=False)
    label_index = {l: i for i, l in enumerate(text.labels)}
    try:
        y = np.array([label_index[l] for l in labels])
    except KeyError as exc:
        raise ContractError(f"training label {exc.args[0]!r} has no class embedding") from None
    C = text.C.astype(cfg.dtype)
    S = text.S.astype(cfg.dtype)
    named_entities = label_entity_mask(text.labels, text.corpus)[y] if cfg.ground_weight else None
    visible = np.array([e.category != "motion" for e in text.corpus])

    named = dict(model.named_parameters())
    backbone, head = model.param_groups()
    group_of = {n: "backbone" for n in backbone} | {n: "head" for n in head}
    opt = AdamW(named, betas=cfg.betas, weight_decay=cfg.weight_decay)
    n = len(ids)
    steps_per_epoch = max(1, math.ceil(n / cfg.batch_size))
    total = cfg.epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    history = []
    step = 0
    logf = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            order = shuffle_rng.permutation(n)
            loss_sum = correct = 0.0
            for s in range(steps_per_epoch):
                idx = order[s * cfg.batch_size:(s + 1) * cfg.batch_size]
                factor = lr_factor(step, total, warm)
                lr = {"backbone": cfg.base_lr * factor, "head": cfg.head_lr * factor}
                noise = None
                if cfg.noise_mode == "gumbel" and cfg.query_mode == "aligned":
                    noise = gumbel_noise(noise_rng, len(idx) * cfg.frames_per_clip, len(S), cfg.dtype)
                out = model(frames[idx], S, noise)
                lg = logits(out.z, C, cfg.temperature)
                loss = T.cross_entropy(lg, y[idx])
                if named_entities is not None:
                    frame_pos = np.repeat(named_entities[idx], cfg.frames_per_clip, axis=0)
                    loss = loss + grounding_loss(out.regions.tokens, S, frame_pos, visible,
                                                 cfg.temperature) * cfg.ground_weight
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NumericError(f"non-finite loss at epoch {epoch} step {s}")
                model.zero_grad()
                loss.backward()
                opt.step({k: lr[group_of[k]] for k in named})
                loss_sum += value * len(idx)
                correct += float((lg.data.argmax(1) == y[idx]).sum())
                step += 1
            rec = {"epoch": epoch, "lr": cfg.base_lr * lr_factor(max(step - 1, 0), total, warm),
                   "train_loss": loss_sum / n, "train_top1": correct / n}
            if eval_split and cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
                rec["eval_top1"] = evaluate(model, dataset, text, split=eval_split)["top1"]
            history.append(rec)
            if logf:
                logf.write(json.dumps(rec, sort_keys=True) + "\n")
            if callback:
                callback(rec)
    finally:
        if logf:
            logf.close()
    meta = {"labels": text.labels, "corpus": [e.to_json() for e in text.corpus]}
    rng_state = {"noise": noise_rng.bit_generator.state["state"]["state"] % (2 ** 53),
                 "shuffle": shuffle_rng.bit_generator.state["state"]["state"] % (2 ** 53)}
    ckpt = checkpoint_from_model(model, step, rng_state, meta)
    return TrainResult(model, ckpt, history, text)


# -- evaluation -------------------------------------------------------------
def embed_videos(model, frames, S, batch=64):
    """Noise-free video vectors (n, d) as a numpy array."""
    out = []
    with T.no_grad():
        for i in range(0, len(frames), batch):
            out.append(model(frames[i:i + batch], S, None).z.data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.d))


def metrics_from_scores(scores, y, labels, loss=None, seed=0, config_hash=""):
    """Top-1/top-5, per-class accuracy from an (n, I) score matrix."""
    n, I = scores.shape
    order = np.argsort(-scores, axis=1, kind="stable")
    top1 = order[:, 0] == y
    top5 = (order[:, :min(5, I)] == y[:, None]).any(axis=1)
    per_class = {}
    for i, label in enumerate(labels):
        sel = y == i
        if sel.any():
            per_class[label] = float(top1[sel].mean())
    return {
        "top1": float(top1.mean()) if n else 0.0,
        "top5": float(top5.mean()) if n else 0.0,
        "loss": loss,
        "per_class": per_class,
        "seed": seed,
        "views": "1x1",
        "config_hash": config_hash,
    }


def evaluate(model, dataset, text=None, split="test", labels=None, ids=None):
    """Single-view top-k metrics of ``model`` (or a Checkpoint) on a split."""
    if isinstance(model, Checkpoint):
        text = text or model.text_side()
        model = model.model()
    cfg = model.cfg
    labels = list(labels) if labels is not None else text.labels
    C = text.C if labels == text.labels else text.class_matrix(labels, cfg)
    ids = list(ids) if ids is not None else dataset.ids(split)
    frames, sample_labels = dataset.arrays(ids)
    index = {l: i for i, l in enumerate(labels)}
    unknown = sorted({l for l in sample_labels if l not in index})
    if unknown:
        raise ContractError(f"labels not among class embeddings: {unknown}")
    y = np.array([index[l] for l in sample_labels])
    Z = embed_videos(model, frames.astype(cfg.dtype, copy=False), text.S.astype(cfg.dtype))
    scores = Z.astype(np.float64) @ np.asarray(C, dtype=np.float64).T / cfg.temperature
    shifted = scores - scores.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(len(y)), y])) if len(y) else 0.0
    return metrics_from_scores(scores, y, labels, loss, cfg.seed, cfg.hash())


def zero_shot_eval(model, unseen_labels, dataset, text=None, train_labels=None, split="unseen"):
    """Evaluate against class embeddings built only from ``unseen_labels``."""
    if isinstance(model, Checkpoint):
        text = text or model.text_side()
        model = model.model()
    train_labels = set(train_labels if train_labels is not None else text.labels)
    overlap = sorted(train_labels & set(unseen_labels))
    if overlap:
        raise ValidationError(f"zero-shot labels overlap training labels: {overlap}")
    wanted = set(unseen_labels)
    ids = [i for i in dataset.ids(split) if dataset.label_of(i) in wanted]
    return evaluate(model, dataset, text, labels=list(unseen_labels), ids=ids)


def few_shot_split(dataset, K, seed, split="train"):
    """Exactly K seeded samples per class from ``split``; returns their ids."""
    rng = np.random.default_rng(seed)
    by_label = {}
    for sid in dataset.ids(split):
        by_label.setdefault(dataset.label_of(sid), []).append(sid)
    chosen = []
    for label in sorted(by_label):
        pool = by_label[label]
        if len(pool) < K:
            raise ValidationError(f"class {label!r} has {len(pool)} samples, fewer than K={K}")
        pick = rng.choice(len(pool), size=K, replace=False)
        chosen.extend(pool[i] for i in sorted(pick))
    return chosen


def linear_probe(model, dataset, text=None, epochs=200, lr=0.05, seed=0,
                 train_split="train", test_split="test"):
    """Train only a new I x d linear layer on frozen video vectors."""
    if isinstance(model, Checkpoint):
        text = text or model.text_side()
        model = model.model()
    cfg = model.cfg
    labels = text.labels
    index = {l: i for i, l in enumerate(labels)}
    S = text.S.astype(cfg.dtype)

    def embed(split):
        frames, names = dataset.arrays(dataset.ids(split))
        return embed_videos(model, frames.astype(cfg.dtype, copy=False), S), np.array([index[l] for l in names])

    Ztr, ytr = embed(train_split)
    Zte, yte = embed(test_split)
    rng = np.random.default_rng(seed)
    W = Tensor((rng.standard_normal((len(labels), cfg.d)) * 0.01).astype(np.float64), requires_grad=True)
    opt = AdamW({"W": W}, weight_decay=0.0)
    Ztr_t = Tensor(Ztr.astype(np.float64))
    for _ in range(epochs):
        loss = T.cross_entropy(T.matmul(Ztr_t, T.transpose(W)), ytr)
        W.zero_grad()
        loss.backward()
        opt.step({"W": lr})
    scores = Zte.astype(np.float64) @ W.data.T
    return metrics_from_scores(scores, yte, labels, None, seed, cfg.hash())


# -- ablations ----------------------------------------------------------------
ADAPTER_TOGGLES = {
    "no_adapter": dict(use_ca=False, use_sa=False, use_conv=False),
    "ca_only": dict(use_ca=True, use_sa=False, use_conv=False),
    "ca_sa": dict(use_ca=True, use_sa=True, use_conv=False),
    "ca_conv": dict(use_ca=True, use_sa=False, use_conv=True),
}


def variant_config(base, name):
    """Config for a named ablation arm."""
    if name == "full":
        return base
    if name == "learnable_query":
        return base.replace(query_mode="learnable")
    if name == "action_names":
        return base.replace(corpus_mode="action_names")
    if name == "no_region":
        return base.replace(r=0)
    if name in ADAPTER_TOGGLES:
        return base.replace(**ADAPTER_TOGGLES[name])
    if name.startswith("corpus="):
        cats = [c for c in name.split("=", 1)[1].split("+") if c]
        return base.replace(corpus_categories=cats)
    raise ParameterError(f"unknown ablation variant {name!r}")


def ablation_run(dataset, base_cfg, variants, seeds=(0,), corpus=None, progress=None):
    """One training run per (variant, seed); mean and sd of seen and zero-shot top-1."""
    configs = {v: variant_config(base_cfg, v) for v in variants}
    rows = []
    for name, cfg in configs.items():
        seen, zs = [], []
        for seed in seeds:
            run_cfg = cfg.replace(seed=seed)
            result = train(run_cfg, dataset, corpus)
            seen.append(evaluate(result.model, dataset, result.text, split="test")["top1"])
            unseen = dataset.unseen_labels()
            if unseen:
                zs.append(zero_shot_eval(result.model, unseen, dataset, result.text)["top1"])
            if progress:
                progress(name, seed, seen[-1], zs[-1] if zs else None)
        rows.append({
            "variant": name,
            "runs": len(seeds),
            "seeds": list(seeds),
            "top1": seen,
            "top1_mean": float(np.mean(seen)),
            "top1_sd": float(np.std(seen)),
            "zero_shot_top1": zs,
            "zero_shot_mean": float(np.mean(zs)) if zs else None,
            "zero_shot_sd": float(np.std(zs)) if zs else None,
        })
    return rows


# -- alignment dumps ----------------------------------------------------------
def check_geometry(cfg, dataset):
    spec = dataset.spec
    if (spec.H, spec.W) != (cfg.image_size, cfg.image_size) or spec.patch != cfg.patch_size:
        raise ValidationError(
            f"model expects {cfg.image_size}x{cfg.image_size} frames with patch {cfg.patch_size}, "
            f"dataset has {spec.H}x{spec.W} with patch {spec.patch}")
    if spec.T != cfg.frames_per_clip:
        raise ValidationError(f"model expects {cfg.frames_per_clip} frames per clip, dataset has {spec.T}")


def alignment_dump(model, dataset, text=None, ids=None, split="test", with_sim=False, batch=16):
    """One record per frame: each region row's absorbed patches and argmax entity."""
    if isinstance(model, Checkpoint):
        text = text or model.text_side()
        model = model.model()
    cfg = model.cfg
    check_geometry(cfg, dataset)
    units = text.corpus.units()
    ids = list(ids) if ids is not None else dataset.ids(split)
    records = []
    for start in range(0, len(ids), batch):
        chunk = ids[start:start + batch]
        frames, _ = dataset.arrays(chunk)
        A, regions = model.alignment(frames.astype(cfg.dtype, copy=False), text.S)
        best = A.data.argmax(axis=-1)
        for c, sid in enumerate(chunk):
            for t in range(cfg.frames_per_clip):
                b = c * cfg.frames_per_clip + t
                rows = []
                for i, patches in enumerate(regions.region_map(b)):
                    k = int(best[b, i])
                    row = {"patches": patches, "entity_index": k, "entity_unit": units[k]}
                    if with_sim:
                        row["sim_row"] = [float(v) for v in A.data[b, i]]
                    rows.append(row)
                records.append({"sample_id": sid, "frame_index": t, "rows": rows})
    return records
