"""Compositional toy videos with patch-level ground-truth entity masks.

An action is an ordered entity pair plus a motion pattern, named
``"<motion> <entity_a> with <entity_b>"``. Some compositions are held out
entirely for zero-shot evaluation; every entity and motion they use also
appears in a seen action.
"""
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, IntegrityError, ParameterError

COLORS = (
    ("red", (0.95, 0.1, 0.1)),
    ("green", (0.1, 0.85, 0.2)),
    ("blue", (0.15, 0.3, 0.95)),
    ("yellow", (0.95, 0.9, 0.1)),
    ("cyan", (0.1, 0.9, 0.9)),
    ("magenta", (0.9, 0.15, 0.85)),
    ("orange", (1.0, 0.55, 0.05)),
    ("white", (0.95, 0.95, 0.95)),
    ("purple", (0.5, 0.2, 0.7)),
    ("olive", (0.5, 0.55, 0.1)),
)
SHAPES = ("square", "disc", "triangle", "bar")
MOTIONS = {
    "approach": "drawing closer together",
    "orbit": "circling around",
    "cross": "passing across sideways",
    "bounce": "hopping up and down",
}


@dataclass
class DatasetSpec:
    n_entities: int = 6
    n_actions: int = 8          # seen actions
    n_unseen: int = 2           # extra compositions reserved for zero-shot
    samples_per_action: int = 20
    T: int = 8
    H: int = 32
    W: int = 32
    seed: int = 0
    patch: int = 8
    test_fraction: float = 0.25

    def validate(self):
        if not 2 <= self.n_entities <= len(COLORS):
            raise ParameterError(f"n_entities must be in [2, {len(COLORS)}]")
        if self.n_actions < 1 or self.n_unseen < 0:
            raise ParameterError("need n_actions >= 1 and n_unseen >= 0")
        if self.n_unseen >= self.n_actions:
            raise ParameterError("n_unseen must be smaller than n_actions")
        n_comp = self.n_entities * (self.n_entities - 1) * len(MOTIONS)
        if self.n_actions + self.n_unseen > n_comp:
            raise ParameterError(f"only {n_comp} distinct compositions exist for {self.n_entities} entities")
        if self.H % self.patch or self.W % self.patch:
            raise ParameterError("frame size must be divisible by patch")
        if self.samples_per_action < 2 or self.T < 1:
            raise ParameterError("samples_per_action must be >= 2 and T >= 1")
        if not 0 < self.test_fraction < 1:
            raise ParameterError("test_fraction must lie in (0, 1)")


@dataclass
class EntitySpec:
    id: int                     # 1-based; 0 is background
    color: str
    rgb: tuple
    shape: str
    category: str = "object"

    @property
    def unit(self):
        return f"{self.color} {self.shape}"

    @property
    def description(self):
        return f"solid {self.color} {self.shape}"


@dataclass
class ActionSpec:
    name: str
    entity_a: int
    entity_b: int
    motion: str
    unseen: bool = False


@dataclass
class VideoSample:
    id: str
    label: str
    frames: np.ndarray          # (T, H, W, C) float32 in [0, 1]
    masks: np.ndarray           # (T, H/p, W/p) uint8 entity ids
    split: str = "train"


@dataclass
class DatasetManifest:
    spec: dict
    vocabulary: list
    motions: list
    actions: list
    splits: dict
    samples: list
    patch: int
    seed: int
    format: str = "alt-synthetic/1"
    extra: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def make_vocabulary(n_entities):
    return [EntitySpec(i + 1, COLORS[i][0], COLORS[i][1], SHAPES[i % len(SHAPES)])
            for i in range(n_entities)]


def action_name(motion, a, b):
    return f"{motion} {a.unit} with {b.unit}"


def choose_actions(spec, vocab, rng):
    """Pick distinct compositions; the last ``n_unseen`` are zero-shot only."""
    n_total = spec.n_actions + spec.n_unseen
    motions = list(MOTIONS)
    pairs = [(a, b) for a in range(spec.n_entities) for b in range(spec.n_entities) if a < b]
    for _ in range(2000):
        if n_total <= len(pairs):
            chosen = [pairs[i] for i in rng.permutation(len(pairs))[:n_total]]
            chosen = [(a, b) if rng.random() < 0.5 else (b, a) for a, b in chosen]
            comps = [(a, b, motions[int(rng.integers(len(motions)))]) for a, b in chosen]
        else:
            every = [(a, b, m) for a in range(spec.n_entities) for b in range(spec.n_entities)
                     if a != b for m in motions]
            comps = [every[i] for i in rng.permutation(len(every))[:n_total]]
        seen, unseen = comps[:spec.n_actions], comps[spec.n_actions:]
        seen_entities = {e for a, b, _ in seen for e in (a, b)}
        seen_motions = {m for _, _, m in seen}
        if all(a in seen_entities and b in seen_entities and m in seen_motions for a, b, m in unseen):
            return [ActionSpec(action_name(m, vocab[a], vocab[b]), vocab[a].id, vocab[b].id, m, i >= spec.n_actions)
                    for i, (a, b, m) in enumerate(comps)]
    raise ParameterError("could not find compositions whose parts all appear in seen actions")


# -- rendering --------------------------------------------------------------
def _glyph_mask(shape, cx, cy, size, H, W):
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    half = size / 2.0
    if shape == "square":
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    if shape == "disc":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= half * half
    if shape == "triangle":
        top, bottom = cy - half, cy + half
        frac = np.clip((yy - top) / size, 0.0, 1.0)
        return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * half)
    if shape == "bar":
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half * 0.5)
    raise ValueError(shape)


def _trajectory(motion, T, W, H, rng):
    """Centre positions (T, 2, 2) for entity a and b, in pixels."""
    t = np.linspace(0.0, 1.0, T) if T > 1 else np.zeros(1)
    j = lambda s: rng.uniform(-s, s)
    if motion == "approach":
        y = 0.5 + j(0.15)
        ax = 0.22 + j(0.04) + 0.18 * t
        bx = 0.78 + j(0.04) - 0.18 * t
        a = np.stack([ax, np.full(T, y + j(0.05))], 1)
        b = np.stack([bx, np.full(T, y + j(0.05))], 1)
    elif motion == "orbit":
        c = (0.5 + j(0.06), 0.5 + j(0.06))
        phase = rng.uniform(0, 2 * math.pi)
        ang = phase + 2 * math.pi * t
        a = np.stack([np.full(T, c[0]), np.full(T, c[1])], 1)
        b = np.stack([c[0] + 0.3 * np.cos(ang), c[1] + 0.3 * np.sin(ang)], 1)
    elif motion == "cross":
        ya, yb = 0.28 + j(0.05), 0.72 + j(0.05)
        a = np.stack([0.2 + j(0.04) + 0.6 * t, np.full(T, ya)], 1)
        b = np.stack([0.8 + j(0.04) - 0.6 * t, np.full(T, yb)], 1)
    elif motion == "bounce":
        phase = rng.uniform(0, math.pi)
        hop = np.abs(np.sin(phase + 2 * math.pi * t))
        a = np.stack([np.full(T, 0.27 + j(0.04)), 0.75 - 0.45 * hop], 1)
        b = np.stack([np.full(T, 0.73 + j(0.04)), 0.75 - 0.45 * hop[::-1]], 1)
    else:
        raise ValueError(motion)
    pos = np.stack([a, b], 1)
    pos = np.clip(pos, 0.2, 0.8)
    pos[..., 0] *= W
    pos[..., 1] *= H
    return pos


def render_sample(action, vocab, spec, rng):
    """Frames (T, H, W, 3) and patch masks (T, H/p, W/p) for one clip."""
    T, H, W, p = spec.T, spec.H, spec.W, spec.patch
    size = max(4.0, 0.4375 * min(H, W))
    ents = {e.id: e for e in vocab}
    ea, eb = ents[action.entity_a], ents[action.entity_b]
    pos = _trajectory(action.motion, T, W, H, rng)
    frames = np.zeros((T, H, W, 3), dtype=np.float32)
    masks = np.zeros((T, H // p, W // p), dtype=np.uint8)
    for t in range(T):
        owner = np.zeros((H, W), dtype=np.int64)
        for k, ent in enumerate((ea, eb)):
            m = _glyph_mask(ent.shape, pos[t, k, 0], pos[t, k, 1], size, H, W)
            frames[t][m] = ent.rgb
            owner[m] = ent.id
        cells = owner.reshape(H // p, p, W // p, p).transpose(0, 2, 1, 3).reshape(H // p, W // p, p * p)
        for ent in (ea, eb):
            count = (cells == ent.id).sum(-1)
            take = (count * 2 >= p * p) & (masks[t] == 0)
            masks[t][take] = ent.id
    return frames, masks


# -- sample container ----------------------------------------------------
_SAMPLE_MAGIC = b"ALTV"
_SAMPLE_HEADER = struct.Struct("<4sIIIII")


def sample_bytes(frames, masks):
    T, H, W, C = frames.shape
    return (_SAMPLE_HEADER.pack(_SAMPLE_MAGIC, 1, T, H, W, C)
            + np.ascontiguousarray(frames, dtype="<f4").tobytes()
            + np.ascontiguousarray(masks, dtype=np.uint8).tobytes())


def parse_sample(blob, patch, name="sample"):
    if len(blob) < _SAMPLE_HEADER.size:
        raise IntegrityError(f"{name}: truncated header")
    magic, version, T, H, W, C = _SAMPLE_HEADER.unpack_from(blob)
    if magic != _SAMPLE_MAGIC or version != 1:
        raise IntegrityError(f"{name}: not an ALTV v1 file")
    n_f = T * H * W * C
    n_m = T * (H // patch) * (W // patch)
    off = _SAMPLE_HEADER.size
    if len(blob) != off + 4 * n_f + n_m:
        raise IntegrityError(f"{name}: size mismatch")
    frames = np.frombuffer(blob, dtype="<f4", count=n_f, offset=off).reshape(T, H, W, C).astype(np.float32)
    masks = np.frombuffer(blob, dtype=np.uint8, count=n_m, offset=off + 4 * n_f).reshape(
        T, H // patch, W // patch).copy()
    return frames, masks


def lexicon_for(vocab):
    lex = {e.unit: {"description": e.description, "category": e.category} for e in vocab}
    for m, desc in MOTIONS.items():
        lex[m] = {"description": desc, "category": "motion"}
    return lex


def generate(spec):
    """Pure generation: (manifest, {sample_id: VideoSample}). Files are not touched."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    vocab = make_vocabulary(spec.n_entities)
    actions = choose_actions(spec, vocab, rng)
    samples, records = {}, []
    splits = {"train": [], "test": [], "unseen": []}
    n_test = max(1, int(round(spec.samples_per_action * spec.test_fraction)))
    counter = 0
    for action in actions:
        for k in range(spec.samples_per_action):
            frames, masks = render_sample(action, vocab, spec, rng)
            if action.unseen:
                split = "unseen"
            else:
                split = "test" if k >= spec.samples_per_action - n_test else "train"
            sid = f"s{counter:05d}"
            counter += 1
            samples[sid] = VideoSample(sid, action.name, frames, masks, split)
            splits[split].append(sid)
            records.append({
                "id": sid,
                "file": f"samples/{sid}.altv",
                "label": action.name,
                "split": split,
                "sha256": hashlib.sha256(sample_bytes(frames, masks)).hexdigest(),
            })
    manifest = DatasetManifest(
        spec=asdict(spec),
        vocabulary=[{**asdict(e), "rgb": list(e.rgb), "unit": e.unit, "description": e.description}
                    for e in vocab],
        motions=[{"unit": m, "description": d, "category": "motion"} for m, d in MOTIONS.items()],
        actions=[asdict(a) for a in actions],
        splits=splits,
        samples=records,
        patch=spec.patch,
        seed=spec.seed,
    )
    return manifest, samples


def gen_dataset(spec, out_dir, force=False):
    """Render the dataset and write samples, manifest and lexicon under ``out_dir``."""
    if isinstance(spec, dict):
        spec = DatasetSpec(**spec)
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty; pass force to overwrite")
    manifest, samples = generate(spec)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    for rec in manifest.samples:
        s = samples[rec["id"]]
        (out / rec["file"]).write_bytes(sample_bytes(s.frames, s.masks))
    vocab = make_vocabulary(spec.n_entities)
    (out / "lexicon.json").write_text(json.dumps(lexicon_for(vocab), indent=1, sort_keys=True))
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


class SyntheticDataset:
    """Loaded dataset. Samples are read lazily and verified against the manifest."""

    def __init__(self, manifest, root=None, samples=None):
        self.manifest = manifest
        self.root = Path(root) if root is not None else None
        self._memory = samples
        self._cache = {}
        self._by_id = {rec["id"]: rec for rec in manifest.samples}

    # -- metadata ------------------------------------------------------------
    @property
    def patch(self):
        return self.manifest.patch

    @property
    def spec(self):
        return DatasetSpec(**self.manifest.spec)

    def ids(self, split=None):
        if split is None:
            return [rec["id"] for rec in self.manifest.samples]
        if split not in self.manifest.splits:
            raise KeyError(f"unknown split {split!r}")
        return list(self.manifest.splits[split])

    def labels(self, split=None):
        """Distinct action names in ``split`` in manifest action order."""
        names = [a["name"] for a in self.manifest.actions]
        if split is None:
            return names
        present = {self._by_id[i]["label"] for i in self.ids(split)}
        return [n for n in names if n in present]

    def seen_labels(self):
        return [a["name"] for a in self.manifest.actions if not a["unseen"]]

    def unseen_labels(self):
        return [a["name"] for a in self.manifest.actions if a["unseen"]]

    def label_of(self, sid):
        return self._by_id[sid]["label"]

    def entity_units(self):
        """Entity id -> unit string (0 = background)."""
        return {v["id"]: v["unit"] for v in self.manifest.vocabulary}

    def lexicon(self):
        vocab = [EntitySpec(v["id"], v["color"], tuple(v["rgb"]), v["shape"], v["category"])
                 for v in self.manifest.vocabulary]
        return lexicon_for(vocab)

    # -- sample access --------------------------------------------------------
    def sample(self, sid):
        if sid in self._cache:
            return self._cache[sid]
        rec = self._by_id.get(sid)
        if rec is None:
            raise KeyError(sid)
        if self._memory is not None:
            s = self._memory[sid]
        else:
            path = self.root / rec["file"]
            if not path.exists():
                raise IntegrityError(f"missing sample file {rec['file']}")
            blob = path.read_bytes()
            if hashlib.sha256(blob).hexdigest() != rec["sha256"]:
                raise IntegrityError(f"hash mismatch for sample file {rec['file']}")
            frames, masks = parse_sample(blob, self.patch, rec["file"])
            s = VideoSample(sid, rec["label"], frames, masks, rec["split"])
        self._cache[sid] = s
        return s

    def iter_split(self, split=None):
        for sid in self.ids(split):
            yield self.sample(sid)

    def arrays(self, ids):
        """Stacked frames (n, T, H, W, C) and labels for a list of ids."""
        samples = [self.sample(i) for i in ids]
        return np.stack([s.frames for s in samples]), [s.label for s in samples]

    def subset(self, ids, name="train"):
        """Dataset view whose ``name`` split is exactly ``ids``."""
        splits = {k: list(v) for k, v in self.manifest.splits.items()}
        splits[name] = list(ids)
        manifest = DatasetManifest(**{**asdict(self.manifest), "splits": splits})
        view = SyntheticDataset(manifest, self.root, self._memory)
        view._cache = self._cache
        return view


def load_dataset(path):
    root = Path(path)
    mpath = root / "manifest.json" if root.is_dir() else root
    root = mpath.parent
    if not mpath.exists():
        raise IntegrityError(f"missing manifest {mpath}")
    try:
        data = json.loads(mpath.read_text())
        manifest = DatasetManifest(**data)
    except (json.JSONDecodeError, TypeError) as exc:
        raise IntegrityError(f"{mpath}: invalid manifest ({exc})") from None
    for rec in manifest.samples:
        if not (root / rec["file"]).exists():
            raise IntegrityError(f"missing sample file {rec['file']}")
    seen_labels = {a["name"] for a in manifest.actions if not a["unseen"]}
    for sid in manifest.splits.get("train", []):
        if sid not in {r["id"] for r in manifest.samples}:
            raise IntegrityError(f"split references unknown sample {sid}")
    for rec in manifest.samples:
        if rec["split"] == "train" and rec["label"] not in seen_labels:
            raise IntegrityError(f"unseen action {rec['label']!r} found in train split")
    return SyntheticDataset(manifest, root)


def in_memory_dataset(spec):
    manifest, samples = generate(spec)
    return SyntheticDataset(manifest, None, samples)


# -- alignment scoring ----------------------------------------------------
def majority_entity(mask_ids):
    """Most frequent id among a region's patches; ties go to the lower id."""
    counts = np.bincount(np.asarray(mask_ids, dtype=np.int64))
    return int(counts.argmax())


def alignment_precision(dumps, dataset, return_counts=False):
    """Fraction of entity-majority region tokens whose argmax entity is that entity.

    ``dumps`` is an iterable of alignment-dump records (one per frame).
    Background-majority tokens and the class row are not scored.
    """
    units = dataset.entity_units()
    hits = total = 0
    for rec in dumps:
        try:
            sample = dataset.sample(rec["sample_id"])
        except KeyError:
            raise ContractError(f"dump refers to unknown sample {rec['sample_id']!r}") from None
        t = rec["frame_index"]
        if not 0 <= t < sample.masks.shape[0]:
            raise ContractError(f"frame index {t} out of range for {rec['sample_id']}")
        flat = sample.masks[t].reshape(-1)
        for row in rec["rows"]:
            patches = row["patches"]
            if not patches:
                continue
            if max(patches) > flat.size or min(patches) < 1:
                raise ContractError(f"patch index outside 1..{flat.size}")
            ent = majority_entity(flat[np.asarray(patches) - 1])
            if ent == 0:
                continue
            total += 1
            hits += int(row["entity_unit"] == units[ent])
    if total == 0:
        raise ContractError("no region token covers a ground-truth entity; precision undefined")
    prec = hits / total
    return (prec, hits, total) if return_counts else prec
