"""Frame encoder: patch embedding, ViT blocks with token merging, region tokens.

Tokens are kept batched as (B, n, d). Row 0 is always the class token.
Provenance of merged tokens is tracked with an ``owner`` array of shape
(B, N+1) mapping every original token (0 = class, 1..N = patches) to its
current row.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from . import tensor as T
from .errors import ContractError, ParameterError, ShapeError
from .nn import MLP, Attention, LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass
class PatchSequence:
    tokens: Tensor          # (B, N+1, d), row 0 = class token
    pos_embed: Tensor       # (N+1, d)
    N: int
    d: int


@dataclass
class EncoderBlockState:
    tokens: Tensor          # (B, n, d)
    sizes: np.ndarray       # (B, n) merged-patch counts
    owner: np.ndarray       # (B, N+1) current row of each original token
    block_index: int = 0
    r: int = 0

    @property
    def n(self):
        return self.tokens.shape[1]


@dataclass
class MergePlan:
    src: np.ndarray         # (B, r) full token indices being absorbed
    dst: np.ndarray         # (B, r) full token indices absorbing them
    scores: np.ndarray      # (B, r) cosine similarity of each pair
    n: int                  # token count of the state the plan was built for

    @property
    def r(self):
        return self.src.shape[1]

    def pairs(self, b=0):
        return [(int(s), int(d), float(v)) for s, d, v in zip(self.src[b], self.dst[b], self.scores[b])]


@dataclass
class RegionEmbeddings:
    tokens: Tensor          # (B, R, d) with R = N+1-L*r; row 0 = e_cls
    owner: np.ndarray       # (B, N+1)
    L: int
    N: int

    @property
    def e_cls(self):
        return self.tokens[:, 0]

    @property
    def regions(self):
        return self.tokens[:, 1:]

    @property
    def R(self):
        return self.tokens.shape[1]

    def region_map(self, b=0):
        """Patch indices (1..N) absorbed by each row; the class row is empty."""
        rows = [[] for _ in range(self.R)]
        for patch in range(1, self.N + 1):
            rows[int(self.owner[b, patch])].append(patch)
        return rows


def token_similarity(x):
    """Cosine similarity between the alternating halves of the non-class tokens.

    Returns (scores, a_idx, b_idx) where a_idx/b_idx are full token indices.
    """
    n = x.shape[1]
    metric = x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)
    a_idx = np.arange(1, n, 2)
    b_idx = np.arange(2, n, 2)
    scores = metric[:, a_idx] @ np.swapaxes(metric[:, b_idx], 1, 2)
    return scores, a_idx, b_idx


def bipartite_soft_match(state, r, metric=None):
    """Choose r merge pairs by bipartite soft matching, class token excluded.

    Non-class tokens are split by alternating index into sources A and
    destinations B; each source proposes its most similar destination and
    the r best proposals are kept. Ties prefer the lower source, then the
    lower destination.
    """
    n_free = state.n - 1
    if r < 0 or 2 * r > n_free:
        raise ParameterError(f"r={r} needs 2r <= {n_free} non-class tokens")
    x = state.tokens.data if metric is None else np.asarray(metric)

    def compute():
        B = x.shape[0]
        if r == 0:
            empty = np.zeros((B, 0), np.int64)
            return empty, empty.copy(), np.zeros((B, 0))
        scores, a_idx, b_idx = token_similarity(x)
        src, dst, val = kernels.bipartite_match(scores, r)
        return a_idx[src], b_idx[dst], val

    src, dst, val = T.decide("merge", compute)
    return MergePlan(src=src, dst=dst, scores=val, n=state.n)


def apply_merge(state, plan):
    """Replace every planned pair by its size-weighted mean."""
    if plan.n != state.n or plan.src.shape[0] != state.tokens.shape[0]:
        raise ContractError(f"stale merge plan: built for {plan.n} tokens, state has {state.n}")
    if plan.r == 0:
        return EncoderBlockState(state.tokens, state.sizes, state.owner, state.block_index, state.r)
    n = state.n
    m = n - plan.r
    slot = kernels.merge_slots(n, plan.src, plan.dst)
    B = slot.shape[0]
    new_sizes = np.zeros((B, m), dtype=state.sizes.dtype)
    np.add.at(new_sizes, (np.arange(B)[:, None], slot), state.sizes)
    weights = state.sizes / np.take_along_axis(new_sizes, slot, axis=1)
    tokens = T.merge_tokens(state.tokens, weights, slot, m)
    owner = np.take_along_axis(slot, state.owner, axis=1)
    return EncoderBlockState(tokens, new_sizes, owner, state.block_index, plan.r)


class EncoderBlock(Module):
    def __init__(self, d, heads, mlp_ratio, rng, dtype=np.float32):
        self.ln1 = LayerNorm(d, dtype)
        self.attn = Attention(d, heads, rng, dtype)
        self.ln2 = LayerNorm(d, dtype)
        self.mlp = MLP(d, d * mlp_ratio, d, rng, dtype)

    def __call__(self, state, r):
        return encoder_block(state, self, r)


def encoder_block(state, block, r):
    """Pre-norm MSA with residual, then token merging, then pre-norm MLP with residual."""
    x = state.tokens
    x = x + block.attn(block.ln1(x))
    mid = EncoderBlockState(x, state.sizes, state.owner, state.block_index, r)
    if r > 0:
        mid = apply_merge(mid, bipartite_soft_match(mid, r))
    x = mid.tokens
    x = x + block.mlp(block.ln2(x))
    return EncoderBlockState(x, mid.sizes, mid.owner, state.block_index + 1, r)


def patchify(frames, patch):
    """(B, H, W, C) -> (B, N, patch*patch*C), patches in row-major grid order."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    B, H, W, C = frames.shape
    if H % patch or W % patch:
        raise ShapeError(f"image {H}x{W} not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    x = frames.reshape(B, gh, patch, gw, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, gh * gw, patch * patch * C)


class RegionEncoder(Module):
    """ViT whose first ``depth - 1`` blocks merge ``r`` token pairs each.

    Only the merge-active blocks are instantiated: the encoder's output is
    taken after block ``depth - 1``, so the final block would never run.
    """

    def __init__(self, image_size, patch_size, channels, d, depth, heads, mlp_ratio, r, rng,
                 dtype=np.float32):
        if depth < 2:
            raise ParameterError(f"depth must be >= 2, got {depth}")
        if image_size % patch_size:
            raise ShapeError(f"image {image_size} not divisible by patch {patch_size}")
        self.patch_size = patch_size
        self.N = (image_size // patch_size) ** 2
        self.d = d
        self.r = r
        self.L = depth - 1
        if self.N + 1 - self.L * r < 2 or any(2 * r > self.N - l * r for l in range(self.L)):
            raise ParameterError(f"r={r} too large for N={self.N} over {self.L} merge blocks")
        self.proj = Linear(patch_size * patch_size * channels, d, rng, dtype)
        self.cls = Tensor((rng.standard_normal(d) * 0.02).astype(dtype), requires_grad=True)
        self.pos = Tensor((rng.standard_normal((self.N + 1, d)) * 0.02).astype(dtype),
                          requires_grad=True)
        self.blocks = [EncoderBlock(d, heads, mlp_ratio, rng, dtype) for _ in range(self.L)]

    def patch_embed(self, frames):
        patches = patchify(frames, self.patch_size)
        if patches.shape[1] != self.N:
            raise ShapeError(f"expected {self.N} patches, got {patches.shape[1]}")
        B = patches.shape[0]
        emb = self.proj(Tensor(patches.astype(self.proj.weight.dtype, copy=False)))
        cls = T.broadcast_to(T.reshape(self.cls, (1, 1, self.d)), (B, 1, self.d))
        tokens = T.concat([cls, emb], axis=1) + self.pos
        return PatchSequence(tokens=tokens, pos_embed=self.pos, N=self.N, d=self.d)

    def encode(self, frames):
        seq = self.patch_embed(frames)
        B = seq.tokens.shape[0]
        state = EncoderBlockState(
            tokens=seq.tokens,
            sizes=np.ones((B, self.N + 1)),
            owner=np.tile(np.arange(self.N + 1), (B, 1)),
        )
        for block in self.blocks:
            state = encoder_block(state, block, self.r)
        return RegionEmbeddings(tokens=state.tokens, owner=state.owner, L=self.L, N=self.N)

    __call__ = encode


def expected_token_count(N, r, l):
    return N + 1 - l * r
