"""Video adapter and the full align-before-adapt model.

Per frame: aligned entity features give a query, the region tokens give a
key/value vector. M decoder blocks (self-attention over frame queries,
temporal convolution over key/values, cross-attention between them) evolve
the queries; the pooled result is projected to the video vector ``z``.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .alignment import aligned_text_features, similarity_matrix, straight_through_assign
from .encoder import RegionEmbeddings, RegionEncoder
from .errors import ShapeError
from .nn import MLP, Attention, LayerNorm, Module, TemporalConv
from .tensor import Tensor


class AdapterBlock(Module):
    """Residual branches start at zero so a fresh block passes queries through."""

    def __init__(self, d, heads, kernel_size, rng, dtype=np.float32, out_scale=0.0):
        self.ln_sa = LayerNorm(d, dtype)
        self.sa = Attention(d, heads, rng, dtype, out_scale)
        self.conv = TemporalConv(d, kernel_size, rng, dtype)
        self.ln_q = LayerNorm(d, dtype)
        self.ln_kv = LayerNorm(d, dtype)
        self.ca = Attention(d, heads, rng, dtype, out_scale)


def frame_query(aligned, mlp):
    """Mean over the R aligned rows, then the query MLP. (..., R, d) -> (..., d)."""
    if aligned.shape[-1] != mlp.fc1.weight.shape[0]:
        raise ShapeError(f"aligned features have dim {aligned.shape[-1]}, "
                         f"MLP expects {mlp.fc1.weight.shape[0]}")
    return mlp(T.mean(aligned, axis=-2))


def frame_keyvalue(E, mlp, pool="all"):
    """Mean over all tokens (or the class token only), then the key/value MLP."""
    tokens = E.tokens if isinstance(E, RegionEmbeddings) else T.as_tensor(E)
    if tokens.shape[-1] != mlp.fc1.weight.shape[0]:
        raise ShapeError(f"tokens have dim {tokens.shape[-1]}, MLP expects {mlp.fc1.weight.shape[0]}")
    pooled = tokens[..., 0, :] if pool == "cls" else T.mean(tokens, axis=-2)
    return mlp(pooled)


def adapter_block(Q, E_hat, block, use_sa=True, use_ca=True, use_conv=True):
    """One decoder block. Q and E_hat are (B, T, d).

    The temporal convolution always reads the adapter's original key/values
    ``E_hat``, not the previous block's.
    """
    if Q.shape != E_hat.shape:
        raise ShapeError(f"queries {Q.shape} and key/values {E_hat.shape} differ")
    Q_prime = Q + block.sa(block.ln_sa(Q)) if use_sa else Q
    E_m = E_hat + block.conv(E_hat) if use_conv else E_hat
    if not use_ca:
        return Q_prime
    kv = block.ln_kv(E_m)
    return Q_prime + block.ca(block.ln_q(Q_prime), kv, kv)


@dataclass
class VideoOutput:
    z: Tensor                   # (B, d) unit rows
    A: Tensor = None            # (B*T, R, K) soft alignment
    regions: RegionEmbeddings = None
    Q0: Tensor = None           # (B, T, d)


class ALTModel(Module):
    """Region encoder + alignment + video adapter, parameterised by a TrainConfig."""

    def __init__(self, cfg, rng=None):
        rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        dt = cfg.dtype
        d = cfg.d
        self.cfg = cfg
        self.encoder = RegionEncoder(cfg.image_size, cfg.patch_size, cfg.channels, d, cfg.depth,
                                     cfg.n_heads, cfg.mlp_ratio, cfg.r, rng, dt)
        self.mlp_q = MLP(d, d, d, rng, dt, skip=True)
        self.mlp_kv = MLP(d, d, d, rng, dt, skip=True)
        self.blocks = [AdapterBlock(d, cfg.n_adapter_heads, cfg.kernel_size, rng, dt)
                       for _ in range(cfg.M)]
        self.mlp_out = MLP(d, d, d, rng, dt, skip=True)
        if cfg.query_mode == "learnable":
            self.query = Tensor((rng.standard_normal(d) / np.sqrt(d)).astype(dt), requires_grad=True)

    def param_groups(self):
        """(backbone, head) parameter name lists."""
        names = [n for n, _ in self.named_parameters()]
        backbone = [n for n in names if n.startswith("encoder.")]
        head = [n for n in names if not n.startswith("encoder.")]
        return backbone, head

    def encode_frames(self, frames):
        frames = np.asarray(frames)
        if frames.ndim == 4:
            frames = frames[None]
        B, Tn = frames.shape[:2]
        flat = frames.reshape((B * Tn,) + frames.shape[2:])
        return self.encoder(flat), B, Tn

    def forward(self, frames, S, noise=None, queries=None):
        """Video vectors for a (B, T, H, W, C) batch against entity matrix S (K, d).

        ``noise`` is an optional (B*T, K) Gumbel sample. ``queries`` overrides
        the initial adapter queries Q0 with a (B, T, d) tensor.
        """
        cfg = self.cfg
        regions, B, Tn = self.encode_frames(frames)
        d = cfg.d
        A = None
        if queries is None:
            if cfg.query_mode == "learnable":
                queries = T.broadcast_to(T.reshape(self.query, (1, 1, d)), (B, Tn, d))
            else:
                S_t = Tensor(np.asarray(S, dtype=cfg.dtype))
                A = similarity_matrix(regions.tokens, S_t, noise)
                aligned = aligned_text_features(straight_through_assign(A), S_t)
                queries = T.reshape(frame_query(aligned, self.mlp_q), (B, Tn, d))
        Q0 = queries
        E_hat = T.reshape(frame_keyvalue(regions, self.mlp_kv, cfg.kv_pool), (B, Tn, d))
        Q = Q0
        for block in self.blocks:
            Q = adapter_block(Q, E_hat, block, cfg.use_sa, cfg.use_ca, cfg.use_conv)
        z = T.l2_normalize(self.mlp_out(T.mean(Q, axis=1)))
        return VideoOutput(z=z, A=A, regions=regions, Q0=Q0)

    __call__ = forward

    def alignment(self, frames, S):
        """Noise-free soft alignment and region embeddings for a batch of clips."""
        with T.no_grad():
            regions, _, _ = self.encode_frames(frames)
            A = similarity_matrix(regions.tokens, np.asarray(S, dtype=self.cfg.dtype), None)
        return A, regions


def video_representation(model, frames, S, noise=None):
    return model.forward(frames, S, noise).z


def learnable_query_forward(model, frames, queries=None):
    """Forward with Q0 replaced by ``queries`` (default: the model's learnable query)."""
    if queries is None:
        if not hasattr(model, "query"):
            raise ValueError("model has no learnable query; build it with query_mode='learnable'")
        B, Tn = np.asarray(frames).shape[:2]
        d = model.cfg.d
        queries = T.broadcast_to(T.reshape(model.query, (1, 1, d)), (B, Tn, d))
    return model.forward(frames, None, queries=queries).z
