"""Entity-to-region alignment with Gumbel noise and a straight-through one-hot."""
import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def gumbel_noise(rng, n_frames, K, dtype=np.float32):
    """One Gumbel(0, 1) K-vector per frame, shared by every row of that frame."""
    return rng.gumbel(0.0, 1.0, size=(n_frames, K)).astype(dtype)


def cosine_matrix(E, S):
    """Cosine similarity between rows of E (..., R, d) and rows of S (K, d)."""
    E, S = T.as_tensor(E), T.as_tensor(S)
    if E.shape[-1] != S.shape[-1]:
        raise ShapeError(f"region dim {E.shape[-1]} != entity dim {S.shape[-1]}")
    return T.matmul(T.l2_normalize(E), T.transpose(T.l2_normalize(S)))


def similarity_matrix(E, S, noise=None):
    """Row softmax over entities of cosine(e_i, s_j) + gamma_j.

    ``E`` is (B, R, d) or (R, d); ``noise`` is None (evaluation) or a
    (B, K) / (K,) array of Gumbel samples.
    """
    cos = cosine_matrix(E, S)
    if noise is not None:
        noise = np.asarray(noise, dtype=cos.dtype)
        if noise.shape[-1] != cos.shape[-1]:
            raise ShapeError(f"noise has {noise.shape[-1]} entries, corpus has {cos.shape[-1]}")
        cos = cos + (noise[..., None, :] if noise.ndim == 2 else noise)
    return T.softmax(cos, axis=-1)


def straight_through_assign(A):
    """Forward: exact one-hot at each row's argmax. Backward: gradient of A."""
    return T.straight_through_onehot(A, axis=-1)


def aligned_text_features(A_hat, S):
    """Entity embeddings selected (forward) / weighted (backward) per row."""
    S = T.as_tensor(S)
    if A_hat.shape[-1] != S.shape[0]:
        raise ShapeError(f"assignment has {A_hat.shape[-1]} columns, corpus has {S.shape[0]} rows")
    return T.matmul(A_hat, S)


def argmax_entities(A):
    """Index of the best entity per row; ties go to the lowest index."""
    data = A.data if isinstance(A, Tensor) else np.asarray(A)
    return data.argmax(axis=-1)
