"""Contextual attention over a channels-last feature map.

For a map X of shape (h, w, m) with positions flattened row-major, the
contextual map is

    y_i = sum_j (S[i, j] + T[i, j]) * Wg x_j

where S is the row-softmax of (Wθ x_i)·(Wφ x_j) (similarity context) and

    T[i, j] = sum_k alpha_k * p_k(x_j) * exp(-(d_ij - mu_k)^2 / sigma_k^2)

with p(x_j) = softmax(Wp x_j) and d_ij the grid distance between
positions i and j (semantic context).  Every function here also accepts a
leading batch axis: (n, h, w, m).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ConstraintError, DimensionError, NumericError
from .tensor import Tensor

SIGMA_MIN = 1e-3
DEFAULT_K = 6

MAGIC = b"HCTXATTN"
FORMAT_VERSION = 1


@dataclass
class AttentionParams:
    """Learnable parameters; matrices act on column feature vectors."""

    w_theta: Tensor  # m x m
    w_phi: Tensor  # m x m
    w_g: Tensor  # m x m
    w_p: Tensor  # K x m
    alpha: Tensor  # K
    mu: Tensor  # K, grid-cell units
    sigma: Tensor  # K, grid-cell units

    @property
    def K(self) -> int:
        return self.w_p.shape[0]

    @property
    def m(self) -> int:
        return self.w_g.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "AttentionParams":
        return AttentionParams(**{k: Tensor(t.data, requires_grad=t.requires_grad) for k, t in self.tensors().items()})

    @classmethod
    def from_arrays(cls, requires_grad: bool = True, **arrays) -> "AttentionParams":
        params = cls(**{k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=requires_grad) for k, v in arrays.items()})
        params.validate()
        return params

    @classmethod
    def init(cls, m: int, K: int = DEFAULT_K, h: int = 1, w: int = 1, rng=None) -> "AttentionParams":
        """Xavier-normal weights; mu spread over [0, diag/2], sigma = diag/4, alpha = 1/(2K).

        ``diag`` is the largest distance on an h x w grid.
        """
        rng = np.random.default_rng(rng)
        diag = float(np.hypot(h - 1, w - 1))

        def xavier(rows, cols):
            return rng.normal(0.0, np.sqrt(2.0 / (rows + cols)), (rows, cols))

        return cls.from_arrays(
            w_theta=xavier(m, m),
            w_phi=xavier(m, m),
            w_g=xavier(m, m),
            w_p=xavier(K, m),
            alpha=np.full(K, 1.0 / (2 * K)),
            mu=np.linspace(0.0, diag / 2, K),
            sigma=np.full(K, diag / 4 if diag > 0 else 1.0),
        )

    def validate(self) -> None:
        m, K = self.m, self.K
        expect = {"w_theta": (m, m), "w_phi": (m, m), "w_g": (m, m), "w_p": (K, m),
                  "alpha": (K,), "mu": (K,), "sigma": (K,)}
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"{name} has shape {got}, expected {shape} for m={m}, K={K}")

    def summary(self) -> str:
        lines = [f"AttentionParams m={self.m} K={self.K}"]
        for name, t in self.tensors().items():
            d = t.data
            if d.ndim == 1:
                lines.append(f"  {name}: " + " ".join(f"{v:.6g}" for v in d))
            else:
                lines.append(f"  {name}: shape={d.shape} mean={d.mean():.6g} std={d.std():.6g} "
                             f"absmax={np.abs(d).max():.6g}")
        return "\n".join(lines) + "\n"

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<III", FORMAT_VERSION, self.K, self.m))
        for t in self.tensors().values():
            buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "AttentionParams":
        if blob[:8] != MAGIC:
            raise ValueError("not an attention parameter file (bad magic)")
        version, K, m = struct.unpack_from("<III", blob, 8)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported attention parameter version {version}")
        shapes = [(m, m), (m, m), (m, m), (K, m), (K,), (K,), (K,)]
        need = 20 + 8 * sum(int(np.prod(s)) for s in shapes)
        if len(blob) != need:
            raise ValueError(f"attention parameter file has {len(blob)} bytes, expected {need}")
        offset, arrays = 20, {}
        for f, shape in zip(fields(cls), shapes):
            n = int(np.prod(shape))
            arrays[f.name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
            offset += 8 * n
        return cls.from_arrays(**arrays)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "AttentionParams":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def build_distance_table(h: int, w: int) -> np.ndarray:
    """Pairwise Euclidean distances between cells of an h x w grid, row-major."""
    if h < 1 or w < 1:
        raise DimensionError(f"grid must be at least 1x1, got {h}x{w}")
    r, c = np.divmod(np.arange(h * w), w)
    return np.hypot(r[:, None] - r[None, :], c[:, None] - c[None, :])


def project_constraints(params: AttentionParams, sigma_min: float = SIGMA_MIN) -> AttentionParams:
    """Clamp alpha into [0, 1/K] and sigma into [sigma_min, inf), in place."""
    np.clip(params.alpha.data, 0.0, 1.0 / params.K, out=params.alpha.data)
    np.maximum(params.sigma.data, sigma_min, out=params.sigma.data)
    return params


def _flatten(X: Tensor, params: AttentionParams) -> tuple[Tensor, tuple]:
    if X.ndim not in (3, 4):
        raise DimensionError(f"feature map must be (h,w,m) or (n,h,w,m), got {X.shape}")
    *lead, h, w, m = X.shape
    if m != params.m:
        raise DimensionError(f"feature map has {m} channels but attention params expect m={params.m}")
    return X.reshape(*lead, h * w, m), (h, w)


def _similarity(x: Tensor, params: AttentionParams) -> Tensor:
    q = x @ params.w_theta.mT
    k = x @ params.w_phi.mT
    logits = q @ k.mT
    if not np.all(np.isfinite(logits.data)):
        raise NumericError("similarity logits are not finite")
    return T.softmax(logits, axis=-1)


def _semantic_parts(x: Tensor, D: np.ndarray, params: AttentionParams) -> tuple[Tensor, Tensor]:
    """(prior h_k(d_ij) as K x hw x hw, alpha_k p_k(x_j) as ... x K x hw)."""
    if np.any(params.sigma.data <= 0):
        raise ConstraintError(f"sigma must be positive, got {params.sigma.data}")
    hw = x.shape[-2]
    if D.shape != (hw, hw):
        raise DimensionError(f"distance table {D.shape} does not match {hw} positions")
    K = params.K
    p = T.softmax(x @ params.w_p.mT, axis=-1)  # (..., hw, K)
    diff = T.sub(Tensor(D), params.mu.reshape(K, 1, 1))
    prior = T.exp(-(T.square(diff) / T.square(params.sigma).reshape(K, 1, 1)))  # (K, hw, hw)
    return prior, (p * params.alpha).mT


def _semantic(x: Tensor, D: np.ndarray, params: AttentionParams) -> Tensor:
    prior, weighted = _semantic_parts(x, D, params)
    K, hw = params.K, x.shape[-2]
    lead = weighted.shape[:-2]
    weighted = weighted.reshape(*lead, K, 1, hw)
    return T.sum_(weighted * prior, axis=-3)


def _semantic_pool(x: Tensor, g: Tensor, D: np.ndarray, params: AttentionParams) -> Tensor:
    """T @ g without forming T: sum_k h_k @ (alpha_k p_k(x_j) g_j)."""
    prior, weighted = _semantic_parts(x, D, params)
    K, hw = params.K, x.shape[-2]
    lead = weighted.shape[:-2]
    scaled = weighted.reshape(*lead, K, hw, 1) * g.reshape(*lead, 1, hw, g.shape[-1])
    return T.sum_(prior @ scaled, axis=-3)


def _as_map(X) -> Tensor:
    X = T.as_tensor(X)
    if not np.all(np.isfinite(X.data)):
        raise NumericError("feature map contains non-finite values")
    return X


def similarity_weights(X, params: AttentionParams) -> Tensor:
    """Row-stochastic hw x hw matrix S (batched: n x hw x hw)."""
    x, _ = _flatten(_as_map(X), params)
    return _similarity(x, params)


def semantic_weights(X, D: np.ndarray | None, params: AttentionParams) -> Tensor:
    """hw x hw matrix T with entries in [0, 1] for feasible params."""
    X = _as_map(X)
    x, (h, w) = _flatten(X, params)
    if D is None:
        D = build_distance_table(h, w)
    return _semantic(x, np.asarray(D, dtype=np.float64), params)


def attention_forward(X, params: AttentionParams, similarity: bool = True, semantic: bool = True,
                      D: np.ndarray | None = None) -> Tensor:
    """Contextual feature map Y, same shape as X.

    ``similarity`` / ``semantic`` switch the two pooling terms off for ablations.
    """
    X = _as_map(X)
    x, (h, w) = _flatten(X, params)
    g = x @ params.w_g.mT
    y = None
    if similarity:
        y = _similarity(x, params) @ g
    if semantic:
        if D is None:
            D = build_distance_table(h, w)
        sem = _semantic_pool(x, g, np.asarray(D, dtype=np.float64), params)
        y = sem if y is None else y + sem
    if y is None:
        y = T.scale(g, 0.0)
    return y.reshape(X.shape)


def attention_insert(X, params: AttentionParams, similarity: bool = True, semantic: bool = True,
                     D: np.ndarray | None = None) -> Tensor:
    """Residual combination X + Y used when the module sits inside a network."""
    X = _as_map(X)
    return X + attention_forward(X, params, similarity, semantic, D)
