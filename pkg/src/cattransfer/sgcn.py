"""Semantic graph convolution with cross-graph updates, and feature fusion.

Two GCN layers run on the full and weak co-occurrence graphs with shared
weights; after each layer the bipartite edges ``B`` exchange information
between the graphs through per-dataset weights.  The resulting category
features are fused into region features as ``F + g(F H^T)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

SLOPE = 0.2


def uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)


@dataclass
class SemanticFeatures:
    H_f: Tensor
    H_w: Tensor


@dataclass
class SgcnParams:
    gcn: list[Tensor]
    cross_f: list[Tensor]
    cross_w: list[Tensor]
    g_f: Tensor
    g_w: Tensor
    proj: Tensor | None = None

    def named(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, wf, ww) in enumerate(zip(self.gcn, self.cross_f, self.cross_w)):
            out[f"gcn{i}"] = w
            out[f"cross_f{i}"] = wf
            out[f"cross_w{i}"] = ww
        if self.proj is not None:
            out["proj"] = self.proj
        out.update(g_f=self.g_f, g_w=self.g_w)
        return out


def init_sgcn(rng: np.random.Generator, k: int, hidden: tuple[int, ...], d: int,
              c_f: int, c_w: int) -> SgcnParams:
    dims = [k, *hidden]
    gcn = [uniform_init(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
    cross_f = [uniform_init(rng, h, h) for h in hidden]
    cross_w = [uniform_init(rng, h, h) for h in hidden]
    proj = None
    if hidden[-1] != d:
        proj = Tensor(rng.normal(0.0, 0.01, size=(hidden[-1], d)), requires_grad=True)
    return SgcnParams(
        gcn=gcn, cross_f=cross_f, cross_w=cross_w, proj=proj,
        g_f=Tensor(np.zeros((c_f, d)), requires_grad=True),
        g_w=Tensor(np.zeros((c_w, d)), requires_grad=True),
    )


def normalize_adjacency(A) -> Tensor:
    """Row-stochastic D^-1 A; all-zero rows stay zero."""
    A = np.asarray(A.A if hasattr(A, "A") else A, dtype=np.float64)
    deg = A.sum(axis=1, keepdims=True)
    out = np.divide(A, deg, out=np.zeros_like(A), where=deg > 0)
    return Tensor(out)


def gcn_layer(A_hat, H, W) -> Tensor:
    """leaky_relu(A_hat @ H @ W)."""
    A_hat, H, W = ad.as_tensor(A_hat), ad.as_tensor(H), ad.as_tensor(W)
    if A_hat.shape[1] != H.shape[0]:
        raise DimensionError(f"gcn_layer: adjacency {A_hat.shape} vs features {H.shape}")
    return ad.leaky_relu(A_hat @ (H @ W), SLOPE)


def cross_update(Z_f, Z_w, B, W_f, W_w) -> tuple[Tensor, Tensor]:
    """H_f = Z_f + act(B Z_w W_f);  H_w = Z_w + act(B^T Z_f W_w)."""
    Z_f, Z_w, B = ad.as_tensor(Z_f), ad.as_tensor(Z_w), ad.as_tensor(B)
    if B.shape != (Z_f.shape[0], Z_w.shape[0]):
        raise DimensionError(f"cross_update: B {B.shape} vs Z_f {Z_f.shape}, Z_w {Z_w.shape}")
    H_f = Z_f + ad.leaky_relu(B @ (Z_w @ W_f), SLOPE)
    H_w = Z_w + ad.leaky_relu(ad.transpose(B) @ (Z_f @ W_w), SLOPE)
    return H_f, H_w


def sgcn_forward(A_hat_f, A_hat_w, B, H0_f, H0_w, params: SgcnParams) -> SemanticFeatures:
    H_f, H_w = ad.as_tensor(H0_f), ad.as_tensor(H0_w)
    B = ad.as_tensor(B)
    for W, W_f, W_w in zip(params.gcn, params.cross_f, params.cross_w):
        Z_f = gcn_layer(A_hat_f, H_f, W)
        Z_w = gcn_layer(A_hat_w, H_w, W)
        H_f, H_w = cross_update(Z_f, Z_w, B, W_f, W_w)
    if params.proj is not None:
        H_f, H_w = H_f @ params.proj, H_w @ params.proj
    return SemanticFeatures(H_f, H_w)


def fuse(F, H, g) -> Tensor:
    """F + (F H^T) g: residual injection of category scores.

    ``g`` is a plain linear map (no bias), so with ``g = 0`` the result is
    exactly ``F``.
    """
    F, H, g = ad.as_tensor(F), ad.as_tensor(H), ad.as_tensor(g)
    if F.shape[1] != H.shape[1]:
        raise DimensionError(f"fuse: region features {F.shape} vs semantic {H.shape}")
    if g.shape != (H.shape[0], F.shape[1]):
        raise DimensionError(f"fuse: map {g.shape} should be {(H.shape[0], F.shape[1])}")
    if F.shape[0] == 0:
        return Tensor(np.zeros((0, F.shape[1])))
    return F + (F @ ad.transpose(H)) @ g
