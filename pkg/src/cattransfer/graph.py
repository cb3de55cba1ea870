"""Category graphs: intra-dataset co-occurrence digraphs and bipartite edges."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from .autodiff import DimensionError

log = logging.getLogger(__name__)

EDGE_MODES = ("similarity", "handcrafted", "sum")
RELATION_KINDS = ("subclass", "includes", "similar")


class GraphInputError(ValueError):
    pass


@dataclass
class TransitionMatrix:
    P: np.ndarray
    counts: np.ndarray
    pair_counts: np.ndarray

    def exact(self, i: int, j: int) -> Fraction:
        if self.counts[i] == 0:
            return Fraction(0)
        return Fraction(int(self.pair_counts[i, j]), int(self.counts[i]))


@dataclass
class AdjacencyMatrix:
    A: np.ndarray
    tau: float


@dataclass
class BipartiteEdges:
    B: np.ndarray
    kind: str


def co_occurrence(label_sets: Iterable[Iterable[int]], c: int) -> TransitionMatrix:
    """P_ij = M_ij / M_i from image-level category presence sets.

    A category that never occurs gets an all-zero row.
    """
    presence = []
    for s in label_sets:
        row = np.zeros(c, dtype=np.int64)
        idx = list(s)
        if any(not 0 <= i < c for i in idx):
            raise GraphInputError(f"category index out of range [0, {c}) in {sorted(idx)}")
        row[idx] = 1
        presence.append(row)
    X = np.array(presence, dtype=np.int64).reshape(-1, c)
    pair = X.T @ X
    counts = np.diag(pair).copy()
    P = np.zeros((c, c))
    nz = counts > 0
    P[nz] = pair[nz] / counts[nz, None]
    return TransitionMatrix(P=P, counts=counts, pair_counts=pair)


def threshold(tm: TransitionMatrix | np.ndarray, tau: float) -> AdjacencyMatrix:
    """Binary adjacency: 1 where P_ij >= tau, else 0."""
    if not 0.0 < tau <= 1.0:
        raise GraphInputError(f"tau must be in (0, 1], got {tau}")
    P = tm.P if isinstance(tm, TransitionMatrix) else np.asarray(tm, dtype=np.float64)
    return AdjacencyMatrix(A=(P >= tau).astype(np.float64), tau=float(tau))


def similarity_edges(emb_full: np.ndarray, emb_weak: np.ndarray,
                     full_names: Sequence[str] | None = None,
                     weak_names: Sequence[str] | None = None) -> BipartiteEdges:
    """Row softmax (over weak categories) of cosine similarities."""
    ef = np.asarray(emb_full, dtype=np.float64)
    ew = np.asarray(emb_weak, dtype=np.float64)
    if ef.ndim != 2 or ew.ndim != 2 or ef.shape[1] != ew.shape[1]:
        raise DimensionError(f"embedding tables disagree: {ef.shape} vs {ew.shape}")
    for table, names, side in ((ef, full_names, "full"), (ew, weak_names, "weak")):
        norms = np.linalg.norm(table, axis=1)
        if np.any(norms == 0):
            i = int(np.flatnonzero(norms == 0)[0])
            name = names[i] if names is not None else f"#{i}"
            raise GraphInputError(f"zero-norm embedding for {side} category {name}")
    sim = (ef / np.linalg.norm(ef, axis=1, keepdims=True)) @ \
        (ew / np.linalg.norm(ew, axis=1, keepdims=True)).T
    e = np.exp(sim - sim.max(axis=1, keepdims=True))
    return BipartiteEdges(B=e / e.sum(axis=1, keepdims=True), kind="similarity")


def handcrafted_edges(relations: Iterable[tuple], c_f: int, c_w: int) -> BipartiteEdges:
    B = np.zeros((c_f, c_w))
    for rel in relations:
        i, j = int(rel[0]), int(rel[1])
        if not (0 <= i < c_f and 0 <= j < c_w):
            raise GraphInputError(f"relation ({i}, {j}) out of range for {c_f}x{c_w}")
        B[i, j] = 1.0
    return BipartiteEdges(B=B, kind="handcrafted")


def combine_edges(sim: BipartiteEdges, hc: BipartiteEdges, mode: str = "sum") -> BipartiteEdges:
    if sim.B.shape != hc.B.shape:
        raise DimensionError(f"edge matrices differ: {sim.B.shape} vs {hc.B.shape}")
    if mode == "sum":
        return BipartiteEdges(B=sim.B + hc.B, kind="combined")
    if mode == "sim_only":
        return sim
    if mode == "hc_only":
        return hc
    raise ValueError(f"unknown combine mode {mode!r}")


@dataclass
class SemanticGraph:
    full_names: list[str]
    weak_names: list[str]
    P_f: np.ndarray
    P_w: np.ndarray
    A_f: np.ndarray
    A_w: np.ndarray
    B: np.ndarray
    tau: float
    edge_mode: str

    def to_dict(self) -> dict:
        return {
            "format": "cattransfer-graph", "version": 1,
            "tau": self.tau, "edge_mode": self.edge_mode,
            "full_categories": self.full_names, "weak_categories": self.weak_names,
            "P_f": self.P_f.tolist(), "P_w": self.P_w.tolist(),
            "A_f": self.A_f.tolist(), "A_w": self.A_w.tolist(), "B": self.B.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SemanticGraph":
        if d.get("format") != "cattransfer-graph":
            raise GraphInputError("not a graph dump")
        cf, cw = len(d["full_categories"]), len(d["weak_categories"])

        def mat(key, r, c):
            return np.array(d[key], dtype=np.float64).reshape(r, c)

        return cls(list(d["full_categories"]), list(d["weak_categories"]),
                   mat("P_f", cf, cf), mat("P_w", cw, cw), mat("A_f", cf, cf),
                   mat("A_w", cw, cw), mat("B", cf, cw), float(d["tau"]), d["edge_mode"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SemanticGraph":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise GraphInputError(f"{path}: malformed graph dump ({exc!r})") from None


def build_graph(full_label_sets, weak_label_sets, full_names, weak_names,
                emb_full=None, emb_weak=None, relations=(), tau: float = 0.4,
                edge_mode: str = "similarity") -> SemanticGraph:
    """Assemble P, A and B for both datasets.

    ``edge_mode`` is ``similarity``, ``handcrafted`` or ``sum`` (both kinds).
    """
    if edge_mode not in EDGE_MODES:
        raise GraphInputError(f"edge_mode must be one of {EDGE_MODES}, got {edge_mode!r}")
    c_f, c_w = len(full_names), len(weak_names)
    tf = co_occurrence(full_label_sets, c_f)
    tw = co_occurrence(weak_label_sets, c_w)
    relations = list(relations)
    sim = hc = None
    if edge_mode in ("similarity", "sum"):
        if emb_full is None or emb_weak is None:
            raise GraphInputError(f"edge_mode={edge_mode} needs embeddings")
        sim = similarity_edges(emb_full, emb_weak, full_names, weak_names)
    if edge_mode in ("handcrafted", "sum"):
        if not relations:
            log.warning("no hand-crafted relations given; hand-crafted edges are all zero")
        hc = handcrafted_edges(relations, c_f, c_w)
    if edge_mode == "similarity":
        edges = sim
    elif edge_mode == "handcrafted":
        edges = hc
    else:
        edges = combine_edges(sim, hc, "sum")
    return SemanticGraph(list(full_names), list(weak_names), tf.P, tw.P,
                         threshold(tf, tau).A, threshold(tw, tau).A, edges.B, tau, edge_mode)


# --------------------------------------------------------------------------
# text inputs
# --------------------------------------------------------------------------


def read_embedding_file(path, names: Sequence[str]) -> np.ndarray:
    """Read ``token v1 ... vk`` lines; returns rows in ``names`` order."""
    table: dict[str, np.ndarray] = {}
    k = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                vec = np.array([float(v) for v in parts[1:]])
            except ValueError:
                raise GraphInputError(f"{path}:{lineno}: non-numeric embedding value") from None
            if k is None:
                k = vec.size
            if vec.size != k or k == 0:
                raise GraphInputError(f"{path}:{lineno}: expected {k} values, got {vec.size}")
            table[parts[0]] = vec
    missing = [n for n in names if n not in table]
    if missing:
        raise GraphInputError(f"{path}: no embedding for {missing}")
    return np.stack([table[n] for n in names])


def write_embedding_file(path, names: Sequence[str], table: np.ndarray) -> None:
    with open(path, "w") as fh:
        for n, row in zip(names, table):
            fh.write(n + " " + " ".join(repr(float(v)) for v in row) + "\n")


def read_relation_file(path, full_names: Sequence[str],
                       weak_names: Sequence[str]) -> list[tuple[int, int, str]]:
    """``full_name<TAB>weak_name<TAB>kind`` per line; ``#`` starts a comment."""
    fi = {n: i for i, n in enumerate(full_names)}
    wi = {n: j for j, n in enumerate(weak_names)}
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise GraphInputError(f"{path}:{lineno}: expected 3 tab-separated fields")
            f, w, kind = (p.strip() for p in parts)
            if kind not in RELATION_KINDS:
                raise GraphInputError(f"{path}:{lineno}: unknown relation kind {kind!r}")
            if f not in fi or w not in wi:
                raise GraphInputError(f"{path}:{lineno}: unknown category in {f!r}, {w!r}")
            out.append((fi[f], wi[w], kind))
    return out


def write_relation_file(path, relations, full_names, weak_names) -> None:
    with open(path, "w") as fh:
        for i, j, kind in relations:
            fh.write(f"{full_names[i]}\t{weak_names[j]}\t{kind}\n")
