"""Grouped least squares instances: ``min_x sum_i ||x - s_i||_{L_i}``.

All groups of an instance are stacked into a single sparse row matrix so
that per-group norms, weighted aggregates ``sum_i a_i L_i`` and the
matching right-hand sides are computed with a handful of vectorized ops.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .linalg import (GramMatrix, SddMatrix, _RowForm, assemble_laplacian,
                     singular_components, solve_sdd)


class Group:
    """One objective term: a PSD matrix ``L`` and fixed potentials ``s``.

    ``s`` may be a dense vector, a ``{index: value}`` mapping, or ``None``
    (all zeros).  Only nonzero coordinates are kept.
    """

    def __init__(self, L: _RowForm, s=None):
        self.L = L
        n = L.n
        if s is None:
            idx, val = np.zeros(0, dtype=np.int64), np.zeros(0)
        elif isinstance(s, Mapping):
            items = sorted((int(u), float(v)) for u, v in s.items())
            idx = np.array([u for u, _ in items], dtype=np.int64)
            val = np.array([v for _, v in items], dtype=float)
            if len(idx) and (idx[0] < 0 or idx[-1] >= n):
                raise IndexError("potential index out of range")
            if len(np.unique(idx)) != len(idx):
                raise ValueError("duplicate potential index")
        else:
            dense = np.asarray(s, dtype=float)
            if dense.shape != (n,):
                raise ValueError(f"s has shape {dense.shape}, expected ({n},)")
            idx = np.flatnonzero(dense)
            val = dense[idx]
        if not np.all(np.isfinite(val)):
            raise ValueError("potentials must be finite")
        keep = val != 0
        self.s_idx = idx[keep]
        self.s_val = val[keep]

    @property
    def n(self) -> int:
        return self.L.n

    def s_dense(self) -> np.ndarray:
        s = np.zeros(self.n)
        s[self.s_idx] = self.s_val
        return s

    def norm(self, x) -> float:
        z = np.asarray(x, dtype=float) - self.s_dense()
        return float(np.sqrt(max(self.L.quad_form(z), 0.0)))

    def __repr__(self) -> str:
        return f"Group({self.L!r}, nnz(s)={len(self.s_idx)})"


@dataclass
class _Stack:
    R: sp.csr_matrix        # rows x n coefficients
    c: np.ndarray           # row weights
    gid: np.ndarray         # row -> group
    target: np.ndarray      # a_r^T s_{gid(r)}
    G: sp.csr_matrix        # rows x k indicator
    agg_indptr: np.ndarray  # CSR pattern of R^T diag(.) R
    agg_indices: np.ndarray
    agg_map: sp.csr_matrix  # pattern entries x rows


class Instance:
    """Dimension ``n`` and ``k >= 1`` groups sharing it."""

    def __init__(self, n: int, groups: Sequence[Group]):
        self.n = int(n)
        self.groups = list(groups)
        if not self.groups:
            raise ValueError("an instance needs at least one group")
        for i, g in enumerate(self.groups):
            if g.n != self.n:
                raise ValueError(f"group {i} has dimension {g.n}, instance has {self.n}")
        self._stack: _Stack | None = None
        self._null_blocks: list[np.ndarray] | None = None

    @property
    def k(self) -> int:
        return len(self.groups)

    def __repr__(self) -> str:
        return f"Instance(n={self.n}, k={self.k})"

    @property
    def stack(self) -> _Stack:
        if self._stack is None:
            self._stack = self._build_stack()
        return self._stack

    def _build_stack(self) -> _Stack:
        rows, cols, coefs, weights, gids = [], [], [], [], []
        s_keys, s_vals = [], []
        offset = 0
        for i, g in enumerate(self.groups):
            r, c, a, w = g.L.row_form()
            rows.append(r + offset)
            cols.append(c)
            coefs.append(a)
            weights.append(w)
            gids.append(np.full(len(w), i, dtype=np.int64))
            offset += len(w)
            s_keys.append(i * self.n + g.s_idx)
            s_vals.append(g.s_val)
        row = np.concatenate(rows)
        col = np.concatenate(cols)
        coef = np.concatenate(coefs)
        c = np.concatenate(weights)
        gid = np.concatenate(gids)
        R = sp.csr_matrix((coef, (row, col)), shape=(offset, self.n))
        R.sum_duplicates()

        # row targets a_r^T s_g via sorted (group, vertex) keys
        keys = np.concatenate(s_keys)
        vals = np.concatenate(s_vals)
        order = np.argsort(keys, kind="stable")
        keys, vals = keys[order], vals[order]
        s_at = np.zeros(len(row))
        if len(keys):
            entry_key = gid[row] * self.n + col
            pos = np.minimum(np.searchsorted(keys, entry_key), len(keys) - 1)
            hit = keys[pos] == entry_key
            s_at[hit] = vals[pos[hit]]
        target = np.bincount(row, weights=coef * s_at, minlength=offset)

        G = sp.csr_matrix((np.ones(offset), (np.arange(offset), gid)), shape=(offset, self.k))
        indptr, indices, agg_map = _aggregate_pattern(R, self.n)
        return _Stack(R=R, c=c, gid=gid, target=target, G=G, agg_indptr=indptr,
                      agg_indices=indices, agg_map=agg_map)

    def residual_rows(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.n,):
            raise ValueError(f"x has shape {x.shape}, expected ({self.n},)")
        st = self.stack
        return st.R @ x - st.target

    def group_sq_norms(self, x) -> np.ndarray:
        """``||x - s_i||_{L_i}^2`` for every group, clamped at zero."""
        st = self.stack
        r = self.residual_rows(x)
        q = np.bincount(st.gid, weights=st.c * r * r, minlength=self.k)
        return np.maximum(q, 0.0)

    def group_norms(self, x) -> np.ndarray:
        return np.sqrt(self.group_sq_norms(x))

    def group_gradients(self, x) -> sp.csc_matrix:
        """Sparse ``n x k`` matrix whose column ``i`` is ``L_i (x - s_i)``."""
        st = self.stack
        r = self.residual_rows(x)
        scaled = sp.diags(st.c * r) @ st.G
        return (st.R.T @ scaled).tocsc()

    def aggregate(self, coeffs) -> sp.csr_matrix:
        """``sum_i coeffs_i L_i`` as a sparse matrix."""
        st = self.stack
        rw = st.c * np.asarray(coeffs, dtype=float)[st.gid]
        data = st.agg_map @ rw
        return sp.csr_matrix((data, st.agg_indices, st.agg_indptr), shape=(self.n, self.n))

    def aggregate_rhs(self, coeffs) -> np.ndarray:
        """``sum_i coeffs_i L_i s_i``."""
        st = self.stack
        rw = st.c * np.asarray(coeffs, dtype=float)[st.gid]
        return st.R.T @ (rw * st.target)

    @property
    def single_row(self) -> np.ndarray:
        """Mask of groups whose matrix is a single weighted outer product."""
        return np.bincount(self.stack.gid, minlength=self.k) == 1

    @property
    def null_blocks(self) -> list[np.ndarray]:
        """Blocks of variables along which every group is invariant to shifts."""
        if self._null_blocks is None:
            self._null_blocks = singular_components(self.aggregate(np.ones(self.k)))
        return self._null_blocks

    def lipschitz_bound(self) -> float:
        """Upper bound on the Euclidean Lipschitz constant of ``obj``."""
        return float(sum(math.sqrt(g.L.gershgorin_bound()) for g in self.groups))


def _aggregate_pattern(R: sp.csr_matrix, n: int):
    """Sparsity pattern of ``R^T diag(rw) R`` and the linear map ``rw -> data``."""
    R = R.tocsr()
    R.sort_indices()
    lens = np.diff(R.indptr)
    rows_a, cols_a, cols_b, prod = [], [], [], []
    for m in np.unique(lens):
        if m == 0:
            continue
        rids = np.flatnonzero(lens == m)
        starts = R.indptr[rids]
        pos = starts[:, None] + np.arange(m)[None, :]
        idx = R.indices[pos]
        val = R.data[pos]
        rows_a.append(np.repeat(rids, m * m))
        cols_a.append(np.repeat(idx, m, axis=1).ravel())
        cols_b.append(np.tile(idx, (1, m)).ravel())
        prod.append((val[:, :, None] * val[:, None, :]).ravel())
    if rows_a:
        rid = np.concatenate(rows_a)
        a = np.concatenate(cols_a)
        b = np.concatenate(cols_b)
        pv = np.concatenate(prod)
    else:
        rid = a = b = np.zeros(0, dtype=np.int64)
        pv = np.zeros(0)
    key = a.astype(np.int64) * n + b
    uniq, inv = np.unique(key, return_inverse=True)
    ua, ub = uniq // n, uniq % n
    indptr = np.concatenate([[0], np.cumsum(np.bincount(ua, minlength=n))]).astype(np.int64)
    agg_map = sp.csr_matrix((pv, (inv, rid)), shape=(len(uniq), R.shape[0]))
    return indptr, ub.astype(np.int64), agg_map


def _check_weights(w, k: int) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (k,):
        raise ValueError(f"expected {k} weights, got shape {w.shape}")
    if not np.all(w > 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be positive and finite")
    return w


def obj(inst: Instance, x) -> float:
    """``sum_i ||x - s_i||_{L_i}``."""
    return float(inst.group_norms(x).sum())


def obj2(inst: Instance, x, w) -> float:
    """``sum_i ||x - s_i||_{L_i}^2 / w_i``."""
    w = _check_weights(w, inst.k)
    return float(np.sum(inst.group_sq_norms(x) / w))


def quad_min(inst: Instance, w, tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Minimize ``obj2(inst, ., w)`` with one SDD solve.

    Solves ``(sum_i L_i / w_i) x = sum_i L_i s_i / w_i`` and returns the
    minimizer together with ``obj2`` recomputed at it.
    """
    w = _check_weights(w, inst.k)
    alpha = 1.0 / w
    A = inst.aggregate(alpha)
    b = inst.aggregate_rhs(alpha)
    x, _ = solve_sdd(A, b, tol=tol, null_blocks=inst.null_blocks)
    return x, obj2(inst, x, w)


# ---------------------------------------------------------------------------
# solutions and traces

MW_TRACE_COLUMNS = ("iter", "mu_prev", "mu", "lambda", "obj", "opt2", "min_weight_share")
IPM_TRACE_COLUMNS = ("stage", "t", "newton_steps", "grad_norm", "sum_y", "obj", "gap_bound")


@dataclass
class Solution:
    x: np.ndarray
    objective: float
    iterations: int
    trace: list[dict] = field(default_factory=list)
    solver_tag: str = ""
    info: dict = field(default_factory=dict)

    @property
    def trace_columns(self) -> tuple[str, ...]:
        return IPM_TRACE_COLUMNS if self.solver_tag == "ipm" else MW_TRACE_COLUMNS


def write_trace(sol: Solution, fh: IO[str]) -> None:
    """Whitespace-separated table, one header line then one row per record."""
    cols = sol.trace_columns
    fh.write(" ".join(cols) + "\n")
    for rec in sol.trace:
        fh.write(" ".join(_fmt(rec[c]) for c in cols) + "\n")


def read_trace(fh: IO[str]) -> tuple[tuple[str, ...], list[dict]]:
    lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    cols = tuple(lines[0].split())
    recs = [dict(zip(cols, (float(v) for v in ln.split()))) for ln in lines[1:]]
    return cols, recs


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# ---------------------------------------------------------------------------
# text format

class InstanceFormatError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def parse_instance(text: str) -> Instance:
    """Parse the ``gls <n> <k>`` text format (see README)."""
    header = None
    blocks: list[dict] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if header is None:
                if tok[0] != "gls" or len(tok) != 3:
                    raise InstanceFormatError(lineno, "expected header 'gls <n> <k>'")
                header = (int(tok[1]), int(tok[2]))
                if header[0] < 0 or header[1] < 1:
                    raise InstanceFormatError(lineno, "need n >= 0 and k >= 1")
                continue
            n = header[0]
            op = tok[0]
            if op == "group":
                if len(tok) != 1:
                    raise InstanceFormatError(lineno, "'group' takes no arguments")
                blocks.append({"e": [], "d": [], "s": {}, "r": []})
                continue
            if not blocks:
                raise InstanceFormatError(lineno, f"directive '{op}' before first 'group'")
            blk = blocks[-1]
            if op == "e":
                if len(tok) != 4:
                    raise InstanceFormatError(lineno, "expected 'e <u> <v> <w>'")
                u, v, w = int(tok[1]), int(tok[2]), float(tok[3])
                _check_index(lineno, n, u, v)
                if u == v:
                    raise InstanceFormatError(lineno, "self loop")
                if not w > 0:
                    raise InstanceFormatError(lineno, "edge weight must be positive")
                blk["e"].append((u, v, w))
            elif op == "d":
                if len(tok) != 3:
                    raise InstanceFormatError(lineno, "expected 'd <u> <val>'")
                u, d = int(tok[1]), float(tok[2])
                _check_index(lineno, n, u)
                if not d >= 0:
                    raise InstanceFormatError(lineno, "diagonal entry must be nonnegative")
                blk["d"].append((u, d))
            elif op == "s":
                if len(tok) != 3:
                    raise InstanceFormatError(lineno, "expected 's <u> <val>'")
                u, val = int(tok[1]), float(tok[2])
                _check_index(lineno, n, u)
                if not math.isfinite(val):
                    raise InstanceFormatError(lineno, "potential must be finite")
                blk["s"][u] = val
            elif op == "r":
                if len(tok) < 4 or len(tok) % 2 != 0:
                    raise InstanceFormatError(lineno, "expected 'r <c> <u> <a> [<u> <a> ...]'")
                c = float(tok[1])
                if not c > 0:
                    raise InstanceFormatError(lineno, "row weight must be positive")
                coefs = {}
                for j in range(2, len(tok), 2):
                    u = int(tok[j])
                    _check_index(lineno, n, u)
                    coefs[u] = coefs.get(u, 0.0) + float(tok[j + 1])
                blk["r"].append((c, coefs))
            else:
                raise InstanceFormatError(lineno, f"unknown directive '{op}'")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, InstanceFormatError):
                raise
            raise InstanceFormatError(lineno, str(exc)) from None
    if header is None:
        raise InstanceFormatError(0, "empty instance file")
    n, k = header
    if len(blocks) != k:
        raise InstanceFormatError(0, f"header declares {k} groups, found {len(blocks)}")
    groups = []
    for blk in blocks:
        if blk["r"]:
            rows = list(blk["r"])
            rows += [(w, {u: 1.0, v: -1.0}) for u, v, w in blk["e"]]
            rows += [(d, {u: 1.0}) for u, d in blk["d"]]
            L = GramMatrix(n, rows)
        else:
            L = assemble_laplacian(n, blk["e"], blk["d"])
        groups.append(Group(L, blk["s"]))
    return Instance(n, groups)


def _check_index(lineno: int, n: int, *idx: int) -> None:
    for u in idx:
        if not 0 <= u < n:
            raise InstanceFormatError(lineno, f"index {u} out of range for n={n}")


def serialize_instance(inst: Instance) -> str:
    out = io.StringIO()
    out.write(f"gls {inst.n} {inst.k}\n")
    for g in inst.groups:
        out.write("group\n")
        L = g.L
        if isinstance(L, SddMatrix):
            for u, v, w in L.edges:
                out.write(f"e {u} {v} {w!r}\n")
            for u, d in L.diag:
                out.write(f"d {u} {d!r}\n")
        else:
            for c, coefs in L.rows:
                body = " ".join(f"{u} {a!r}" for u, a in sorted(coefs.items()))
                out.write(f"r {c!r} {body}\n")
        for u, val in zip(g.s_idx, g.s_val):
            out.write(f"s {int(u)} {float(val)!r}\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# generators

def random_instance(n: int, k: int, rng: np.random.Generator, *,
                    edge_prob: float = 0.35, diag_prob: float = 0.2,
                    s_scale: float = 1.0) -> Instance:
    """Random instance whose aggregate ``sum_i L_i`` is nonsingular.

    Each group gets random edges with weights in ``[0.5, 2]``, occasional
    diagonal entries and dense random potentials.  Group 0 always carries at
    least one diagonal entry and every vertex is touched by some group.
    """
    parts = []
    touched = np.zeros(n, dtype=bool)
    for i in range(k):
        edges = []
        for u in range(n):
            for v in range(u + 1, n):
                if rng.random() < edge_prob / max(1, k) ** 0.5:
                    edges.append((u, v, rng.uniform(0.5, 2.0)))
        diag = [(u, rng.uniform(0.5, 2.0)) for u in range(n) if rng.random() < diag_prob]
        if i == 0 and not diag:
            diag.append((int(rng.integers(n)), rng.uniform(0.5, 2.0)))
        if i == k - 1:
            for u in np.flatnonzero(~touched):
                if not any(u in (a, b) for a, b, _ in edges) and not any(u == a for a, _ in diag):
                    diag.append((int(u), rng.uniform(0.5, 2.0)))
        if not edges and not diag:
            diag.append((int(rng.integers(n)), rng.uniform(0.5, 2.0)))
        for a, b, _ in edges:
            touched[a] = touched[b] = True
        for a, _ in diag:
            touched[a] = True
        parts.append((edges, diag, rng.normal(scale=s_scale, size=n)))

    # ground every connected component that no diagonal entry reaches
    all_edges = [(a, b) for edges, _, _ in parts for a, b, _ in edges]
    adj = sp.csr_matrix((np.ones(len(all_edges)), ([a for a, _ in all_edges],
                                                  [b for _, b in all_edges])), shape=(n, n))
    ncomp, label = connected_components(adj, directed=False)
    grounded = np.zeros(ncomp, dtype=bool)
    for _, diag, _ in parts:
        for a, _ in diag:
            grounded[label[a]] = True
    for c in np.flatnonzero(~grounded):
        parts[-1][1].append((int(np.flatnonzero(label == c)[0]), rng.uniform(0.5, 2.0)))

    return Instance(n, [Group(assemble_laplacian(n, edges, diag), s) for edges, diag, s in parts])


def tv_chain_instance(n: int, k: int, rng: np.random.Generator, *, lam: float = 1.0,
                      noise: float = 0.3) -> Instance:
    """Path-graph total variation toy with ``k`` groups.

    Group 0 is the fidelity term ``||x - y||_2`` for a noisy step signal
    ``y``; the ``n - 1`` path edges are split into ``k - 1`` contiguous
    blocks, each one group scaled by ``lam**2``.
    """
    if k < 2 or k - 1 > n - 1:
        raise ValueError("need 2 <= k <= n")
    clean = np.where(np.arange(n) < n // 2, 0.0, 1.0)
    y = clean + rng.normal(scale=noise, size=n)
    groups = [Group(assemble_laplacian(n, (), [(u, 1.0) for u in range(n)]), y)]
    cuts = np.linspace(0, n - 1, k, dtype=int)
    for a, b in zip(cuts[:-1], cuts[1:]):
        edges = [(u, u + 1, lam ** 2) for u in range(a, b)]
        groups.append(Group(assemble_laplacian(n, edges)))
    return Instance(n, groups)
