"""Encoders that turn other problems into grouped least squares instances.

* shortest s-t path as a flow problem with an exact conservation penalty,
* minimum s-t cut as a fused-lasso labeling,
* squared-Euclidean fidelity by one-dimensional searches over Lagrangians,
* L1 fidelity by one single-coordinate group per variable,
* convex clustering with pairwise group penalties.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .instance import Group, Instance, Solution, obj
from .ipm import IpmConfig, QuadFidelity, solve_ipm
from .linalg import GramMatrix, assemble_laplacian, identity

Solver = Callable[[Instance], Solution]

# ---------------------------------------------------------------------------
# graphs


class GraphFormatError(ValueError):
    pass


class PointsFormatError(ValueError):
    pass


@dataclass
class WeightedGraph:
    """Undirected graph; ``value`` is a length or a capacity depending on use."""

    n: int
    edges: list[tuple[int, int, float]] = field(default_factory=list)

    def __post_init__(self):
        clean = []
        for u, v, val in self.edges:
            u, v, val = int(u), int(v), float(val)
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise ValueError(f"edge ({u}, {v}) out of range for n={self.n}")
            if u == v:
                raise ValueError(f"self loop at {u}")
            if not val > 0 or not math.isfinite(val):
                raise ValueError(f"edge value must be positive, got {val}")
            clean.append((u, v, val))
        self.edges = clean

    @property
    def m(self) -> int:
        return len(self.edges)

    @property
    def integral(self) -> bool:
        return all(float(val).is_integer() for _, _, val in self.edges)

    def adjacency(self) -> list[list[tuple[int, int]]]:
        """``adj[u]`` lists ``(neighbor, edge index)``."""
        adj: list[list[tuple[int, int]]] = [[] for _ in range(self.n)]
        for e, (u, v, _) in enumerate(self.edges):
            adj[u].append((v, e))
            adj[v].append((u, e))
        return adj


def parse_graph(text: str) -> WeightedGraph:
    header = None
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        try:
            if header is None:
                if tok[0] != "graph" or len(tok) != 3:
                    raise GraphFormatError(f"line {lineno}: expected 'graph <n> <m>'")
                header = (int(tok[1]), int(tok[2]))
                continue
            if len(tok) != 3:
                raise GraphFormatError(f"line {lineno}: expected '<u> <v> <value>'")
            edges.append((int(tok[0]), int(tok[1]), float(tok[2])))
        except ValueError as exc:
            if isinstance(exc, GraphFormatError):
                raise
            raise GraphFormatError(f"line {lineno}: {exc}") from None
    if header is None:
        raise GraphFormatError("empty graph file")
    if len(edges) != header[1]:
        raise GraphFormatError(f"header declares {header[1]} edges, found {len(edges)}")
    try:
        return WeightedGraph(header[0], edges)
    except ValueError as exc:
        raise GraphFormatError(str(exc)) from None


def serialize_graph(g: WeightedGraph) -> str:
    lines = [f"graph {g.n} {g.m}"]
    lines += [f"{u} {v} {val!r}" for u, v, val in g.edges]
    return "\n".join(lines) + "\n"


def _bfs_path_edges(g: WeightedGraph, s: int, t: int) -> list[tuple[int, int]]:
    """Edges of some s-t path as ``(edge index, direction)`` with direction +1 along ``u -> v``."""
    adj = g.adjacency()
    prev: dict[int, tuple[int, int]] = {s: (-1, -1)}
    queue = deque([s])
    while queue:
        u = queue.popleft()
        if u == t:
            break
        for v, e in adj[u]:
            if v not in prev:
                prev[v] = (u, e)
                queue.append(v)
    if t not in prev:
        raise ValueError(f"vertices {s} and {t} are not connected")
    path = []
    v = t
    while v != s:
        u, e = prev[v]
        path.append((e, 1 if g.edges[e][0] == u else -1))
        v = u
    return path[::-1]


def default_penalty(g: WeightedGraph) -> float:
    max_len = max(val for _, _, val in g.edges)
    return g.n * max_len * math.sqrt(g.m) * 4.0


def shortest_path_instance(g: WeightedGraph, s: int, t: int,
                           penalty: float | None = None) -> tuple[Instance, Callable]:
    """Encode the s-t distance as ``min_f p ||B^T (f - f')|| + sum_e l_e |f_e|``.

    Variables are edge flows oriented along the stored ``u -> v``.  ``f'`` is
    a BFS path flow, so ``B^T f'`` is the unit s-t demand; the first group
    charges ``penalty`` per unit of conservation violation.  Each edge gets
    a single-variable group ``l_e |f_e|``.  ``decode(x)`` returns
    ``sum_e l_e |x_e|``.
    """
    if s == t:
        raise ValueError("s and t must differ")
    if not (0 <= s < g.n and 0 <= t < g.n):
        raise ValueError("s or t out of range")
    if penalty is None:
        penalty = default_penalty(g)
    if not penalty > 0:
        raise ValueError("penalty must be positive")
    m = g.m
    fprime = np.zeros(m)
    for e, d in _bfs_path_edges(g, s, t):
        fprime[e] += d

    # row v of B^T: +1 on edges leaving v, -1 on edges entering v
    rows: list[dict[int, float]] = [dict() for _ in range(g.n)]
    for e, (u, v, _) in enumerate(g.edges):
        rows[u][e] = rows[u].get(e, 0.0) + 1.0
        rows[v][e] = rows[v].get(e, 0.0) - 1.0
    conservation = GramMatrix(m, [(penalty ** 2, r) for r in rows if r])
    groups = [Group(conservation, fprime)]
    lengths = np.array([val for _, _, val in g.edges])
    for e in range(m):
        groups.append(Group(assemble_laplacian(m, (), [(e, lengths[e] ** 2)])))
    inst = Instance(m, groups)

    def decode(x) -> float:
        return float(np.abs(np.asarray(x, dtype=float)) @ lengths)

    return inst, decode


@dataclass
class CutEncoding:
    """Min-cut labeling problem over the vertices other than ``s`` and ``t``.

    ``instance`` is ``None`` when no edge touches a free vertex; ``offset``
    is the capacity of edges joining ``s`` and ``t`` directly.
    """

    graph: WeightedGraph
    s: int
    t: int
    free: list[int]
    instance: Instance | None
    offset: float

    def labels(self, x) -> np.ndarray:
        """Full vertex labeling with ``s -> 0`` and ``t -> 1``."""
        lab = np.zeros(self.graph.n)
        lab[self.t] = 1.0
        if self.free:
            lab[self.free] = np.asarray(x, dtype=float)
        return lab

    def cut_value(self, s_side: set[int]) -> float:
        return float(sum(val for u, v, val in self.graph.edges if (u in s_side) != (v in s_side)))

    def decode(self, x) -> tuple[float, list[int]]:
        """Sweep thresholds over the labels; return the smallest cut and its s side."""
        lab = self.labels(x) if self.free else self.labels(np.zeros(0))
        free_vals = np.unique(lab[self.free]) if self.free else np.zeros(0)
        cands = [-math.inf, math.inf]
        cands += list((free_vals[:-1] + free_vals[1:]) / 2.0)
        best = None
        for theta in sorted(cands):
            side = {self.s} | {u for u in self.free if lab[u] < theta}
            val = self.cut_value(side)
            if best is None or val < best[0]:
                best = (val, sorted(side))
        return best


def mincut_instance(g: WeightedGraph, s: int, t: int) -> tuple[Instance | None, Callable]:
    """Fused-lasso encoding of the s-t cut; see :class:`CutEncoding`."""
    enc = mincut_encoding(g, s, t)
    return enc.instance, enc.decode


def mincut_encoding(g: WeightedGraph, s: int, t: int) -> CutEncoding:
    if s == t:
        raise ValueError("s and t must differ")
    if not (0 <= s < g.n and 0 <= t < g.n):
        raise ValueError("s or t out of range")
    free = [u for u in range(g.n) if u not in (s, t)]
    index = {u: i for i, u in enumerate(free)}
    nf = len(free)
    groups = []
    offset = 0.0
    for u, v, cost in g.edges:
        ends = {u, v}
        if ends == {s, t}:
            offset += cost
        elif u in index and v in index:
            groups.append(Group(assemble_laplacian(nf, [(index[u], index[v], cost ** 2)])))
        else:
            other = v if u in (s, t) else u
            pin = 0.0 if s in ends else 1.0
            i = index[other]
            groups.append(Group(assemble_laplacian(nf, (), [(i, cost ** 2)]), {i: pin}))
    inst = Instance(nf, groups) if groups else None
    return CutEncoding(g, s, t, free, inst, offset)


# ---------------------------------------------------------------------------
# fidelity variants


def _golden_min(fn: Callable[[float], float], lo: float, hi: float, tol: float,
                max_iter: int = 60) -> float:
    """Golden-section search for the minimizer of a unimodal function on ``[lo, hi]``."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    width0 = max(hi - lo, 1e-300)
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, width0):
            break
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    return (a + b) / 2.0


def default_exact_solver(inst: Instance) -> Solution:
    return solve_ipm(inst, IpmConfig(eps=1e-9))


def with_fidelity(smooth: Instance, s0, lam: float) -> Instance:
    """``smooth`` plus the group ``lam * ||x - s0||_2``."""
    if lam == 0:
        return smooth
    return Instance(smooth.n, smooth.groups + [Group(identity(smooth.n, lam * lam), s0)])


def l22_fidelity_solve(smooth: Instance, s0, solver: Solver | None = None,
                       search_tol: float = 1e-6, method: str = "nested",
                       max_iter: int = 60, ipm_config: IpmConfig | None = None) -> Solution:
    """Minimize ``||x - s0||_2^2 + obj(smooth, x)`` with grouped least squares solves.

    ``method="nested"``: an outer golden-section search over the fidelity
    radius ``t`` minimizes ``t^2 + min{obj(smooth, x) : ||x - s0|| <= t}``;
    the inner value is the Lagrangian dual ``max_lam -lam t + g(lam)``,
    where ``g(lam)`` is the optimum of ``smooth`` plus ``lam ||x - s0||``,
    found by a second golden-section search.

    ``method="path"``: every ``lam`` yields a minimizer ``x(lam)`` of that
    same penalized problem, and the full objective along this path is
    unimodal with its minimum where ``lam = 2 ||x(lam) - s0||``, so a single
    search over ``lam`` suffices.  This assumes ``x(lam)`` moves continuously,
    which holds for the reweighted-quadratic iterates of the multiplicative
    weights solver but can fail for exact solvers on polyhedral ``smooth``.

    The penalized minimizer need not be unique (for polyhedral ``smooth``
    it usually is not at the optimal ``lam``), so the Lagrangian searches
    recover the optimal value reliably but ``x`` only approximately.  Every
    candidate ``x`` produced (and ``s0`` itself) is scored by the full
    objective, the best is kept, and it is polished by line searches along
    segments between neighbouring candidates.

    ``method="direct"`` skips the searches and hands the squared term to
    the interior point solver, which handles it exactly; ``solver`` is
    ignored and ``ipm_config`` is used instead.
    """
    s0 = np.asarray(s0, dtype=float)
    if s0.shape != (smooth.n,):
        raise ValueError(f"s0 has shape {s0.shape}, expected ({smooth.n},)")
    if method == "direct":
        sol = solve_ipm(smooth, ipm_config or IpmConfig(eps=1e-9), QuadFidelity(s0))
        start = obj(smooth, s0)
        if start < sol.objective:
            sol.x, sol.objective = s0.copy(), start
        sol.info["method"] = method
        return sol
    solver = solver or default_exact_solver

    def full(x) -> float:
        d = x - s0
        return float(d @ d) + obj(smooth, x)

    best = {"x": s0.copy(), "val": full(s0)}
    evals = {"count": 0}
    cache: dict[float, tuple[float, np.ndarray]] = {}

    # below this the fidelity block is numerically invisible next to smooth
    lam_floor = math.sqrt(1e-10 * max(float(smooth.aggregate(np.ones(smooth.k)).diagonal().max()),
                                      1e-300))

    def penalized(lam: float) -> tuple[float, np.ndarray]:
        if lam not in cache:
            sol = solver(with_fidelity(smooth, s0, lam if lam > lam_floor else 0.0))
            evals["count"] += 1
            x = sol.x
            val = obj(smooth, x) + lam * float(np.linalg.norm(x - s0))
            cache[lam] = (val, x)
            fx = full(x)
            if fx < best["val"]:
                best["x"], best["val"] = x, fx
        return cache[lam]

    # the optimal multiplier can equal the Lipschitz bound; keep it strictly inside
    lam_hi = max(2.0 * smooth.lipschitz_bound(), 1e-12)
    g0 = obj(smooth, s0)
    if g0 > 0:
        if method == "nested":
            t_hi = float(np.linalg.norm(s0)) + g0 + math.sqrt(g0)

            def inner(t: float) -> float:
                lam = _golden_min(lambda l: -(penalized(l)[0] - l * t), 0.0, lam_hi,
                                  search_tol, max_iter)
                return t * t + penalized(lam)[0] - lam * t

            t_star = _golden_min(inner, 0.0, t_hi, search_tol, max_iter)
            lam_star = _golden_min(lambda l: -(penalized(l)[0] - l * t_star), 0.0, lam_hi,
                                   search_tol, max_iter)
        elif method == "path":
            lam_star = _golden_min(lambda l: full(penalized(l)[1]), 0.0, lam_hi,
                                   search_tol, max_iter)
        else:
            raise ValueError(f"unknown method {method!r}")
        # Where the penalized minimizer is not unique, x(lam) jumps across the
        # optimal face; the answer then lies between the solutions on either side.
        lams = sorted(cache)
        below = [l for l in lams if l <= lam_star]
        above = [l for l in lams if l >= lam_star]
        ends = [cache[below[-1]][1]] if below else []
        ends += [cache[above[0]][1]] if above else []
        # the extreme multipliers pin the far ends of the solution path
        ends += [cache[lams[0]][1], cache[lams[-1]][1], best["x"].copy(), s0]
        for i in range(len(ends)):
            for j in range(i + 1, len(ends)):
                xa, xb = ends[i], ends[j]
                if np.allclose(xa, xb, rtol=0, atol=1e-15):
                    continue
                theta = _golden_min(lambda th: full(xa + th * (xb - xa)), 0.0, 1.0,
                                    min(search_tol, 1e-9), 200)
                xc = xa + theta * (xb - xa)
                fc = full(xc)
                if fc < best["val"]:
                    best["x"], best["val"] = xc, fc

    x = best["x"]
    return Solution(x=x, objective=best["val"], iterations=evals["count"],
                    solver_tag="l22", info={"method": method, "lam_bracket": lam_hi})


def l1_expand(base: Instance, l1_fidelity_s) -> Instance:
    """Append ``|x_u - s_u|`` for every coordinate as its own group."""
    s = np.asarray(l1_fidelity_s, dtype=float)
    if s.shape != (base.n,):
        raise ValueError(f"fidelity vector has shape {s.shape}, expected ({base.n},)")
    extra = [Group(assemble_laplacian(base.n, (), [(u, 1.0)]), {u: s[u]})
             for u in range(base.n)]
    return Instance(base.n, base.groups + extra)


# ---------------------------------------------------------------------------
# clustering


@dataclass
class PointSet:
    points: np.ndarray
    pair_weights: dict[tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        clean: dict[tuple[int, int], float] = {}
        n = len(self.points)
        for (i, j), w in self.pair_weights.items():
            i, j, w = int(i), int(j), float(w)
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ValueError(f"bad pair ({i}, {j})")
            if w < 0:
                raise ValueError("pair weights must be nonnegative")
            key = (min(i, j), max(i, j))
            if key in clean and clean[key] != w:
                raise ValueError(f"asymmetric weights for pair {key}")
            clean[key] = w
        self.pair_weights = clean

    @classmethod
    def complete(cls, points) -> "PointSet":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = len(pts)
        return cls(pts, {(i, j): 1.0 for i in range(n) for j in range(i + 1, n)})


def clustering_instance(ps: PointSet, lam: float) -> tuple[Instance | None, Callable]:
    """Pairwise fusion penalties ``lam w_ij ||y_i - y_j||_2`` over ``n*d`` variables.

    The squared fidelity to the points is left to :func:`l22_fidelity_solve`
    with ``s0 = ps.points.ravel()``.  Returns ``None`` for the instance when
    no penalty is active (``lam == 0`` or all weights zero).
    """
    if len(ps.points) == 0:
        raise ValueError("empty point set")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    n, d = ps.points.shape
    groups = []
    for (i, j), w in sorted(ps.pair_weights.items()):
        if w == 0 or lam == 0:
            continue
        scale = (lam * w) ** 2
        edges = [(i * d + c, j * d + c, scale) for c in range(d)]
        groups.append(Group(assemble_laplacian(n * d, edges)))
    inst = Instance(n * d, groups) if groups else None

    def decode(x) -> np.ndarray:
        return np.asarray(x, dtype=float).reshape(n, d)

    return inst, decode


def cluster(ps: PointSet, lam: float, solver: Solver | None = None,
            search_tol: float = 1e-6, method: str = "direct") -> np.ndarray:
    """Cluster centers minimizing ``sum_i ||x_i - y_i||^2 + lam sum w_ij ||y_i - y_j||``."""
    inst, decode = clustering_instance(ps, lam)
    if inst is None:
        return ps.points.copy()
    sol = l22_fidelity_solve(inst, ps.points.ravel(), solver=solver, search_tol=search_tol,
                             method=method)
    return decode(sol.x)


def parse_points(text: str) -> PointSet:
    """``points <n> <d>`` header, ``n`` coordinate lines, then optional ``w <i> <j> <val>``.

    Without any ``w`` lines every pair gets weight 1.
    """
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise PointsFormatError("empty points file")
    head = lines[0].split()
    if head[0] != "points" or len(head) != 3:
        raise PointsFormatError("expected header 'points <n> <d>'")
    try:
        n, d = int(head[1]), int(head[2])
        if len(lines) < 1 + n:
            raise PointsFormatError("truncated points file")
        pts = np.array([[float(v) for v in ln.split()] for ln in lines[1:1 + n]])
        if pts.shape != (n, d):
            raise PointsFormatError(f"expected {n} points of dimension {d}")
        weights = {}
        for ln in lines[1 + n:]:
            tok = ln.split()
            if tok[0] != "w" or len(tok) != 4:
                raise PointsFormatError(f"bad weight line: {ln!r}")
            weights[(int(tok[1]), int(tok[2]))] = float(tok[3])
        return PointSet(pts, weights) if weights else PointSet.complete(pts)
    except PointsFormatError:
        raise
    except ValueError as exc:
        raise PointsFormatError(str(exc)) from None
