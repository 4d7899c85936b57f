"""Grid-graph image models: TV denoising, Poisson blending, Netpbm I/O."""

from __future__ import annotations

import enum
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .instance import Group, Instance, Solution, obj, quad_min
from .ipm import IpmConfig, solve_ipm
from .linalg import assemble_laplacian, identity
from .modeling import l22_fidelity_solve
from .mw import MwConfig, solve_mw


@dataclass
class Image:
    """Intensities in ``[0, 1]`` stored as a ``(height, width, channels)`` array."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data, dtype=float)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise ValueError(f"expected (h, w, 1|3) data, got shape {a.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError("image must have at least one pixel")
        self.data = a

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def channel(self, c: int) -> np.ndarray:
        return self.data[:, :, c]

    def clamped(self) -> "Image":
        return Image(np.clip(self.data, 0.0, 1.0))


class TvMode(enum.Enum):
    ANISOTROPIC = "aniso"
    ISOTROPIC = "iso"

    @classmethod
    def parse(cls, s: "str | TvMode") -> "TvMode":
        if isinstance(s, cls):
            return s
        key = str(s).lower()
        for mode in cls:
            if key in (mode.value, mode.name.lower()):
                return mode
        raise ValueError(f"unknown TV mode {s!r}")


# ---------------------------------------------------------------------------
# grid instances


def _grid_edge_sets(h: int, w: int, mode: TvMode) -> list[list[tuple[int, int]]]:
    """Edge sets over row-major pixel indices, one list per group."""
    sets = []
    for r in range(h):
        for c in range(w):
            p = r * w + c
            right = [(p, p + 1)] if c + 1 < w else []
            down = [(p, p + w)] if r + 1 < h else []
            if mode is TvMode.ISOTROPIC:
                sets.append(right + down)
            else:
                sets.extend([e] for e in right + down)
    return sets


def _smoothness_groups(h: int, w: int, mode: TvMode, lam: float, channels: int = 1):
    npix = h * w
    scale = lam * lam
    groups = []
    for es in _grid_edge_sets(h, w, mode):
        edges = [(c * npix + u, c * npix + v, scale) for u, v in es for c in range(channels)]
        groups.append(Group(assemble_laplacian(npix * channels, edges)))
    return groups


def _check_lambda(lam: float) -> None:
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")


def grid_instance(img: Image, mode, lam: float, sqrt_fidelity: bool = False) -> Instance:
    """Smoothness groups of a single-channel image, each scaled by ``lam^2``.

    With ``sqrt_fidelity`` the fidelity ``||x - s||_2`` is appended as one
    more group; otherwise the squared fidelity is left to
    :func:`~gls.modeling.l22_fidelity_solve`.
    """
    if img.channels != 1:
        raise ValueError("grid_instance needs a single-channel image")
    _check_lambda(lam)
    mode = TvMode.parse(mode)
    groups = _smoothness_groups(img.height, img.width, mode, lam)
    if sqrt_fidelity:
        groups.append(Group(identity(img.height * img.width), img.data.ravel()))
    return Instance(img.height * img.width, groups)


def multichannel_instance(img: Image, mode, lam: float, sqrt_fidelity: bool = False) -> Instance:
    """Channel-major variables; each group spans the same pixel edges in every channel."""
    if img.channels != 3:
        raise ValueError("multichannel denoising needs a 3-channel image")
    _check_lambda(lam)
    mode = TvMode.parse(mode)
    groups = _smoothness_groups(img.height, img.width, mode, lam, channels=3)
    n = 3 * img.height * img.width
    if sqrt_fidelity:
        groups.append(Group(identity(n), _channel_major(img)))
    return Instance(n, groups)


def _channel_major(img: Image) -> np.ndarray:
    return np.moveaxis(img.data, 2, 0).ravel()


def _from_channel_major(x, h: int, w: int, c: int) -> np.ndarray:
    return np.moveaxis(np.asarray(x).reshape(c, h, w), 0, 2)


def tv_objective(img: Image, mode, lam: float, x) -> float:
    """``||x - s||^2 + lam * TV(x)`` by direct summation over the grid (single channel)."""
    mode = TvMode.parse(mode)
    s = img.data[:, :, 0]
    X = np.asarray(x, dtype=float).reshape(s.shape)
    dx = np.zeros_like(X)
    dy = np.zeros_like(X)
    dx[:, :-1] = X[:, 1:] - X[:, :-1]
    dy[:-1, :] = X[1:, :] - X[:-1, :]
    if mode is TvMode.ANISOTROPIC:
        tv = np.abs(dx).sum() + np.abs(dy).sum()
    else:
        tv = np.sqrt(dx * dx + dy * dy).sum()
    return float(((X - s) ** 2).sum() + lam * tv)


# ---------------------------------------------------------------------------
# denoising


def make_solver(name: str = "mw", eps: float | None = None, strict: bool = False,
                trace_sink: list | None = None) -> Callable[[Instance], Solution]:
    """A solver callable for ``"mw"`` or ``"ipm"``; solutions are appended to ``trace_sink``."""
    if name == "mw":
        cfg = MwConfig(eps=0.1 if eps is None else eps, strict_mode=strict)
        run = lambda inst: solve_mw(inst, cfg)
    elif name == "ipm":
        cfg_i = IpmConfig(eps=1e-6 if eps is None else eps)
        run = lambda inst: solve_ipm(inst, cfg_i)
    else:
        raise ValueError(f"unknown solver {name!r}")

    def solver(inst: Instance) -> Solution:
        sol = run(inst)
        if trace_sink is not None:
            trace_sink.append(sol)
        return sol

    solver.sink = trace_sink if trace_sink is not None else []
    return solver


def _direct_config(solver: str, eps: float | None) -> IpmConfig | None:
    return IpmConfig(eps=1e-6 if eps is None else eps) if solver == "ipm" else None


@dataclass
class DenoiseResult:
    image: Image
    objective: float
    solutions: list[Solution]


def _denoise_vector(inst_builder, s0: np.ndarray, sqrt_fidelity: bool, solver,
                    search_tol: float, direct_cfg: IpmConfig | None) -> tuple[np.ndarray, float]:
    if sqrt_fidelity:
        inst = inst_builder(True)
        sol = solver(inst)
        x, val = sol.x, sol.objective
        start = obj(inst, s0)
        if start <= val:
            x, val = s0.copy(), start
        return x, val
    if direct_cfg is not None:
        sol = l22_fidelity_solve(inst_builder(False), s0, method="direct", ipm_config=direct_cfg)
        if hasattr(solver, "sink"):
            solver.sink.append(sol)
    else:
        sol = l22_fidelity_solve(inst_builder(False), s0, solver=solver, search_tol=search_tol,
                                 method="path")
    return sol.x, sol.objective


def denoise(img: Image, mode, lam: float, solver: str = "mw", eps: float | None = None,
            sqrt_fidelity: bool = False, search_tol: float = 1e-4) -> DenoiseResult:
    """TV-denoise a single-channel image.

    The default objective is ``||x - s||^2 + lam TV(x)``; ``sqrt_fidelity``
    uses ``||x - s|| + lam TV(x)`` and solves it in one grouped LS call.
    The returned objective refers to the unclamped solver output.  With
    ``solver="ipm"`` the squared fidelity goes straight into the barrier;
    with ``"mw"`` it is handled by a search over the fidelity multiplier.
    """
    if img.channels != 1:
        raise ValueError("denoise needs a single-channel image; see denoise_multichannel")
    sols: list[Solution] = []
    run = make_solver(solver, eps, trace_sink=sols)
    s0 = img.data.ravel().copy()
    x, val = _denoise_vector(lambda f: grid_instance(img, mode, lam, f), s0, sqrt_fidelity,
                             run, search_tol, _direct_config(solver, eps))
    out = Image(x.reshape(img.height, img.width, 1)).clamped()
    return DenoiseResult(out, val, sols)


def denoise_multichannel(img: Image, mode, lam: float, solver: str = "mw",
                         eps: float | None = None, sqrt_fidelity: bool = False,
                         search_tol: float = 1e-4) -> DenoiseResult:
    """Color TV where every inter-pixel group couples the three channel differences."""
    if img.channels != 3:
        raise ValueError("denoise_multichannel needs a 3-channel image")
    sols: list[Solution] = []
    run = make_solver(solver, eps, trace_sink=sols)
    s0 = _channel_major(img)
    x, val = _denoise_vector(lambda f: multichannel_instance(img, mode, lam, f), s0,
                             sqrt_fidelity, run, search_tol, _direct_config(solver, eps))
    out = Image(_from_channel_major(x, img.height, img.width, 3)).clamped()
    return DenoiseResult(out, val, sols)


# ---------------------------------------------------------------------------
# Poisson blending


def _thread_count() -> int:
    try:
        return max(1, int(os.environ.get("GLS_THREADS", "1")))
    except ValueError:
        return 1


def blend_instance(src: np.ndarray, dst: np.ndarray, mask: np.ndarray,
                   offset: tuple[int, int]) -> tuple[Instance, list[tuple[int, int]]]:
    """Grouped LS instance for one channel; also returns the Ω pixels in dst coordinates.

    Internal edges ``(p, q)`` become edge groups with ``s_p = v_pq`` and
    ``s_q = 0``; edges leaving Ω become diagonal groups pinning ``x_p`` to
    ``dst_q + v_pq``, where ``v_pq = src_p - src_q``.
    """
    ox, oy = offset
    H, W = dst.shape
    h, w = src.shape
    omega_src = [(r, c) for r in range(h) for c in range(w) if mask[r, c]]
    if not omega_src:
        raise ValueError("empty mask")
    index: dict[tuple[int, int], int] = {}
    for r, c in omega_src:
        R, C = r + oy, c + ox
        if not (1 <= R < H - 1 and 1 <= C < W - 1):
            raise ValueError(f"mask pixel ({r}, {c}) is not interior to the destination")
        index[(R, C)] = len(index)
    n = len(index)
    groups = []
    for (r, c) in omega_src:
        p = index[(r + oy, c + ox)]
        for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
            rq, cq = r + dr, c + dc
            v = src[r, c] - src[rq, cq] if (0 <= rq < h and 0 <= cq < w) else 0.0
            q = index.get((rq + oy, cq + ox))
            if q is not None:
                if p < q:
                    L = assemble_laplacian(n, [(p, q, 1.0)])
                    groups.append(Group(L, {p: v} if v else None))
            else:
                pin = dst[rq + oy, cq + ox] + v
                groups.append(Group(assemble_laplacian(n, (), [(p, 1.0)]), {p: pin} if pin else None))
    return Instance(n, groups), [(r + oy, c + ox) for r, c in omega_src]


def poisson_blend(src: Image, dst: Image, mask, offset: tuple[int, int] = (0, 0),
                  tol: float = 1e-12) -> Image:
    """Seamless cloning of ``src`` under ``mask`` into ``dst`` at ``offset = (x, y)``."""
    m = mask.data[:, :, 0] if isinstance(mask, Image) else np.asarray(mask)
    m = m > 0.5 if m.dtype != bool else m
    if m.shape != (src.height, src.width):
        raise ValueError("mask and source sizes differ")
    if src.channels != dst.channels:
        raise ValueError("source and destination channel counts differ")

    def one(c: int) -> tuple[list[tuple[int, int]], np.ndarray]:
        inst, pix = blend_instance(src.channel(c), dst.channel(c), m, offset)
        x, _ = quad_min(inst, np.ones(inst.k), tol=tol)
        return pix, x

    with ThreadPoolExecutor(max_workers=min(_thread_count(), dst.channels)) as pool:
        results = list(pool.map(one, range(dst.channels)))
    out = dst.data.copy()
    for c, (pix, x) in enumerate(results):
        rows, cols = zip(*pix)
        out[list(rows), list(cols), c] = x
    return Image(out)


# ---------------------------------------------------------------------------
# Netpbm


class NetpbmError(ValueError):
    pass


_MAGIC = {"P2": (1, False), "P3": (3, False), "P5": (1, True), "P6": (3, True)}
_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*")


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    toks, pos = [], 0
    while len(toks) < count:
        pos = _TOKEN.match(buf, pos).end()
        m = re.compile(rb"[^\s#]+").match(buf, pos)
        if m is None:
            raise NetpbmError("malformed header")
        toks.append(m.group())
        pos = m.end()
    return toks, pos


def read_netpbm(buf: bytes) -> Image:
    toks, pos = _header_tokens(buf, 4)
    magic = toks[0].decode("ascii", "replace")
    if magic not in _MAGIC:
        raise NetpbmError(f"unsupported magic {magic!r}")
    channels, binary = _MAGIC[magic]
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise NetpbmError("non-integer header field") from None
    if w < 1 or h < 1 or not 1 <= maxval <= 65535:
        raise NetpbmError("header values out of range")
    count = w * h * channels
    if binary:
        if pos >= len(buf) or not buf[pos:pos + 1].isspace():
            raise NetpbmError("missing whitespace after header")
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = buf[pos:pos + count * dtype.itemsize]
        if len(raw) < count * dtype.itemsize:
            raise NetpbmError("truncated raster")
        vals = np.frombuffer(raw, dtype=dtype).astype(float)
    else:
        body = re.sub(rb"#[^\n]*", b"", buf[pos:]).split()
        if len(body) < count:
            raise NetpbmError("truncated raster")
        try:
            vals = np.array([int(t) for t in body[:count]], dtype=float)
        except ValueError:
            raise NetpbmError("non-integer sample") from None
    if np.any(vals > maxval):
        raise NetpbmError("sample exceeds maxval")
    return Image(vals.reshape(h, w, channels) / maxval)


def write_netpbm(img: Image, fmt: str | None = None, maxval: int = 255) -> bytes:
    """Encode as ``P2``/``P5`` (gray) or ``P3``/``P6`` (color); binary by default."""
    if fmt is None:
        fmt = "P5" if img.channels == 1 else "P6"
    if fmt not in _MAGIC:
        raise ValueError(f"unsupported format {fmt!r}")
    channels, binary = _MAGIC[fmt]
    if channels != img.channels:
        raise ValueError(f"{fmt} needs {channels} channel(s), image has {img.channels}")
    if not 1 <= maxval <= 65535:
        raise ValueError("maxval must lie in [1, 65535]")
    q = np.rint(np.clip(img.data, 0.0, 1.0) * maxval).astype(np.int64)
    header = f"{fmt}\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
    if binary:
        dtype = ">u2" if maxval > 255 else "u1"
        return header + q.astype(dtype).tobytes()
    rows = [" ".join(map(str, row)) for row in q.reshape(img.height, -1)]
    return header + ("\n".join(rows) + "\n").encode("ascii")


def read_image(path: str) -> Image:
    with open(path, "rb") as fh:
        return read_netpbm(fh.read())


def write_image(path: str, img: Image, fmt: str | None = None, maxval: int = 255) -> None:
    with open(path, "wb") as fh:
        fh.write(write_netpbm(img, fmt, maxval))
