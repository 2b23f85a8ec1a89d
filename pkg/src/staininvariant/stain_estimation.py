"""H&E stain matrix estimation (Macenko, Vahadane) and concentration solving.

A stain matrix is a ``(3, 2)`` array whose columns are unit-norm OD colour
vectors, hematoxylin first. Concentration maps are ``(..., 2)`` arrays.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .color_optics import TISSUE_OD_THRESHOLD, as_rgb, rgb_to_od, tissue_mask
from .errors import DegenerateColor, InsufficientTissue, ZeroColumn

logger = logging.getLogger(__name__)

MIN_TISSUE_PIXELS = 100
DEGENERATE_RATIO = 1e-8
UNIT_NORM_TOL = 1e-9

METHODS = ("macenko", "vahadane", "reference")

# Widely used H&E reference vectors (columns: hematoxylin, eosin).
REFERENCE_HE = np.array(
    [
        [0.5626, 0.2159],
        [0.7201, 0.8012],
        [0.4062, 0.5581],
    ]
)


@dataclass(frozen=True)
class StainMatrix:
    """Unit-norm H&E colour vectors in OD space.

    ``matrix[:, 0]`` is hematoxylin and ``matrix[:, 1]`` eosin.
    ``max_concentrations`` holds the 99th-percentile concentrations of the
    image the matrix was estimated from, when known.
    """

    matrix: np.ndarray
    method: str = "reference"
    max_concentrations: tuple[float, float] | None = None
    n_iter: int | None = field(default=None, compare=False)

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (3, 2):
            raise ValueError(f"stain matrix must be 3x2, got {m.shape}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise ValueError("stain matrix entries must be finite and non-negative")
        norms = np.linalg.norm(m, axis=0)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            raise ValueError(f"stain columns must have unit norm, got {norms}")
        h, e = m[:, 0], m[:, 1]
        if not (h[0] > e[0] or (h[0] == e[0] and h[1] > e[1])):
            raise ValueError("hematoxylin column must have the larger red OD component")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if self.max_concentrations is not None:
            mc = tuple(float(x) for x in self.max_concentrations)
            if len(mc) != 2:
                raise ValueError("max_concentrations must hold two values")
            object.__setattr__(self, "max_concentrations", mc)

    @property
    def hematoxylin(self) -> np.ndarray:
        return self.matrix[:, 0]

    @property
    def eosin(self) -> np.ndarray:
        return self.matrix[:, 1]

    def with_max_concentrations(self, max_c) -> "StainMatrix":
        return StainMatrix(self.matrix, self.method, tuple(max_c), self.n_iter)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "stains": [[float(x) for x in col] for col in self.matrix.T],
            "max_concentrations": (
                None if self.max_concentrations is None else list(self.max_concentrations)
            ),
        }

    def to_json(self) -> str:
        # json uses repr() for floats: 17 significant digits, round-trip exact.
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "StainMatrix":
        unknown = set(d) - {"method", "stains", "max_concentrations"}
        if unknown:
            raise ValueError(f"unknown stain matrix keys: {sorted(unknown)}")
        stains = np.asarray(d["stains"], dtype=np.float64)
        if stains.shape != (2, 3):
            raise ValueError("'stains' must be two RGB OD triples")
        return cls(stains.T, d.get("method", "reference"), d.get("max_concentrations"))

    @classmethod
    def from_json(cls, text: str) -> "StainMatrix":
        return cls.from_dict(json.loads(text))


def reference_stain_matrix() -> StainMatrix:
    return canonical_stain_order(REFERENCE_HE, method="reference")


def angular_distance(u, v) -> float:
    """Angle between two vectors, in degrees."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    cos = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))))


def stain_angular_errors(estimated: StainMatrix, truth) -> tuple[float, float]:
    """Per-column angular distance (H, E) between two stain matrices."""
    t = truth.matrix if isinstance(truth, StainMatrix) else np.asarray(truth)
    m = estimated.matrix
    return angular_distance(m[:, 0], t[:, 0]), angular_distance(m[:, 1], t[:, 1])


def canonical_stain_order(w_raw, method: str = "reference") -> StainMatrix:
    """Normalise columns and put hematoxylin (larger red OD) first.

    Ties on red are broken by the larger green component.
    """
    w = np.array(w_raw, dtype=np.float64)
    if w.shape != (3, 2):
        raise ValueError(f"expected a 3x2 matrix, got {w.shape}")
    norms = np.linalg.norm(w, axis=0)
    if np.any(norms <= 0) or not np.all(np.isfinite(norms)):
        raise ZeroColumn("stain matrix has a zero column")
    w = w / norms
    a, b = w[:, 0], w[:, 1]
    if b[0] > a[0] or (b[0] == a[0] and b[1] > a[1]):
        w = w[:, ::-1]
    # A unit vector divided by its own norm can land a few ulps off 1.
    w = w / np.linalg.norm(w, axis=0)
    return StainMatrix(np.ascontiguousarray(w), method)


def _tissue_od(img, od_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    od = rgb_to_od(as_rgb(img))
    mask = tissue_mask(od, od_threshold)
    pixels = od[mask]
    if len(pixels) < MIN_TISSUE_PIXELS:
        raise InsufficientTissue(len(pixels), MIN_TISSUE_PIXELS)
    return od, pixels


def macenko_directions(od_pixels: np.ndarray, angle_percentile: float = 1.0) -> np.ndarray:
    """Raw (unordered) Macenko stain directions from an ``(n, 3)`` OD cloud.

    The cloud is projected onto its top-2 principal plane; the stain vectors
    are the directions at the ``angle_percentile`` and
    ``100 - angle_percentile`` percentile angles within that plane.
    """
    od_pixels = np.asarray(od_pixels, dtype=np.float64)
    if od_pixels.ndim != 2 or od_pixels.shape[1] != 3 or len(od_pixels) < 2:
        raise ValueError("need an (n >= 2, 3) array of OD vectors")
    if not 0 <= angle_percentile < 50:
        raise ValueError("angle_percentile must be in [0, 50)")
    evals, evecs = np.linalg.eigh(np.cov(od_pixels, rowvar=False))
    if evals[2] <= 0 or evals[1] < DEGENERATE_RATIO * evals[2]:
        raise DegenerateColor("tissue OD cloud has rank < 2 (single colour direction)")
    plane = evecs[:, [2, 1]]
    # Fix eigenvector signs so the result does not depend on LAPACK's choice.
    if plane[:, 0].sum() < 0:
        plane[:, 0] *= -1
    if plane[np.argmax(np.abs(plane[:, 1])), 1] < 0:
        plane[:, 1] *= -1

    proj = od_pixels @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo = np.percentile(phi, angle_percentile)
    hi = np.percentile(phi, 100.0 - angle_percentile)
    v1 = plane @ np.array([np.cos(lo), np.sin(lo)])
    v2 = plane @ np.array([np.cos(hi), np.sin(hi)])
    return np.stack([v1, v2], axis=1)


def _macenko_from_pixels(od_pixels: np.ndarray, angle_percentile: float) -> StainMatrix:
    w = macenko_directions(od_pixels, angle_percentile)
    # Extreme angles can dip marginally below the positive octant.
    w = np.maximum(w, 0.0)
    try:
        return canonical_stain_order(w, method="macenko")
    except ZeroColumn as exc:
        raise DegenerateColor("stain direction collapsed onto the octant boundary") from exc


def estimate_macenko(
    img,
    od_threshold: float = TISSUE_OD_THRESHOLD,
    angle_percentile: float = 1.0,
) -> StainMatrix:
    """Estimate the stain matrix by the Macenko SVD/angle method."""
    od, pixels = _tissue_od(img, od_threshold)
    stains = _macenko_from_pixels(pixels, angle_percentile)
    return stains.with_max_concentrations(max_concentrations(od, stains))


@dataclass(frozen=True)
class SnmfConfig:
    sparsity_lambda: float = 0.1
    max_iters: int = 200
    tol: float = 1e-6
    seed: int = 42

    def __post_init__(self):
        if self.sparsity_lambda < 0:
            raise ValueError("sparsity_lambda must be >= 0")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")


class NmfResult(NamedTuple):
    W: np.ndarray
    H: np.ndarray
    objective: list[float]
    n_iter: int


def snmf_objective(V, W, H, sparsity_lambda: float) -> float:
    r = V - W @ H
    return 0.5 * float(np.sum(r * r)) + sparsity_lambda * float(np.sum(np.abs(H)))


def _init_dictionary(V: np.ndarray, cfg: SnmfConfig) -> np.ndarray:
    try:
        return _macenko_from_pixels(V.T, 1.0).matrix.copy()
    except (DegenerateColor, ValueError):
        logger.debug("macenko initialisation failed, using seeded random dictionary")
    rng = np.random.default_rng(cfg.seed)
    w = rng.uniform(0.1, 1.0, size=(V.shape[0], 2))
    return w / np.linalg.norm(w, axis=0)


def sparse_nmf(V, k: int = 2, cfg: SnmfConfig | None = None, W_init=None) -> NmfResult:
    """Sparse NMF: minimise ``0.5 ||V - WH||_F^2 + lambda * sum(H)``.

    Subject to ``W, H >= 0`` and ``||W[:, j]||_2 <= 1``. Each sweep updates
    every row of ``H`` (soft-thresholded least squares) and then every column
    of ``W`` (least squares projected onto the non-negative unit ball). Both
    are exact block minimisers, so the objective never increases.

    ``W`` is initialised from Macenko directions of ``V``'s columns (falling
    back to a seeded random draw when those are degenerate) and ``H`` from
    one non-negative least-squares pass.
    """
    cfg = cfg or SnmfConfig()
    V = np.asarray(V, dtype=np.float64)
    if k != 2:
        raise ValueError("only two-stain factorisation (k=2) is supported")
    if V.ndim != 2 or V.shape[1] < k:
        raise ValueError("V must be (d, n) with n >= k")
    if np.any(V < 0):
        raise ValueError("V must be non-negative")
    lam = cfg.sparsity_lambda

    if W_init is None:
        W = _init_dictionary(V, cfg)
    else:
        W = np.array(W_init, dtype=np.float64)
        W = W / np.maximum(np.linalg.norm(W, axis=0), 1.0)
    H = _nnls_2col(V.T, W).T.copy()

    history = [snmf_objective(V, W, H, lam)]
    n_iter = 0
    for n_iter in range(1, cfg.max_iters + 1):
        WtV = W.T @ V
        WtW = W.T @ W
        for j in range(k):
            if WtW[j, j] <= 0:
                H[j] = 0.0
                continue
            grad_part = WtV[j] - WtW[j] @ H + WtW[j, j] * H[j]
            H[j] = np.maximum(grad_part - lam, 0.0) / WtW[j, j]

        VHt = V @ H.T
        HHt = H @ H.T
        for j in range(k):
            if HHt[j, j] <= 0:
                continue
            u = (VHt[:, j] - W @ HHt[:, j] + W[:, j] * HHt[j, j]) / HHt[j, j]
            u = np.maximum(u, 0.0)
            norm = np.linalg.norm(u)
            if norm > 1.0:
                u /= norm
            W[:, j] = u

        history.append(snmf_objective(V, W, H, lam))
        prev, cur = history[-2], history[-1]
        if abs(prev - cur) <= cfg.tol * max(abs(prev), np.finfo(float).tiny):
            break
    return NmfResult(W, H, history, n_iter)


def estimate_vahadane(
    img,
    cfg: SnmfConfig | None = None,
    od_threshold: float = TISSUE_OD_THRESHOLD,
) -> StainMatrix:
    """Estimate the stain matrix by sparse NMF on tissue OD vectors.

    Hitting ``max_iters`` is not an error: the last iterate is returned and
    ``n_iter`` on the result reports how many sweeps ran.
    """
    cfg = cfg or SnmfConfig()
    od, pixels = _tissue_od(img, od_threshold)
    result = sparse_nmf(pixels.T, 2, cfg)
    try:
        stains = canonical_stain_order(result.W, method="vahadane")
    except ZeroColumn as exc:
        raise DegenerateColor("sparse NMF collapsed a stain column to zero") from exc
    stains = StainMatrix(stains.matrix, "vahadane", n_iter=result.n_iter)
    return stains.with_max_concentrations(max_concentrations(od, stains))


def estimate(img, method: str = "vahadane", cfg: SnmfConfig | None = None,
             od_threshold: float = TISSUE_OD_THRESHOLD) -> StainMatrix:
    if method == "macenko":
        return estimate_macenko(img, od_threshold)
    if method == "vahadane":
        return estimate_vahadane(img, cfg, od_threshold)
    raise ValueError(f"unknown estimation method {method!r}")


def _nnls_2col(v: np.ndarray, W: np.ndarray) -> np.ndarray:
    """Exact non-negative least squares of ``(n, 3)`` vectors on a 3x2 basis.

    The problem is convex, so a feasible unconstrained minimiser is optimal;
    otherwise the optimum lies on a face ``c_0 = 0`` or ``c_1 = 0`` and the
    better of the two clamped 1-D solutions wins.
    """
    G = W.T @ W
    b = v @ W
    out = np.zeros_like(b)

    g00, g11, g01 = G[0, 0], G[1, 1], G[0, 1]
    c_a = np.zeros_like(b)
    c_b = np.zeros_like(b)
    if g00 > 0:
        c_a[:, 0] = np.maximum(b[:, 0] / g00, 0.0)
    if g11 > 0:
        c_b[:, 1] = np.maximum(b[:, 1] / g11, 0.0)
    f_a = g00 * c_a[:, 0] ** 2 - 2.0 * b[:, 0] * c_a[:, 0]
    f_b = g11 * c_b[:, 1] ** 2 - 2.0 * b[:, 1] * c_b[:, 1]
    out[:] = np.where((f_a <= f_b)[:, None], c_a, c_b)

    det = g00 * g11 - g01 * g01
    if det > 1e-12 * g00 * g11:
        c0 = (g11 * b[:, 0] - g01 * b[:, 1]) / det
        c1 = (g00 * b[:, 1] - g01 * b[:, 0]) / det
        feasible = (c0 >= 0) & (c1 >= 0)
        out[feasible, 0] = c0[feasible]
        out[feasible, 1] = c1[feasible]
    return out


def solve_concentrations(od: np.ndarray, stains) -> np.ndarray:
    """Per-pixel ``argmin_{c >= 0} ||od - W c||^2``.

    Every pixel is solved, background included. Accepts ``(..., 3)`` OD input
    and returns ``(..., 2)`` concentrations.
    """
    W = stains.matrix if isinstance(stains, StainMatrix) else np.asarray(stains, dtype=np.float64)
    od = np.asarray(od, dtype=np.float64)
    flat = od.reshape(-1, 3)
    return _nnls_2col(flat, W).reshape(od.shape[:-1] + (2,))


def max_concentrations(od: np.ndarray, stains, percentile: float = 99.0) -> tuple[float, float]:
    """Per-stain ``percentile``-th concentration over all pixels of ``od``."""
    conc = solve_concentrations(od, stains).reshape(-1, 2)
    hi = np.percentile(conc, percentile, axis=0)
    return float(hi[0]), float(hi[1])
