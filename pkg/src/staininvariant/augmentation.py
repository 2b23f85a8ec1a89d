"""Stain augmentation by concentration perturbation, and stain normalisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .color_optics import as_rgb, od_to_rgb, rgb_to_od
from .errors import ZeroMaxConcentration
from .stain_estimation import SnmfConfig, StainMatrix, estimate_vahadane, solve_concentrations


@dataclass(frozen=True)
class PerturbParams:
    """Uniform scale/shift ranges for the per-stain perturbation.

    ``alpha ~ U(1 - sigma1, 1 + sigma1)`` and ``beta ~ U(-sigma2, sigma2)``,
    drawn independently for hematoxylin and eosin.
    """

    sigma1: float = 0.2
    sigma2: float = 0.2
    n_augment: int = 6
    seed: int = 42

    def __post_init__(self):
        if not 0 <= self.sigma1 < 1:
            raise ValueError("sigma1 must lie in [0, 1)")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be >= 0")
        if self.n_augment < 1:
            raise ValueError("n_augment must be >= 1")


@dataclass(frozen=True)
class StainDraw:
    alpha: tuple[float, float]
    beta: tuple[float, float]

    def __post_init__(self):
        if min(self.alpha) <= 0:
            raise ValueError("alpha entries must be positive")

    @classmethod
    def identity(cls) -> "StainDraw":
        return cls((1.0, 1.0), (0.0, 0.0))


def draw_rng(seed: int, *indices: int) -> np.random.Generator:
    """Independent generator for a ``(seed, *indices)`` stream."""
    return np.random.default_rng([seed, *indices])


def sample_perturbation(rng: np.random.Generator, p: PerturbParams) -> StainDraw:
    alpha = rng.uniform(1.0 - p.sigma1, 1.0 + p.sigma1, size=2)
    beta = rng.uniform(-p.sigma2, p.sigma2, size=2)
    return StainDraw(tuple(float(a) for a in alpha), tuple(float(b) for b in beta))


def perturb_concentrations(conc: np.ndarray, draw: StainDraw) -> np.ndarray:
    """``max(0, alpha_s * C_s + beta_s)`` for each stain channel ``s``."""
    alpha = np.asarray(draw.alpha, dtype=np.float64)
    beta = np.asarray(draw.beta, dtype=np.float64)
    return np.maximum(alpha * np.asarray(conc, dtype=np.float64) + beta, 0.0)


def reconstruct(conc: np.ndarray, stains: StainMatrix) -> np.ndarray:
    """Render concentrations back to RGB under ``stains``."""
    return od_to_rgb(conc @ stains.matrix.T)


def stain_reconstruction(img, stains: StainMatrix) -> np.ndarray:
    """The image as seen through the two-stain model (no perturbation)."""
    return reconstruct(solve_concentrations(rgb_to_od(as_rgb(img)), stains), stains)


def augment_with_draws(
    img, stains: StainMatrix, p: PerturbParams, image_index: int = 0
) -> tuple[list[np.ndarray], list[StainDraw]]:
    """Like :func:`augment` but also returns the sampled draws."""
    conc = solve_concentrations(rgb_to_od(as_rgb(img)), stains)
    outputs, draws = [], []
    for k in range(p.n_augment):
        draw = sample_perturbation(draw_rng(p.seed, image_index, k), p)
        outputs.append(reconstruct(perturb_concentrations(conc, draw), stains))
        draws.append(draw)
    return outputs, draws


def augment(
    img,
    stains: StainMatrix | None = None,
    p: PerturbParams | None = None,
    image_index: int = 0,
    snmf: SnmfConfig | None = None,
) -> list[np.ndarray]:
    """Generate ``p.n_augment`` stain-altered copies of ``img``.

    Each copy re-renders perturbed concentrations under ``stains``. When no
    matrix is supplied it is estimated from the image with Vahadane (errors
    propagate). Draw ``k`` of image ``image_index`` uses the RNG stream
    ``(seed, image_index, k)``, so copies are reproducible independently.
    """
    p = p or PerturbParams()
    if stains is None:
        stains = estimate_vahadane(img, snmf)
    return augment_with_draws(img, stains, p, image_index)[0]


def normalize_to_target(
    img,
    src: StainMatrix,
    tgt: StainMatrix,
    max_c_src=None,
    max_c_tgt=None,
) -> np.ndarray:
    """Re-render ``img`` with the target stain appearance.

    Concentrations solved under ``src`` are rescaled per stain by
    ``max_c_tgt / max_c_src`` and rendered under ``tgt``. Max concentrations
    default to those stored on the matrices.
    """
    max_c_src = src.max_concentrations if max_c_src is None else max_c_src
    max_c_tgt = tgt.max_concentrations if max_c_tgt is None else max_c_tgt
    if max_c_src is None or max_c_tgt is None:
        raise ZeroMaxConcentration("max concentrations are unknown for a stain matrix")
    max_c_src = np.asarray(max_c_src, dtype=np.float64)
    max_c_tgt = np.asarray(max_c_tgt, dtype=np.float64)
    if np.any(max_c_src <= 0) or np.any(max_c_tgt <= 0):
        raise ZeroMaxConcentration("99th-percentile concentrations must be positive")
    conc = solve_concentrations(rgb_to_od(as_rgb(img)), src)
    return reconstruct(conc * (max_c_tgt / max_c_src), tgt)
