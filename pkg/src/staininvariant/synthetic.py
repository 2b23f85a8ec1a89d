"""Synthetic H&E tiles rendered through the Beer-Lambert forward model.

Each class is a concentration texture: smoothed Gaussian noise around a mean
(H, E) pair, clamped at zero. Rendering a labelled set under two different
stain matrices gives a pure stain-shift domain pair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .color_optics import od_to_rgb, save_png
from .stain_estimation import StainMatrix, canonical_stain_order


@dataclass(frozen=True)
class ClassPrototype:
    name: str
    mean: tuple[float, float]
    noise: float = 0.3
    smoothing: float = 1.5

    def __post_init__(self):
        if len(self.mean) != 2 or min(self.mean) < 0:
            raise ValueError("prototype mean must be a non-negative (H, E) pair")
        if self.noise < 0 or self.smoothing < 0:
            raise ValueError("noise and smoothing must be non-negative")


@dataclass(frozen=True)
class SyntheticDomainSpec:
    stains: StainMatrix
    prototypes: tuple[ClassPrototype, ...]
    n_per_class: int = 20
    side: int = 32
    seed: int = 0

    @property
    def class_names(self) -> list[str]:
        return [p.name for p in self.prototypes]


@dataclass
class LabeledImages:
    images: np.ndarray  # (n, side, side, 3) uint8
    labels: np.ndarray  # (n,) int
    class_names: list[str] = field(default_factory=list)
    concentrations: np.ndarray | None = None  # (n, side, side, 2)

    def __len__(self) -> int:
        return len(self.labels)


def sample_concentrations(proto: ClassPrototype, side: int, rng: np.random.Generator) -> np.ndarray:
    raw = rng.standard_normal((side, side, 2))
    if proto.smoothing > 0:
        smooth = gaussian_filter(raw, sigma=(proto.smoothing, proto.smoothing, 0), mode="wrap")
        std = smooth.std(axis=(0, 1), keepdims=True)
        smooth = smooth / np.where(std > 0, std, 1.0)
    else:
        smooth = raw
    return np.maximum(np.asarray(proto.mean) + proto.noise * smooth, 0.0)


def render_concentrations(conc: np.ndarray, stains: StainMatrix) -> np.ndarray:
    return od_to_rgb(conc @ stains.matrix.T)


def render_synthetic(spec: SyntheticDomainSpec) -> LabeledImages:
    """Render ``n_per_class`` tiles per prototype under ``spec.stains``.

    Concentrations depend only on ``(seed, class index, image index)``, so two
    specs differing only in their stain matrix produce the same tissue
    rendered in different colours.
    """
    images, labels, concs = [], [], []
    for k, proto in enumerate(spec.prototypes):
        for i in range(spec.n_per_class):
            rng = np.random.default_rng([spec.seed, k, i])
            c = sample_concentrations(proto, spec.side, rng)
            concs.append(c)
            images.append(render_concentrations(c, spec.stains))
            labels.append(k)
    n = len(labels)
    side = spec.side
    return LabeledImages(
        images=np.array(images, dtype=np.uint8).reshape(n, side, side, 3),
        labels=np.array(labels, dtype=np.int64),
        class_names=spec.class_names,
        concentrations=np.array(concs).reshape(n, side, side, 2),
    )


def write_class_folders(data: LabeledImages, out_dir: str | Path) -> list[Path]:
    """Write images as ``out_dir/<class>/<class>_<index>.png``."""
    out_dir = Path(out_dir)
    written = []
    counters: dict[int, int] = {}
    for img, y in zip(data.images, data.labels):
        y = int(y)
        idx = counters.get(y, 0)
        counters[y] = idx + 1
        name = data.class_names[y]
        path = out_dir / name / f"{name}_{idx:04d}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        save_png(img, path)
        written.append(path)
    return written


# A bluish/pink appearance and a purple/magenta one, about 10-15 degrees
# apart per stain.
SOURCE_HE = canonical_stain_order(
    np.array([[0.65, 0.07], [0.70, 0.99], [0.29, 0.11]]), method="reference"
)
TARGET_HE = canonical_stain_order(
    np.array([[0.49, 0.21], [0.77, 0.86], [0.41, 0.46]]), method="reference"
)


def mix_stains(stains: StainMatrix, m: float) -> StainMatrix:
    """Blend each stain direction toward the other by fraction ``m``.

    The result stays in the plane spanned by ``stains``, so a concentration
    perturbation of the original pair can reach it. ``m`` must be below 0.5
    to keep the two directions distinct.
    """
    if not 0.0 <= m < 0.5:
        raise ValueError("mix fraction must be in [0, 0.5)")
    h, e = stains.hematoxylin, stains.eosin
    return canonical_stain_order(np.stack([(1 - m) * h + m * e, m * h + (1 - m) * e], axis=1),
                                 method="reference")


DEFAULT_MIX = 0.2
DEFAULT_TARGET_HE = mix_stains(SOURCE_HE, DEFAULT_MIX)

# Four tissue-like classes at the corners and centre of the (H, E)
# concentration square, with different textures.
DEFAULT_PROTOTYPES = (
    ClassPrototype("debris", (0.4, 0.4), noise=0.35, smoothing=1.0),
    ClassPrototype("lymphocytes", (1.4, 0.4), noise=0.3, smoothing=3.0),
    ClassPrototype("stroma", (0.4, 1.4), noise=0.45, smoothing=0.7),
    ClassPrototype("tumor", (1.0, 1.0), noise=0.4, smoothing=2.0),
)


def prototype_from_dict(d: dict) -> ClassPrototype:
    unknown = set(d) - {"name", "mean", "noise", "smoothing"}
    if unknown:
        raise ValueError(f"unknown prototype keys: {sorted(unknown)}")
    return ClassPrototype(
        name=str(d["name"]),
        mean=tuple(float(x) for x in d["mean"]),
        noise=float(d.get("noise", 0.3)),
        smoothing=float(d.get("smoothing", 1.5)),
    )


def prototype_to_dict(p: ClassPrototype) -> dict:
    return {"name": p.name, "mean": list(p.mean), "noise": p.noise, "smoothing": p.smoothing}


def domain_spec_to_json(spec: SyntheticDomainSpec) -> str:
    return json.dumps(
        {
            "stains": spec.stains.to_dict()["stains"],
            "prototypes": [prototype_to_dict(p) for p in spec.prototypes],
            "n_per_class": spec.n_per_class,
            "side": spec.side,
            "seed": spec.seed,
        },
        indent=2,
    )
