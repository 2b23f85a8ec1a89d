"""Consistency-regularised training of a small MLP classifier in numpy.

The feature extractor maps a flattened image to a feature vector
``r = A2 relu(A1 x + b1) + b2`` and the classifier is ``softmax(Wc r + bc)``.
Training minimises ``L = L_c + L_s`` where ``L_c`` is cross-entropy on the
source image and ``L_s`` the mean squared feature distance between the source
image and its stain-augmented views, all passed through the same extractor.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image

from .augmentation import PerturbParams, draw_rng, sample_perturbation
from .color_optics import as_rgb, od_to_rgb, rgb_to_od
from .errors import DimensionMismatch, ShapeMismatch, StainError
from .stain_estimation import SnmfConfig, StainMatrix, estimate_vahadane, solve_concentrations

logger = logging.getLogger(__name__)

INPUT_SIDE = 32
HIDDEN = 64
FEATURE_DIM = 32
LS_REDUCTIONS = ("mean", "sum", "sample")
PARAM_NAMES = ("A1", "b1", "A2", "b2", "Wc", "bc")


# --------------------------------------------------------------------------
# Inputs
# --------------------------------------------------------------------------


def downsample(img, side: int = INPUT_SIDE) -> np.ndarray:
    """Area-average an RGB image down to ``side x side`` (uint8)."""
    img = as_rgb(img)
    if img.shape[:2] == (side, side):
        return img
    return np.asarray(Image.fromarray(img).resize((side, side), Image.Resampling.BOX))


def preprocess(images: np.ndarray) -> np.ndarray:
    """Scale uint8 images ``(..., h, w, 3)`` to [0, 1] and flatten each one."""
    images = np.asarray(images)
    lead = images.shape[:-3]
    return (images.astype(np.float64) / 255.0).reshape(lead + (-1,))


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------


@dataclass
class ModelParams:
    A1: np.ndarray
    b1: np.ndarray
    A2: np.ndarray
    b2: np.ndarray
    Wc: np.ndarray
    bc: np.ndarray

    @classmethod
    def init(cls, input_dim: int, num_classes: int, seed: int = 42,
             hidden: int = HIDDEN, feature_dim: int = FEATURE_DIM) -> "ModelParams":
        """He-normal weights, zero biases."""
        rng = np.random.default_rng(seed)
        return cls(
            A1=rng.standard_normal((hidden, input_dim)) * np.sqrt(2.0 / input_dim),
            b1=np.zeros(hidden),
            A2=rng.standard_normal((feature_dim, hidden)) * np.sqrt(2.0 / hidden),
            b2=np.zeros(feature_dim),
            Wc=rng.standard_normal((num_classes, feature_dim)) * np.sqrt(1.0 / feature_dim),
            bc=np.zeros(num_classes),
        )

    @classmethod
    def zeros_like(cls, other: "ModelParams") -> "ModelParams":
        return cls(*(np.zeros_like(getattr(other, n)) for n in PARAM_NAMES))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        """``(input_dim, hidden, feature_dim, num_classes)``."""
        return self.A1.shape[1], self.A1.shape[0], self.A2.shape[0], self.Wc.shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in PARAM_NAMES]

    def validate(self) -> None:
        d_in, hid, d, k = self.shape
        expected = {"A1": (hid, d_in), "b1": (hid,), "A2": (d, hid), "b2": (d,),
                    "Wc": (k, d), "bc": (k,)}
        for name, shp in expected.items():
            arr = getattr(self, name)
            if arr.shape != shp:
                raise ShapeMismatch(f"{name} has shape {arr.shape}, expected {shp}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def with_flat(self, theta: np.ndarray) -> "ModelParams":
        out, i = [], 0
        for a in self.arrays():
            out.append(theta[i:i + a.size].reshape(a.shape).copy())
            i += a.size
        return ModelParams(*out)

    def copy(self) -> "ModelParams":
        return ModelParams(*(a.copy() for a in self.arrays()))

    def equals(self, other: "ModelParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


def forward_features(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Feature vector(s) ``r = A2 relu(A1 x + b1) + b2`` for ``x`` of shape (..., in)."""
    return _features(params, x)[0]


def _features(params: ModelParams, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.A1.shape[1]:
        raise ShapeMismatch(
            f"input dimension {x.shape[-1]} does not match model input {params.A1.shape[1]}"
        )
    pre = x @ params.A1.T + params.b1
    hidden = np.maximum(pre, 0.0)
    return hidden @ params.A2.T + params.b2, hidden, pre


def logits(params: ModelParams, r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != params.Wc.shape[1]:
        raise DimensionMismatch(f"feature dimension {r.shape[-1]} != {params.Wc.shape[1]}")
    return r @ params.Wc.T + params.bc


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def classify(params: ModelParams, r: np.ndarray) -> np.ndarray:
    """Class probabilities ``softmax(Wc r + bc)``."""
    return softmax(logits(params, r))


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(logits(params, forward_features(params, x)), axis=-1)


def cross_entropy(p: np.ndarray, y: int) -> float:
    return float(-np.log(p[y]))


def stain_reg_loss(r: np.ndarray, r_prime: Sequence[np.ndarray], reduction: str = "mean") -> float:
    """Squared L2 feature distance to each augmented view, averaged (or summed)."""
    r = np.asarray(r, dtype=np.float64)
    rp = np.asarray(r_prime, dtype=np.float64)
    if rp.ndim != 2 or len(rp) < 1:
        raise DimensionMismatch("r_prime must be a non-empty list of feature vectors")
    if rp.shape[1] != r.shape[-1]:
        raise DimensionMismatch(f"feature dims differ: {r.shape[-1]} vs {rp.shape[1]}")
    sq = np.sum((r - rp) ** 2, axis=1)
    return float(sq.sum() if reduction == "sum" else sq.mean())


def total_loss(l_c: float, l_s: float) -> float:
    return l_c + l_s


@dataclass(frozen=True)
class LossBreakdown:
    l_c: float
    l_s: float
    l_total: float

    @classmethod
    def of(cls, l_c: float, l_s: float) -> "LossBreakdown":
        l_c, l_s = float(l_c), float(l_s)
        return cls(l_c, l_s, total_loss(l_c, l_s))


# --------------------------------------------------------------------------
# Loss and gradient
# --------------------------------------------------------------------------


def loss_and_grad(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    x_aug: np.ndarray | None = None,
    reduction: str = "mean",
    need_grad: bool = True,
) -> tuple[LossBreakdown, ModelParams | None]:
    """Batch-mean loss and its gradient.

    Args:
        x: ``(B, in)`` preprocessed source images.
        y: ``(B,)`` class indices.
        x_aug: ``(B, N, in)`` preprocessed augmented views, or None to drop
            the consistency term.
        reduction: how ``L_s`` combines the N views ("mean" or "sum").
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    B = len(x)
    if B == 0:
        raise ValueError("empty batch")
    r, h, pre = _features(params, x)
    z = logits(params, r)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    l_c_each = lse - z[np.arange(B), y]
    l_c = float(l_c_each.mean())

    l_s = 0.0
    if x_aug is not None:
        x_aug = np.asarray(x_aug, dtype=np.float64)
        if x_aug.ndim != 3 or x_aug.shape[0] != B:
            raise ShapeMismatch(f"x_aug must be (B, N, in), got {x_aug.shape}")
        N = x_aug.shape[1]
        ra, ha, prea = _features(params, x_aug)
        diff = r[:, None, :] - ra  # (B, N, D)
        scale = 1.0 if reduction == "sum" else 1.0 / N
        l_s = float((scale * np.sum(diff * diff, axis=(1, 2))).mean())

    losses = LossBreakdown.of(l_c, l_s)
    if not need_grad:
        return losses, None

    p = softmax(z)
    dz = p
    dz[np.arange(B), y] -= 1.0
    dz /= B
    g = ModelParams.zeros_like(params)
    g.Wc = dz.T @ r
    g.bc = dz.sum(axis=0)
    dr = dz @ params.Wc

    if x_aug is not None:
        ddiff = (2.0 * scale / B) * diff  # dL_s / d r  per view
        dr = dr + ddiff.sum(axis=1)
        dra = -ddiff
        g.A2 += np.einsum("bnd,bnh->dh", dra, ha)
        g.b2 += dra.sum(axis=(0, 1))
        dpa = (dra @ params.A2) * (prea > 0)
        g.A1 += np.einsum("bnh,bni->hi", dpa, x_aug)
        g.b1 += dpa.sum(axis=(0, 1))

    g.A2 += dr.T @ h
    g.b2 += dr.sum(axis=0)
    dp = (dr @ params.A2) * (pre > 0)
    g.A1 += dp.T @ x
    g.b1 += dp.sum(axis=0)
    return losses, g


def check_gradient(
    f: Callable[[np.ndarray], float],
    grad: np.ndarray,
    theta: np.ndarray,
    indices: Iterable[int],
    h: float = 1e-4,
    floor: float = 1e-6,
) -> float:
    """Worst relative error between ``grad`` and central differences of ``f``.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    components that are zero up to round-off from dominating.
    """
    theta = np.array(theta, dtype=np.float64)
    worst = 0.0
    for i in indices:
        old = theta[i]
        theta[i] = old + h
        fp = f(theta)
        theta[i] = old - h
        fm = f(theta)
        theta[i] = old
        num = (fp - fm) / (2.0 * h)
        ana = grad[i]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        worst = max(worst, err)
    return worst


def _relu_pattern(params: ModelParams, x: np.ndarray, x_aug: np.ndarray | None) -> np.ndarray:
    pre = _features(params, x)[2] > 0
    if x_aug is None:
        return pre.ravel()
    return np.concatenate([pre.ravel(), (_features(params, x_aug)[2] > 0).ravel()])


def gradient_check(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    x_aug: np.ndarray | None = None,
    n_checks: int = 50,
    h: float = 1e-4,
    seed: int = 0,
    reduction: str = "mean",
) -> float:
    """Compare the backprop gradient of ``L`` with central differences.

    Checks ``n_checks`` randomly chosen parameters (at least one from each
    tensor) and returns the worst relative error. A parameter whose +-h
    perturbation flips any ReLU on or off is passed over for another one:
    the loss has a kink inside the difference interval there, so the
    central difference does not estimate the derivative.
    """
    _, g = loss_and_grad(params, x, y, x_aug, reduction)
    theta = params.flat()
    grad = g.flat()
    base = _relu_pattern(params, x, x_aug)

    def smooth_at(i: int) -> bool:
        for step in (h, -h):
            t = theta.copy()
            t[i] += step
            if not np.array_equal(_relu_pattern(params.with_flat(t), x, x_aug), base):
                return False
        return True

    rng = np.random.default_rng(seed)
    sizes = [a.size for a in params.arrays()]
    offsets = np.cumsum([0] + sizes[:-1])
    picks: list[int] = []
    for o, s in zip(offsets, sizes):
        for j in rng.permutation(s):
            if smooth_at(int(o + j)):
                picks.append(int(o + j))
                break
    skipped = 0
    for i in rng.permutation(theta.size):
        if len(picks) >= n_checks:
            break
        if int(i) in picks:
            continue
        if smooth_at(int(i)):
            picks.append(int(i))
        else:
            skipped += 1
    if skipped:
        logger.debug("gradient check passed over %d parameters at ReLU kinks", skipped)

    def f(t):
        return loss_and_grad(params.with_flat(t), x, y, x_aug, reduction, need_grad=False)[0].l_total

    return check_gradient(f, grad, theta, picks, h)


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    epochs: int = 10
    batch_size: int = 32
    perturb: PerturbParams = field(default_factory=PerturbParams)
    use_consistency: bool = True
    seed: int = 42
    ls_reduction: str = "mean"

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.ls_reduction not in LS_REDUCTIONS:
            raise ValueError(f"ls_reduction must be one of {LS_REDUCTIONS}")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["perturb"] = {f.name: getattr(self.perturb, f.name) for f in fields(self.perturb)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "perturb" in d and isinstance(d["perturb"], dict):
            pnames = {f.name for f in fields(PerturbParams)}
            bad = set(d["perturb"]) - pnames
            if bad:
                raise ValueError(f"unknown perturb keys: {sorted(bad)}")
            d["perturb"] = PerturbParams(**d["perturb"])
        return cls(**d)


def sgd_update(params: ModelParams, grad: ModelParams, lr: float) -> ModelParams:
    return ModelParams(*(p - lr * g for p, g in zip(params.arrays(), grad.arrays())))


def train_step(
    params: ModelParams,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    x_aug: np.ndarray | None = None,
) -> tuple[ModelParams, LossBreakdown]:
    """One SGD step on the batch-mean loss.

    ``x_aug`` holds the views of each sample produced by the augmenter; it
    is ignored when ``cfg.use_consistency`` is false, so gradient then flows
    from ``L_c`` alone.
    """
    if len(x) == 0:
        raise ValueError("empty batch")
    aug = x_aug if cfg.use_consistency else None
    reduction = "sum" if cfg.ls_reduction == "sum" else "mean"
    losses, grad = loss_and_grad(params, x, y, aug, reduction)
    return sgd_update(params, grad, cfg.lr), losses


class StainAugmenter:
    """Precomputes stain concentrations of a dataset and renders views per epoch.

    Stains are estimated per image with Vahadane unless ``stains`` is given
    (a single matrix for every image, or one per image). Images whose own
    estimation fails fall back to a matrix estimated from the pooled dataset.
    """

    def __init__(
        self,
        images: np.ndarray,
        perturb: PerturbParams,
        stains: StainMatrix | Sequence[StainMatrix] | None = None,
        snmf: SnmfConfig | None = None,
    ):
        images = np.asarray(images, dtype=np.uint8)
        self.perturb = perturb
        self.shape = images.shape[1:]
        od = rgb_to_od(images)
        if stains is None:
            stains = self._estimate_all(images, snmf)
        elif isinstance(stains, StainMatrix):
            stains = [stains] * len(images)
        if len(stains) != len(images):
            raise ValueError("need one stain matrix per image")
        self.stains = list(stains)
        self.matrices = np.stack([s.matrix for s in self.stains])  # (n, 3, 2)
        self.conc = np.stack(
            [solve_concentrations(od[i], s).reshape(-1, 2) for i, s in enumerate(self.stains)]
        )

    @staticmethod
    def _estimate_all(images: np.ndarray, snmf: SnmfConfig | None) -> list[StainMatrix]:
        out: list[StainMatrix | None] = []
        failed = 0
        for img in images:
            try:
                out.append(estimate_vahadane(img, snmf))
            except StainError:
                out.append(None)
                failed += 1
        if failed:
            logger.info("%d/%d images fell back to the pooled stain matrix", failed, len(images))
            pooled = estimate_vahadane(_pool(images), snmf)
            out = [pooled if s is None else s for s in out]
        return out

    def draws(self, seed: int, epoch: int, index: int) -> tuple[np.ndarray, np.ndarray]:
        n = self.perturb.n_augment
        alpha = np.empty((n, 2))
        beta = np.empty((n, 2))
        for k in range(n):
            d = sample_perturbation(draw_rng(seed, epoch, index, k), self.perturb)
            alpha[k], beta[k] = d.alpha, d.beta
        return alpha, beta

    def views(self, indices: Sequence[int], seed: int, epoch: int) -> np.ndarray:
        """Augmented uint8 views ``(len(indices), N, h, w, 3)``."""
        idx = np.asarray(indices, dtype=np.int64)
        ab = [self.draws(seed, epoch, int(i)) for i in idx]
        alpha = np.array([a for a, _ in ab])[:, :, None, :]
        beta = np.array([b for _, b in ab])[:, :, None, :]
        pert = np.maximum(alpha * self.conc[idx][:, None] + beta, 0.0)
        od = np.einsum("bnpc,bdc->bnpd", pert, self.matrices[idx])
        return od_to_rgb(od).reshape((len(idx), self.perturb.n_augment) + self.shape)


def _pool(images: np.ndarray, max_images: int = 64) -> np.ndarray:
    """A subsample of images flattened into one ``(1, pixels, 3)`` strip."""
    return np.ascontiguousarray(images[:max_images]).reshape(1, -1, 3)


@dataclass
class StepLog:
    epoch: int
    step: int
    losses: LossBreakdown


@dataclass
class TrainResult:
    params: ModelParams
    log: list[StepLog]

    @property
    def final(self) -> LossBreakdown | None:
        return self.log[-1].losses if self.log else None


def train(
    images: np.ndarray,
    labels: np.ndarray,
    cfg: TrainConfig,
    num_classes: int,
    augmenter: StainAugmenter | None = None,
    params: ModelParams | None = None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs of minibatch SGD.

    ``images`` are uint8 ``(n, side, side, 3)``; batch order for epoch ``e``
    comes from the stream ``(seed, e)`` and augmented views from
    ``(seed, e, sample, view)``, so runs are reproducible and the
    consistency-off path never touches the augmentation RNG.
    """
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty training set")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError("labels must lie in [0, num_classes)")
    x_all = preprocess(images)
    if params is None:
        params = ModelParams.init(x_all.shape[1], num_classes, cfg.seed)
    params.validate()
    if cfg.use_consistency and augmenter is None:
        augmenter = StainAugmenter(images, cfg.perturb)

    log: list[StepLog] = []
    n = len(images)
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        views = None
        if cfg.use_consistency:
            views = preprocess(augmenter.views(np.arange(n), cfg.seed, epoch))
            if cfg.ls_reduction == "sample":
                pick = np.random.default_rng([cfg.seed, epoch, n]).integers(
                    views.shape[1], size=n)
                views = views[np.arange(n), pick][:, None, :]
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x_aug = views[idx] if views is not None else None
            params, losses = train_step(params, x_all[idx], labels[idx], cfg, x_aug)
            log.append(StepLog(epoch, step, losses))
            step += 1
    return TrainResult(params, log)


def evaluate_predictions(params: ModelParams, images: np.ndarray) -> np.ndarray:
    return predict(params, preprocess(np.asarray(images, dtype=np.uint8)))


# --------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path: str | Path, seed: int, epoch: int) -> None:
    d_in, hid, d, k = params.shape
    doc = {
        "header": {"input_dim": d_in, "hidden": hid, "feature_dim": d,
                   "num_classes": k, "seed": seed, "epoch": epoch},
        "weights": {n: getattr(params, n).tolist() for n in PARAM_NAMES},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    doc = json.loads(Path(path).read_text())
    w = doc["weights"]
    params = ModelParams(*(np.asarray(w[n], dtype=np.float64) for n in PARAM_NAMES))
    params.validate()
    return params, doc["header"]


def write_log(log: Sequence[StepLog], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "l_c", "l_s", "l_total"])
        for row in log:
            l = row.losses
            writer.writerow([row.epoch, row.step, repr(l.l_c), repr(l.l_s), repr(l.l_total)])


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
