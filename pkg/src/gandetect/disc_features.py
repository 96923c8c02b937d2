"""Discriminator feature probe and the regularized linear classifier.

Each of the discriminator's three activation maps (16x16x256, 8x8x512,
4x4x1024) is max-pooled with non-overlapping windows down to a 4x4
spatial grid, flattened channel-major, and concatenated in layer order:
16*256 + 16*512 + 16*1024 = 28672 features. A 10-way L2-penalized
multinomial logistic regression is trained on top by full-batch
gradient descent with backtracking line search.

The training-set feature matrix can be large (10000 x 28672 float32 is
about 1.1 GB), so the fit never materializes a standardized copy: the
scaler is folded into effective weights W_eff = W / std and
b_eff = b - W_eff . mean at every evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .errors import DataError, NumericalError
from .gan_core import FEATURE_DIM, DiscriminatorNet

NUM_CLASSES = 10
STD_FLOOR = 1e-6
POOL_GRID = 4


def pooled_features(d: DiscriminatorNet, chips: torch.Tensor) -> torch.Tensor:
    """Differentiable pooled-activation probe; gradients flow to chips."""
    if chips.dim() != 4 or chips.shape[1:] != (3, 32, 32):
        raise ValueError(f"chip batch must be (n, 3, 32, 32), got {tuple(chips.shape)}")
    maps = d.feature_maps(chips)
    blocks = []
    for a in maps:
        window = a.shape[-1] // POOL_GRID
        pooled = a if window == 1 else F.max_pool2d(a, window)
        blocks.append(pooled.flatten(1))
    return torch.cat(blocks, dim=1)


def extract_features_batch(d: DiscriminatorNet, chips: torch.Tensor) -> torch.Tensor:
    """(B, 3, 32, 32) -> (B, feature_dim) pooled activations."""
    d.eval()
    with torch.no_grad():
        return pooled_features(d, chips)


def extract_features(d: DiscriminatorNet, chip: torch.Tensor) -> torch.Tensor:
    """(3, 32, 32) -> (feature_dim,); 28672 at full width."""
    if chip.dim() != 3:
        raise ValueError(f"chip must be (3, 32, 32), got {tuple(chip.shape)}")
    return extract_features_batch(d, chip.unsqueeze(0)).squeeze(0)


@dataclass(frozen=True)
class LinearClassifier:
    weights: torch.Tensor  # (10, D) in standardized feature space
    bias: torch.Tensor  # (10,)
    l2_lambda: float
    mean: torch.Tensor  # (D,)
    std: torch.Tensor  # (D,) floored at STD_FLOOR

    def __post_init__(self):
        if self.l2_lambda <= 0:
            raise ValueError("l2_lambda must be > 0")
        if not torch.isfinite(self.weights).all() or not torch.isfinite(self.bias).all():
            raise NumericalError("classifier parameters contain non-finite values")

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def effective(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Scaler folded in: logits = X @ W_eff.T + b_eff on raw features."""
        w_eff = self.weights / self.std
        b_eff = self.bias - w_eff @ self.mean
        return w_eff, b_eff

    def logits(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.feature_dim:
            raise DataError(
                f"feature dimension {features.shape[-1]} != classifier dimension {self.feature_dim}"
            )
        w_eff, b_eff = self.effective()
        return features @ w_eff.T + b_eff

    def predict_proba(self, features: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(features).double(), dim=-1)


def _as_matrix(features) -> torch.Tensor:
    if isinstance(features, torch.Tensor):
        mat = features
    else:
        mat = torch.stack(list(features))
    if mat.dim() != 2:
        raise ValueError(f"features must be (n, dim), got {tuple(mat.shape)}")
    return mat.float()


def _fold(w: torch.Tensor, b: torch.Tensor, mean64: torch.Tensor, std64: torch.Tensor):
    w_eff = (w / std64).float()
    b_eff = (b - (w / std64) @ mean64).float()
    return w_eff, b_eff


def _objective(
    x: torch.Tensor,
    y: torch.Tensor,
    w: torch.Tensor,
    b: torch.Tensor,
    mean64: torch.Tensor,
    std64: torch.Tensor,
    l2_lambda: float,
) -> tuple[float, torch.Tensor]:
    w_eff, b_eff = _fold(w, b, mean64, std64)
    logits = (x @ w_eff.T + b_eff).double()
    lse = torch.logsumexp(logits, dim=1)
    nll = (lse - logits[torch.arange(len(y)), y]).mean()
    loss = nll + l2_lambda * (w * w).sum()
    return float(loss), logits - lse.unsqueeze(1)  # log-probabilities


def fit_multinomial_logistic(
    x: torch.Tensor,
    y: torch.Tensor,
    l2_lambda: float,
    seed: int,
    max_iter: int = 5000,
    grad_tol: float = 1e-4,
    progress: bool = False,
) -> tuple[torch.Tensor, torch.Tensor, list[float]]:
    """Full-batch GD with Armijo backtracking on the convex objective.

    Returns (weights, bias, per-iteration objective values). The
    objective sequence is non-increasing by construction: a step is
    only taken when it achieves sufficient decrease, halving the step
    size as needed.
    """
    n, dim = x.shape
    mean64 = x.mean(dim=0).double()
    std64 = x.var(dim=0, unbiased=False).double().sqrt().clamp_min(STD_FLOOR)
    gen = torch.Generator().manual_seed(seed)
    w = 0.01 * torch.randn((NUM_CLASSES, dim), generator=gen, dtype=torch.float64)
    b = torch.zeros(NUM_CLASSES, dtype=torch.float64)
    rows = torch.arange(n)

    loss, logp = _objective(x, y, w, b, mean64, std64, l2_lambda)
    history = [loss]
    step = 1.0
    for it in range(max_iter):
        resid = torch.exp(logp)  # (n, 10) float64 probabilities
        resid[rows, y] -= 1.0
        resid32 = resid.float()
        raw = (resid32.T @ x).double()  # (10, D)
        g_w = (raw - torch.outer(resid.sum(dim=0), mean64)) / std64 / n + 2.0 * l2_lambda * w
        g_b = resid.mean(dim=0)
        gnorm_sq = float((g_w * g_w).sum() + (g_b * g_b).sum())
        if gnorm_sq ** 0.5 <= grad_tol:
            break
        accepted = False
        for _ in range(30):
            w_new = w - step * g_w
            b_new = b - step * g_b
            loss_new, logp_new = _objective(x, y, w_new, b_new, mean64, std64, l2_lambda)
            if loss_new <= loss - 1e-4 * step * gnorm_sq:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        w, b, loss, logp = w_new, b_new, loss_new, logp_new
        history.append(loss)
        step *= 2.0
        if progress and (it + 1) % 50 == 0:
            print(f"[train-classifier] iter {it + 1} loss={loss:.6f} grad={gnorm_sq ** 0.5:.2e}", flush=True)
    if not all(math.isfinite(v) for v in history):
        raise NumericalError("non-finite objective during classifier training")
    return w, b, history


def train_linear(
    features,
    labels,
    l2_lambda: float = 1e-4,
    seed: int = 0,
    max_iter: int = 5000,
    grad_tol: float = 1e-4,
    progress: bool = False,
) -> LinearClassifier:
    """Fit the 10-way classifier; every class must appear in labels."""
    x = _as_matrix(features)
    y = torch.as_tensor(labels, dtype=torch.long)
    if len(x) != len(y):
        raise DataError(f"{len(x)} feature rows vs {len(y)} labels")
    if len(x) < NUM_CLASSES:
        raise DataError(f"need at least {NUM_CLASSES} examples, got {len(x)}")
    present = set(y.tolist())
    missing = sorted(set(range(NUM_CLASSES)) - present)
    if missing:
        raise DataError(f"classes missing from training labels: {missing}")
    if not present <= set(range(NUM_CLASSES)):
        raise DataError(f"labels outside 0..{NUM_CLASSES - 1}: {sorted(present - set(range(NUM_CLASSES)))}")
    w, b, _ = fit_multinomial_logistic(
        x, y, l2_lambda, seed, max_iter=max_iter, grad_tol=grad_tol, progress=progress
    )
    mean = x.mean(dim=0)
    std = x.var(dim=0, unbiased=False).sqrt().clamp_min(STD_FLOOR)
    return LinearClassifier(
        weights=w.float(), bias=b.float(), l2_lambda=l2_lambda, mean=mean, std=std
    )


def classify_features(clf: LinearClassifier, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """(B, D) -> (argmax classes (B,), softmax confidences (B,))."""
    proba = clf.predict_proba(features)
    conf, cls = proba.max(dim=-1)
    return cls, conf.float()


def classify_chip(d: DiscriminatorNet, clf: LinearClassifier, chip: torch.Tensor) -> tuple[int, float]:
    feats = extract_features(d, chip)
    cls, conf = classify_features(clf, feats.unsqueeze(0))
    return int(cls[0]), float(conf[0])


def classify_chips(
    d: DiscriminatorNet, clf: LinearClassifier, chips: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    feats = extract_features_batch(d, chips)
    return classify_features(clf, feats)


def save_classifier(path: str | Path, clf: LinearClassifier) -> None:
    tensors = {
        "weights": clf.weights,
        "bias": clf.bias,
        "scaler_mean": clf.mean,
        "scaler_std": clf.std,
    }
    ckpt.save_checkpoint(path, tensors, {"kind": "classifier", "l2_lambda": clf.l2_lambda})


def load_classifier(path: str | Path) -> LinearClassifier:
    archive = ckpt.load_checkpoint(path)

    def tensor(name: str) -> torch.Tensor:
        return torch.from_numpy(archive.tensors[name].copy())

    return LinearClassifier(
        weights=tensor("weights"),
        bias=tensor("bias"),
        l2_lambda=float(archive.meta["l2_lambda"]),
        mean=tensor("scaler_mean"),
        std=tensor("scaler_std"),
    )
