"""Training objectives: cross-entropy, modality dropout variants, sigmoid contrastive."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DimensionError, InputError, NumericError
from .model import Mode, ModelParams, TokenPolicy, forward_logit
from .rng import Xoshiro256pp


class DropoutKind(str, enum.Enum):
    NONE = "none"
    CONVENTIONAL = "conventional"
    SIMULTANEOUS = "simultaneous"


# Non-empty subsets of {image, tabular}, in sampler index order.
SUBSETS = (Mode.IMAGE, Mode.TABULAR, Mode.BOTH)


@dataclass
class DropoutPolicy:
    kind: DropoutKind = DropoutKind.SIMULTANEOUS
    lam: float = 1.0
    sampler_seed: int = 0

    def __post_init__(self):
        self.kind = DropoutKind(self.kind)
        if self.lam < 0:
            raise InputError(f"lambda must be >= 0, got {self.lam}")


class SubsetSampler:
    """Uniform draws over the non-empty modality subsets, one per batch."""

    def __init__(self, seed: int):
        self._rng = Xoshiro256pp(seed)

    def draw(self) -> Mode:
        return SUBSETS[self._rng.below(len(SUBSETS))]


def _labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be 0 or 1")
    return y


def loss_base(logits: Tensor, y) -> Tensor:
    """Mean binary cross-entropy on logits: softplus(l) - y*l."""
    y = _labels(y)
    if y.shape != logits.shape:
        raise DimensionError(f"labels {y.shape} do not match logits {logits.shape}")
    per_sample = ad.sub(ad.softplus(logits), ad.mul(logits, ad.constant(y)))
    return ad.reduce_mean(per_sample)


def loss_md(params: ModelParams, x_c, x_t, y, sampler: SubsetSampler | Mode,
            policy: TokenPolicy = TokenPolicy.LEARNED) -> tuple[Tensor, Mode]:
    """Conventional modality dropout: one sampled subset per batch.

    ``sampler`` may also be a fixed ``Mode`` to force the subset. Returns
    the loss and the subset used.
    """
    subset = sampler if isinstance(sampler, Mode) else sampler.draw()
    return loss_base(forward_logit(params, x_c, x_t, subset, policy), y), subset


def loss_smd(params: ModelParams, x_c, x_t, y, lam: float = 1.0,
             policy: TokenPolicy = TokenPolicy.LEARNED) -> Tensor:
    """Full-input loss plus lam times both unimodal losses, in one graph."""
    if lam < 0:
        raise InputError(f"lambda must be >= 0, got {lam}")
    full = loss_base(forward_logit(params, x_c, x_t, Mode.BOTH, policy), y)
    if lam == 0:
        return full
    img = loss_base(forward_logit(params, x_c, x_t, Mode.IMAGE, policy), y)
    tab = loss_base(forward_logit(params, x_c, x_t, Mode.TABULAR, policy), y)
    return ad.add(full, ad.scalar_mul(ad.add(img, tab), lam))


def pair_labels(y) -> np.ndarray:
    """+1 where two samples share a label, -1 otherwise (diagonal is +1)."""
    y = np.asarray(y).reshape(-1)
    return np.where(y[:, None] == y[None, :], 1.0, -1.0)


def loss_con_pair(z_i: Tensor, z_j: Tensor, a, t: Tensor, b: Tensor) -> Tensor:
    """Sigmoid contrastive loss summed over all n^2 pairs (no 1/n).

    Term (u, v) is softplus(a[u,v] * (b - t * <z_i[u], z_j[v]>)). The pair
    matrix is symmetrised before summing so that swapping ``z_i`` and
    ``z_j`` gives a bitwise identical result.
    """
    if z_i.shape != z_j.shape:
        raise DimensionError(f"representation shapes differ: {z_i.shape} vs {z_j.shape}")
    a = np.asarray(a, dtype=np.float64)
    n = z_i.rows
    if a.shape != (n, n):
        raise DimensionError(f"pair labels must be {n}x{n}, got {a.shape}")
    sims = ad.matmul(z_i, ad.transpose(z_j))
    if not np.all(np.isfinite(sims.data)):
        raise NumericError("non-finite similarity in contrastive loss")
    logits = ad.mul(ad.sub(b, ad.mul(t, sims)), ad.constant(a))
    terms = ad.softplus(logits)
    sym = ad.add(terms, ad.transpose(terms))
    return ad.scalar_mul(ad.reduce_sum(sym), 0.5)


def loss_con(z_c: Tensor, z_t: Tensor, a, t: Tensor, b: Tensor) -> Tensor:
    """Image-tabular contrastive term only."""
    return loss_con_pair(z_c, z_t, a, t, b)


def loss_con_hat(z_c: Tensor, z_t: Tensor, z_f: Tensor, a, t: Tensor, b: Tensor) -> Tensor:
    """Image-tabular, image-fused and tabular-fused terms with shared t, b."""
    if not (z_c.shape == z_t.shape == z_f.shape):
        raise DimensionError(f"representation shapes differ: {z_c.shape}, {z_t.shape}, {z_f.shape}")
    total = ad.add(loss_con_pair(z_c, z_t, a, t, b), loss_con_pair(z_c, z_f, a, t, b))
    return ad.add(total, loss_con_pair(z_t, z_f, a, t, b))
