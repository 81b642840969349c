"""Semi-supervised training objective.

    total = supervised + alpha * tv + beta * kl + lambda * unsup

``supervised`` is the per-patch squared error averaged over the batch, ``tv``
the anisotropic total variation of the unsupervised outputs (per patch,
averaged), ``unsup`` the responsibility-weighted Gaussian penalty on the
unsupervised residuals averaged per pixel, and ``kl`` the synthetic-rain
anchor, which depends on the mixture only and so never moves the network.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import gmm as gmm_mod
from .gmm import GmmParams, SynGaussian
from .imaging import PatchBatch
from .net import ModelState, forward, watch_params
from .numerics import ContractError, Tape, Tensor, absolute, add, backward, diff, mul, scale, square, sub, total


@dataclass(frozen=True)
class LossWeights:
    lam: float = 0.5
    alpha: float = 1e-5
    beta: float = 1e-9

    def __post_init__(self):
        for name in ("lam", "alpha", "beta"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {name} must be a finite non-negative number, got {v}")

    def to_json(self) -> dict:
        return {"lambda": self.lam, "alpha": self.alpha, "beta": self.beta}

    @classmethod
    def from_json(cls, d: dict) -> "LossWeights":
        unknown = set(d) - {"lambda", "alpha", "beta"}
        if unknown:
            raise ValueError(f"unknown loss weight(s): {sorted(unknown)}")
        base = cls()
        return cls(float(d.get("lambda", base.lam)), float(d.get("alpha", base.alpha)),
                   float(d.get("beta", base.beta)))


@dataclass
class LossReport:
    total: float
    supervised: float
    unsupNll: float  # responsibility-weighted form actually optimised, per pixel
    tv: float
    kl: float
    nSupervised: int
    nUnsupervised: int
    gmmNll: float = 0.0  # exact mixture NLL of the same residuals, per pixel

    def as_dict(self) -> dict:
        return asdict(self)


def _same_shape(a: Tensor, b: Tensor, what: str):
    if a.shape != b.shape:
        raise ContractError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def supervised_loss(outputs: Tensor, targets) -> Tensor:
    """Squared Frobenius error per patch, averaged over the batch."""
    targets = targets if isinstance(targets, Tensor) else Tensor(targets)
    _same_shape(outputs, targets, "supervised_loss")
    return scale(total(square(sub(outputs, targets))), 1.0 / outputs.shape[0])


def tv_loss(outputs: Tensor) -> Tensor:
    """Anisotropic TV (forward differences, no wraparound) per patch, averaged over the batch."""
    if outputs.data.ndim != 4 or min(outputs.shape[2:]) < 2:
        raise ContractError(f"tv_loss needs [B, C, P, P] with P >= 2, got {outputs.shape}")
    tv = add(total(absolute(diff(outputs, -1))), total(absolute(diff(outputs, -2))))
    return scale(tv, 1.0 / outputs.shape[0])


def unsup_quadratic_parts(residuals: Tensor, gamma, gmm: GmmParams) -> tuple[Tensor, float]:
    """Split the weighted penalty into its residual-dependent part and its constant part.

    Both are averaged over pixels. ``gamma`` is treated as a constant.
    """
    n = int(np.prod(residuals.shape))
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != (n, gmm.K):
        raise ContractError(f"responsibilities {gamma.shape} do not match {n} residuals x {gmm.K} components")
    weight = (gamma / (2.0 * gmm.sigma2)).sum(axis=1).reshape(residuals.shape)
    quad = scale(total(mul(square(residuals), Tensor(weight))), 1.0 / n)
    per_k = 0.5 * np.log(gmm.sigma2) - np.log(gmm.pi)
    const = float(np.where(gamma > 0, gamma * per_k, 0.0).sum()) / n
    return quad, const


def unsup_quadratic_loss(residuals: Tensor, gamma, gmm: GmmParams) -> Tensor:
    """``mean_n sum_k gamma_nk (r_n^2 / (2 s2_k) + log(s2_k) / 2 - log pi_k)``."""
    quad, const = unsup_quadratic_parts(residuals, gamma, gmm)
    return add(quad, Tensor(const))


def total_loss(sup: Optional[PatchBatch], unsup: Optional[PatchBatch], model: ModelState,
               gmm: Optional[GmmParams], syn: Optional[SynGaussian], weights: LossWeights,
               gamma=None) -> tuple[LossReport, list[np.ndarray]]:
    """Evaluate the objective on one supervised and one unsupervised batch under a single tape.

    Returns the report and the gradient of ``total`` for every model parameter.
    ``gamma`` defaults to the E-step of the current unsupervised residuals;
    pass it explicitly to hold it fixed (e.g. for finite differences).
    """
    tape = Tape()
    params = watch_params(model, tape)
    parts = []
    n_sup = n_unsup = 0
    sup_val = tv_val = q_val = kl_val = nll_val = 0.0

    if sup is not None and sup.count > 0:
        if sup.targets is None:
            raise ContractError("supervised batch has no targets")
        out = forward(model, sup.inputs, params=params)
        l_sup = supervised_loss(out, sup.targets)
        sup_val = l_sup.item()
        n_sup = sup.count
        parts.append(l_sup)

    if unsup is not None and unsup.count > 0:
        if gmm is None or syn is None:
            raise ContractError("unsupervised batch needs mixture parameters and the synthetic Gaussian")
        x = Tensor(unsup.inputs)
        out = forward(model, x, params=params)
        resid = sub(x, out)
        if gamma is None:
            gamma = gmm_mod.e_step(resid.data, gmm)
        l_tv = tv_loss(out)
        l_q = unsup_quadratic_loss(resid, gamma, gmm)
        kl_val = gmm_mod.kl_anchor(syn, gmm)
        tv_val, q_val = l_tv.item(), l_q.item()
        nll_val = gmm_mod.gmm_nll(resid.data, gmm) / resid.data.size
        n_unsup = unsup.count
        parts.append(scale(l_tv, weights.alpha))
        parts.append(Tensor(weights.beta * kl_val))
        parts.append(scale(l_q, weights.lam))

    if not parts:
        raise ContractError("total_loss needs at least one non-empty batch")
    loss = parts[0]
    for p in parts[1:]:
        loss = add(loss, p)
    grads = backward(tape, loss, params)
    tape.clear()
    report = LossReport(loss.item(), sup_val, q_val, tv_val, kl_val, n_sup, n_unsup, nll_val)
    return report, grads
