"""Iterative clipped sign-gradient attacks against the recommender.

Four variants share one update rule (step against the sign of the loss
gradient, clip to an epsilon box): the undefended attack minimises the
divergence to a hub target and checks raw-space k-occurrence; the
defence-aware variants check k-occurrence after Mutual Proximity
rescaling of the augmented catalogue, optionally swapping the divergence
objective for the smooth MP surrogate (with or without the norm term).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .audio_io import AudioClip
from .catalogue import Catalogue, CatalogueError
from .features import mfcc_with_pullback
from .gaussian import GaussianModel, chol_inverse, fit_gaussian, gaussian_vjp, skl_grad
from .gaussian import skl_from_inverses
from .hubness import k_occurrence, single_song_occurrence, snr_db
from .mutual_proximity import DistanceKind, mp_surrogate, mp_surrogate_grad


class AttackVariant(str, Enum):
    ORIGINAL = "original"
    MOD_KL = "mod-kl"
    MOD_MP = "mod-mp"
    MOD_MP_NO_NORM = "mod-mp-no-norm"

    @property
    def uses_surrogate(self) -> bool:
        return self in (AttackVariant.MOD_MP, AttackVariant.MOD_MP_NO_NORM)

    @property
    def defended_criterion(self) -> bool:
        return self is not AttackVariant.ORIGINAL


# Published parameter sets (epsilon, eta, alpha) per variant; the no-norm
# variant's loss is scale-free so alpha defaults to 1.
PAPER_PARAMS: dict[AttackVariant, tuple[float, float, float]] = {
    AttackVariant.ORIGINAL: (0.1, 0.001, 25.0),
    AttackVariant.MOD_KL: (1.0, 0.001, 25.0),
    AttackVariant.MOD_MP: (1.0, 0.0005, 100.0),
    AttackVariant.MOD_MP_NO_NORM: (1.0, 0.0005, 1.0),
}


@dataclass(frozen=True)
class AttackConfig:
    variant: AttackVariant
    epsilon: float
    eta: float
    alpha: float
    max_epochs: int = 500
    k: int = 5
    hub_threshold: int = 25

    def __post_init__(self):
        if self.epsilon <= 0 or self.eta < 0 or self.alpha < 0 or self.max_epochs < 1:
            raise ValueError("invalid attack parameters")

    @classmethod
    def for_variant(cls, variant: AttackVariant | str, **overrides) -> "AttackConfig":
        variant = AttackVariant(variant)
        epsilon, eta, alpha = PAPER_PARAMS[variant]
        params = {"epsilon": epsilon, "eta": eta, "alpha": alpha}
        params.update(overrides)
        return cls(variant=variant, **params)


@dataclass(frozen=True)
class AttackOutcome:
    clip_id: str
    target_id: str
    success: bool
    epochs_used: int
    final_occurrence: int
    snr_db: float
    final_loss: float
    delta_norm: float

    def to_json_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "target_id": self.target_id,
            "success": self.success,
            "epochs_used": self.epochs_used,
            "final_occurrence": self.final_occurrence,
            "snr_db": self.snr_db,
            "final_loss": self.final_loss,
            "delta_norm": self.delta_norm,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "AttackOutcome":
        return cls(**json.loads(line))


def select_target(c: Catalogue, x_id: str, space: DistanceKind,
                  hub_threshold: int | None = None) -> str:
    """The hub closest to x in the given space; falls back to the most
    frequently recommended song when no hub exists."""
    if c.n < c.k + 1:
        raise CatalogueError("catalogue too small to select an attack target")
    matrix = c.matrix(defended=space == DistanceKind.MP)
    occ = k_occurrence(matrix, c.k)
    threshold = 5 * c.k if hub_threshold is None else hub_threshold
    idx_x = c.index_of(x_id)
    row = matrix.values[idx_x]
    candidates = np.flatnonzero(occ >= threshold)
    candidates = candidates[candidates != idx_x]
    if candidates.size:
        return matrix.ids[candidates[np.argmin(row[candidates])]]
    others = np.flatnonzero(np.arange(c.n) != idx_x)
    return matrix.ids[others[np.argmax(occ[others])]]


@dataclass
class _EpochState:
    """Forward-pass products at one perturbation, reused by loss, gradient
    and stopping criterion."""

    perturbed: AudioClip
    feats: object
    pullback: object
    model: GaussianModel
    inv: np.ndarray
    row: np.ndarray


def _evaluate(c: Catalogue, clip: AudioClip, delta: np.ndarray) -> _EpochState:
    perturbed = clip.with_samples(clip.samples + delta)
    feats, pullback = mfcc_with_pullback(perturbed, c.mfcc_config)
    model = fit_gaussian(feats, c.reg)
    inv, _ = chol_inverse(model.cov)
    return _EpochState(perturbed, feats, pullback, model, inv, c.stack.skl_row(model, inv))


def _weighted_skl_grads(c: Catalogue, model: GaussianModel, inv: np.ndarray,
                        weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of sum_i w_i * skl(model, catalogue_i) wrt the model parameters."""
    stack = c.stack
    delta = model.mean[None, :] - stack.means
    mean_grad = 0.5 * (np.einsum("n,nij,nj->i", weights, stack.invs, delta)
                       + inv @ (weights @ delta))
    mixed = np.einsum("n,nij->ij", weights, stack.covs)
    mixed += np.einsum("n,ni,nj->ij", weights, delta, delta)
    cov_grad = 0.25 * (np.einsum("n,nij->ij", weights, stack.invs) - inv @ mixed @ inv)
    cov_grad = (cov_grad + cov_grad.T) / 2.0
    return mean_grad, cov_grad


def _objective(state: _EpochState, target: GaussianModel, c: Catalogue,
               cfg: AttackConfig, idx_x: int, idx_t: int) -> float:
    if cfg.variant.uses_surrogate:
        return mp_surrogate(state.row, c.d_skl.values[idx_t], idx_x, idx_t)
    inv_t, _ = chol_inverse(target.cov)
    return skl_from_inverses(state.model.mean, state.model.cov, state.inv,
                             target.mean, target.cov, inv_t)


def _loss(state: _EpochState, delta: np.ndarray, target: GaussianModel,
          c: Catalogue, cfg: AttackConfig, idx_x: int, idx_t: int) -> float:
    loss = cfg.alpha * _objective(state, target, c, cfg, idx_x, idx_t)
    if cfg.variant is not AttackVariant.MOD_MP_NO_NORM:
        loss += float(delta @ delta)
    return loss


def _grad(state: _EpochState, delta: np.ndarray, target: GaussianModel,
          c: Catalogue, cfg: AttackConfig, idx_x: int, idx_t: int) -> np.ndarray:
    if cfg.variant.uses_surrogate:
        row_t = c.d_skl.values[idx_t]
        weights = cfg.alpha * mp_surrogate_grad(state.row, row_t, idx_x, idx_t)
        mean_grad, cov_grad = _weighted_skl_grads(c, state.model, state.inv, weights)
    else:
        mean_grad, cov_grad = skl_grad(state.model, target)
        mean_grad = cfg.alpha * mean_grad
        cov_grad = cfg.alpha * cov_grad
    frame_grad = gaussian_vjp(state.feats, c.reg, mean_grad, cov_grad)
    grad = state.pullback(frame_grad)
    if cfg.variant is not AttackVariant.MOD_MP_NO_NORM:
        grad = grad + 2.0 * delta
    return grad


def loss_and_grad(clip: AudioClip, delta: np.ndarray, target: GaussianModel,
                  c: Catalogue, cfg: AttackConfig) -> tuple[float, np.ndarray]:
    """Attack objective and its gradient with respect to the perturbation."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != clip.samples.shape:
        raise ValueError("delta must match the analysis segment length")
    idx_x = c.index_of(clip.source_id)
    idx_t = c.index_of(target.clip_id)
    state = _evaluate(c, clip, delta)
    return (_loss(state, delta, target, c, cfg, idx_x, idx_t),
            _grad(state, delta, target, c, cfg, idx_x, idx_t))


def attack_step(delta: np.ndarray, grad: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    """One clipped sign-gradient update; sign(0) moves nothing."""
    if delta.shape != grad.shape:
        raise ValueError("delta and gradient shapes differ")
    return np.clip(delta - cfg.eta * np.sign(grad), -cfg.epsilon, cfg.epsilon)


def criterion_occurrence(c: Catalogue, row: np.ndarray, cfg: AttackConfig) -> int:
    """k-occurrence the perturbed song would have once appended.

    The undefended attack counts in the raw divergence space; the
    defence-aware variants count after MP rescaling of the augmented
    matrix. On exact ties the appended object loses (largest index).

    The rescale of the augmented matrix is computed incrementally: the
    appended object shifts every pair count by at most one (it qualifies
    for pair (i, j) iff it is farther from both than they are from each
    other), so the cached clean counts update in O(n^2).
    """
    if not cfg.variant.defended_criterion:
        return single_song_occurrence(c.d_skl, row, cfg.k)
    d = c.d_skl.values
    n = c.n
    qualifies = (row[:, None] > d) & (row[None, :] > d)
    block = 1.0 - (c.mp_pair_counts + qualifies) / (n + 1)
    np.fill_diagonal(block, np.inf)
    kth = np.partition(block, cfg.k - 1, axis=1)[:, cfg.k - 1]
    farther = (d > row[:, None]) & (row[None, :] > row[:, None])
    new_column = 1.0 - farther.sum(axis=1) / (n + 1)
    return int(np.sum(new_column < kth))


def attack_song(c: Catalogue, x_id: str, cfg: AttackConfig) -> tuple[AttackOutcome, AudioClip]:
    """Run the full attack loop; returns the outcome and the perturbed clip.

    One forward pass per epoch serves the stopping criterion and the next
    gradient; the loop stops at the first epoch whose perturbation meets
    the variant's occurrence threshold.
    """
    if cfg.k != c.k:
        raise ValueError(f"attack neighborhood k={cfg.k} disagrees with catalogue k={c.k}")
    space = DistanceKind.MP if cfg.variant.defended_criterion else DistanceKind.SKL
    target_id = select_target(c, x_id, space, cfg.hub_threshold)
    target = c.models[c.index_of(target_id)]
    idx_x = c.index_of(x_id)
    idx_t = c.index_of(target_id)
    clip = c.clip(x_id)
    delta = np.zeros_like(clip.samples)

    state = _evaluate(c, clip, delta)
    occurrence = criterion_occurrence(c, state.row, cfg)
    success = occurrence >= cfg.hub_threshold
    epochs = 0
    while not success and epochs < cfg.max_epochs:
        grad = _grad(state, delta, target, c, cfg, idx_x, idx_t)
        delta = attack_step(delta, grad, cfg)
        epochs += 1
        state = _evaluate(c, clip, delta)
        occurrence = criterion_occurrence(c, state.row, cfg)
        success = occurrence >= cfg.hub_threshold

    outcome = AttackOutcome(
        clip_id=x_id,
        target_id=target_id,
        success=success,
        epochs_used=epochs,
        final_occurrence=occurrence,
        snr_db=snr_db(clip, delta),
        final_loss=_loss(state, delta, target, c, cfg, idx_x, idx_t),
        delta_norm=float(np.linalg.norm(delta)),
    )
    return outcome, clip.with_samples(clip.samples + delta)


def run_attack(c: Catalogue, x_id: str, cfg: AttackConfig) -> AttackOutcome:
    """Attack one song and report the outcome record."""
    return attack_song(c, x_id, cfg)[0]
