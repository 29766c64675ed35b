"""Learned canonicalization over a finite group.

The optimization-based canonicalizer scores every orbit entry
``x_i = act(g_i^-1, x)`` with ``e_i = v_R . s(x_i) / tau`` where ``s`` is any
(non-equivariant) backbone, turns the scores into a distribution over the
group with a softmax, and picks the most probable element. Because the orbit
of a transformed input is a permutation of the original orbit, the selection
is exactly equivariant whenever the top score is unique.

The direct canonicalizer reads the per-element logits off a G-CNN instead.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from canonkit import tensor as T
from canonkit.errors import ConfigError, DimensionError
from canonkit.nets import NetSpec, backbone_forward, gcnn_forward, predictor_forward
from canonkit.symmetry import (
    Group,
    GroupElement,
    act_image,
    act_output,
    compose,
    inverse,
    orbit_stack,
)
from canonkit.tensor import Parameters, Tensor

ST_MODES = ("hard_st", "gumbel")


@dataclass
class CanonConfig:
    tau: float = 1.0
    embed_dim: int = 128
    v_R_mode: str = "fixed"
    vref_seed: int = 0
    normalize_embeddings: bool = True
    selection: str = "argmax"
    st_mode: str = "hard_st"
    gumbel_temp: float = 1.0
    lambda_opt: float = 1.0
    lambda_prior: float = 1.0
    v_R: list[float] | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not self.gumbel_temp > 0:
            raise ConfigError(f"gumbel_temp must be positive, got {self.gumbel_temp}")
        if self.v_R_mode not in ("fixed", "learned"):
            raise ConfigError(f"v_R_mode must be 'fixed' or 'learned', got {self.v_R_mode!r}")
        if self.st_mode not in ST_MODES:
            raise ConfigError(f"st_mode must be one of {ST_MODES}, got {self.st_mode!r}")
        if self.selection != "argmax":
            raise ConfigError("only argmax selection is supported")
        if self.lambda_opt < 0 or self.lambda_prior < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.v_R is not None and len(self.v_R) != self.embed_dim:
            raise DimensionError(f"|v_R| = {len(self.v_R)} but embed_dim = {self.embed_dim}")

    def reference_vector(self) -> np.ndarray:
        if self.v_R is not None:
            return np.asarray(self.v_R, dtype=np.float64)
        return np.random.default_rng(self.vref_seed).standard_normal(self.embed_dim)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CanonResult:
    embeddings: np.ndarray  # [|G|, d]; empty for the direct approach
    energies: np.ndarray  # [|G|]
    probs: np.ndarray  # [|G|]
    selected: GroupElement
    selected_index: int
    canonical: np.ndarray


@dataclass
class BatchCanon:
    """Canonicalization of an ``[N, C, H, W]`` batch, graph attached."""

    orbits: np.ndarray  # [N, |G|, C, H, W]
    embeddings: Tensor | None  # [N, |G|, d]
    energies: Tensor  # [N, |G|]
    probs: Tensor  # [N, |G|]
    selected: np.ndarray  # [N] element indices
    canonical: np.ndarray  # [N, C, H, W]

    def result(self, n: int, group: Group) -> CanonResult:
        emb = self.embeddings.data[n] if self.embeddings is not None else np.empty((0, 0))
        i = int(self.selected[n])
        return CanonResult(emb, self.energies.data[n], self.probs.data[n], group[i], i, self.canonical[n])


def reference_tensor(s_params: Parameters, cfg: CanonConfig) -> Tensor:
    if cfg.v_R_mode == "learned":
        return s_params["v_R"]
    return Tensor(cfg.reference_vector())


def add_reference_parameter(s_params: Parameters, cfg: CanonConfig) -> Parameters:
    """Register ``v_R`` as a trainable entry when ``v_R_mode == 'learned'``."""
    if cfg.v_R_mode == "learned" and "v_R" not in s_params:
        s_params["v_R"] = Tensor(cfg.reference_vector())
    return s_params


def select(probs: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest element index."""
    return np.argmax(probs, axis=-1)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DimensionError(f"expected [C, H, W] or [N, C, H, W], got {x.shape}")
    return x, False


def orbit_embeddings(s_params: Parameters, spec: NetSpec, x, group: Group,
                     cfg: CanonConfig) -> tuple[np.ndarray, Tensor, Tensor]:
    """Orbits ``[N, |G|, C, H, W]``, embeddings ``[N, |G|, d]`` and energies ``[N, |G|]``."""
    xb, _ = _as_batch(x)
    if spec.embed_dim != cfg.embed_dim:
        raise DimensionError(f"backbone embeds to {spec.embed_dim}, reference vector has {cfg.embed_dim}")
    orbits = orbit_stack(xb, group)
    n, k = orbits.shape[:2]
    flat = orbits.reshape((n * k,) + orbits.shape[2:])
    emb = T.reshape(backbone_forward(s_params, spec, flat), (n, k, spec.embed_dim))
    if cfg.normalize_embeddings:
        emb = T.l2_normalize(emb)
    e = T.scale(T.dot(emb, reference_tensor(s_params, cfg)), 1.0 / cfg.tau)
    return orbits, emb, e


def energies(s_params: Parameters, spec: NetSpec, x, group: Group, cfg: CanonConfig) -> Tensor:
    """Energies ``[|G|]`` of a single image's orbit (differentiable)."""
    _, _, e = orbit_embeddings(s_params, spec, x, group, cfg)
    return T.reshape(e, (len(group),))


def canonicalize_batch(s_params: Parameters, spec: NetSpec, x, group: Group,
                       cfg: CanonConfig) -> BatchCanon:
    orbits, emb, e = orbit_embeddings(s_params, spec, x, group, cfg)
    # energies already carry 1/tau
    probs = T.softmax(e, 1.0)
    sel = select(probs.data)
    canonical = orbits[np.arange(len(sel)), sel]
    return BatchCanon(orbits, emb, e, probs, sel, canonical)


def canonicalize(s_params: Parameters, spec: NetSpec, x, group: Group, cfg: CanonConfig) -> CanonResult:
    return canonicalize_batch(s_params, spec, x, group, cfg).result(0, group)


def direct_canonicalize_batch(gcnn_params: Parameters, spec: NetSpec, x, group: Group) -> BatchCanon:
    if group.name not in ("c4", "d4"):
        raise ConfigError(f"direct canonicalization supports c4 and d4, not {group.name}")
    xb, _ = _as_batch(x)
    orbits = orbit_stack(xb, group)
    logits = gcnn_forward(gcnn_params, spec, xb, group)
    probs = T.softmax(logits, 1.0)
    sel = select(probs.data)
    return BatchCanon(orbits, None, logits, probs, sel, orbits[np.arange(len(sel)), sel])


def direct_canonicalize(gcnn_params: Parameters, spec: NetSpec, x, group: Group) -> CanonResult:
    return direct_canonicalize_batch(gcnn_params, spec, x, group).result(0, group)


def apply_canonicalized(pred_params: Parameters, pred_spec: NetSpec,
                        canon: Callable[[np.ndarray], CanonResult], x, output_kind: str,
                        group: Group | None = None):
    """``f(x) = c'(x) p(c(x)^-1 x)`` for one input."""
    res = canon(x)
    y = predictor_forward(pred_params, pred_spec, res.canonical).data
    return act_output(res.selected, y, output_kind, group)


# --------------------------------------------------------------------------
# differentiable selection
# --------------------------------------------------------------------------


def st_select(probs: Tensor, orbit_list, selected) -> Tensor:
    """Hard pick in the forward pass, soft-mixture gradient in the backward pass.

    ``probs`` is ``[|G|]`` with ``orbit_list`` a sequence of |G| entries, or
    ``[N, |G|]`` with ``orbit_list`` an ``[N, |G|, ...]`` array or Tensor.
    The output is bitwise ``orbit_list[selected]``; gradients match those of
    ``sum_g probs[g] * orbit_list[g]``.
    """
    if isinstance(orbit_list, (list, tuple)):
        orbits = T.stack([T.as_tensor(o) for o in orbit_list], axis=0)
    else:
        orbits = T.as_tensor(orbit_list)
    single = probs.ndim == 1
    if single:
        P = T.reshape(probs, (1,) + probs.shape)
        orbits = T.reshape(orbits, (1,) + orbits.shape)
    else:
        P = probs
    if orbits.shape[:2] != P.shape:
        raise DimensionError(f"st_select: probs {probs.shape} vs orbit entries {orbits.shape}")
    sel = np.atleast_1d(np.asarray(selected, dtype=np.int64))
    out = orbits.data[np.arange(P.shape[0]), sel].copy()
    feat_axes = tuple(range(2, orbits.ndim))

    def _bw(g):
        gp = (orbits.data * g[:, None]).sum(axis=feat_axes)
        go = P.data.reshape(P.shape + (1,) * len(feat_axes)) * g[:, None]
        return gp, go

    res = T._make(out, (P, orbits), _bw, "st_select")
    return T.reshape(res, out.shape[1:]) if single else res


def gumbel_select(probs: Tensor, orbit_list, gumbel_temp: float,
                  rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    """Sample an orbit entry from ``probs`` with Gumbel noise, straight-through.

    Returns the selected entries and the sampled indices.
    """
    if not gumbel_temp > 0:
        raise ConfigError(f"gumbel_temp must be positive, got {gumbel_temp}")
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=probs.shape)
    perturbed = T.add(T.log(probs), Tensor(-np.log(-np.log(u))))
    idx = np.argmax(perturbed.data, axis=-1)
    weights = T.softmax(perturbed, gumbel_temp)
    return st_select(weights, orbit_list, idx), idx


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def pairwise_similarity(emb: Tensor) -> Tensor:
    """Mean over batch and unordered pairs ``i < j`` of ``emb[n, i] . emb[n, j]``."""
    n, k = emb.shape[:2]
    if k < 2:
        return Tensor(0.0)
    gram = T.matmul(emb, T.swapaxes(emb, 1, 2))
    mask = np.broadcast_to(np.triu(np.ones((k, k)), 1), (n, k, k))
    return T.scale(T.sum(T.mul(gram, Tensor(mask))), 1.0 / (n * k * (k - 1) / 2))


def orbit_separation_loss(s_params: Parameters, spec: NetSpec, batch, group: Group,
                          cfg: CanonConfig) -> Tensor:
    if len(group) < 2:
        return Tensor(0.0)
    _, emb, _ = orbit_embeddings(s_params, spec, batch, group, cfg)
    return pairwise_similarity(emb)


def delta_prior(probs: Tensor) -> Tensor:
    """Mean of ``-log probs[:, identity]``."""
    P = T.reshape(probs, (1, probs.shape[0])) if probs.ndim == 1 else probs
    return T.scale(T.mean(T.log(T.take(P, (slice(None), 0)))), -1.0)


def prior_loss_delta(s_params: Parameters, spec: NetSpec, batch, group: Group,
                     cfg: CanonConfig) -> Tensor:
    _, _, e = orbit_embeddings(s_params, spec, batch, group, cfg)
    return delta_prior(T.softmax(e, 1.0))


def prior_loss_kl(prior, probs: Tensor) -> Tensor:
    """``KL(prior || probs)``, batch-averaged when ``probs`` is ``[N, |G|]``."""
    pd = np.asarray(prior, dtype=np.float64)
    if pd.shape != probs.shape[-1:]:
        raise DimensionError(f"prior {pd.shape} does not match probs {probs.shape}")
    if np.any(pd < 0) or abs(pd.sum() - 1.0) > 1e-12:
        raise ConfigError("prior must be a probability vector")
    P = T.reshape(probs, (1, probs.shape[0])) if probs.ndim == 1 else probs
    live = pd > 0
    entropy_term = float(np.sum(pd[live] * np.log(pd[live])))
    # sum_i pd_i log pd_i - sum_i pd_i log probs_i, skipping pd_i == 0
    idx = np.flatnonzero(live)
    logp = T.log(T.take(P, (slice(None), idx)))
    weights = np.broadcast_to(pd[idx], logp.shape)
    cross = T.scale(T.sum(T.mul(logp, Tensor(weights))), 1.0 / P.shape[0])
    return T.add(T.scale(cross, -1.0), Tensor(entropy_term))


# --------------------------------------------------------------------------
# diagnostics
# --------------------------------------------------------------------------


def score(s_params: Parameters, spec: NetSpec, g: GroupElement, x, cfg: CanonConfig) -> float:
    """``s(rho(g), x) = v_R . s_hat(rho(g)^-1 x) / tau`` for one image."""
    xt = act_image(inverse(g), np.asarray(x, dtype=np.float64))
    emb = backbone_forward(s_params, spec, xt)
    if cfg.normalize_embeddings:
        emb = T.l2_normalize(emb)
    return float(T.dot(emb, reference_tensor(s_params, cfg)).data) / cfg.tau


def energy_condition_check(s_params: Parameters, spec: NetSpec, x, g: GroupElement,
                           g1: GroupElement, group: Group, cfg: CanonConfig) -> float:
    """``|s(g, g1 x) - s(g1^-1 g, x)|``; zero for any backbone by construction."""
    if g not in group or g1 not in group:
        raise ConfigError(f"{g} or {g1} is not in {group.name}")
    lhs = score(s_params, spec, g, act_image(g1, np.asarray(x, dtype=np.float64)), cfg)
    rhs = score(s_params, spec, compose(inverse(g1), g), x, cfg)
    return abs(lhs - rhs)


def mean_orbit_cosine(s_params: Parameters, spec: NetSpec, x, group: Group, cfg: CanonConfig) -> float:
    """Mean pairwise cosine similarity among orbit embeddings, averaged over the batch."""
    _, emb, _ = orbit_embeddings(s_params, spec, x, group, cfg)
    unit = emb if cfg.normalize_embeddings else T.l2_normalize(emb)
    return float(pairwise_similarity(unit).data)


def top2_gap(energies_: np.ndarray) -> np.ndarray:
    """Difference between the largest and second largest energy per row."""
    s = np.sort(np.asarray(energies_), axis=-1)
    return s[..., -1] - s[..., -2]
