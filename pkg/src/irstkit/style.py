"""Selective style recomposition on channel statistics.

Per-sample channel means and standard deviations are compared against running
per-domain prototypes (EMA-updated during training). A softmax over negative
KL divergences attributes each sample to the prototypes, the most
style-sensitive channels are selected by their standard deviation, and only
those channels are re-normalized toward the attributed prototype mixture,
blended residually. Attribution needs no domain identity, so the projection
stays active at inference.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, axis_mean, clamp_min, exp, log, sqrt

logger = logging.getLogger(__name__)

SIGMA_MIN = 1e-5
VAR_EPS = 1e-10


@dataclass
class ChannelStats:
    """Per-sample channel statistics over H*W."""

    mu: np.ndarray
    sigma: np.ndarray


@dataclass
class StylePrototype:
    """Running (mean, std) channel statistics of one source domain."""

    domain_id: str
    p_mu: np.ndarray | None = None
    p_sigma: np.ndarray | None = None
    initialized: bool = False
    update_count: int = 0


@dataclass
class SsrSite:
    """One recomposition site: per-domain prototypes plus its hyperparameters."""

    stage: int
    prototypes: list[StylePrototype]
    tau: float = 0.3
    lam: float = 0.3
    alpha: float = 0.95
    rank_by: str = "sigma"  # 'mu' ranks by channel mean instead
    _warned: bool = field(default=False, repr=False)

    @property
    def num_domains(self) -> int:
        return len(self.prototypes)

    def prototype_for(self, domain_id: str) -> StylePrototype:
        for proto in self.prototypes:
            if proto.domain_id == domain_id:
                return proto
        raise KeyError(f"no prototype for domain {domain_id!r} at stage {self.stage}")


def channel_stats(f: Tensor | np.ndarray, sample_index: int = 0) -> ChannelStats:
    """Mean and clamped std over H*W for one sample of an NCHW array."""
    v = f.values if isinstance(f, Tensor) else f
    x = v[sample_index]
    c = x.shape[0]
    if x.shape[1] * x.shape[2] < 2:
        raise ValueError("channel_stats: need H*W >= 2")
    flat = x.reshape(c, -1)
    mu = flat.mean(axis=1)
    sigma = np.maximum(np.sqrt(flat.var(axis=1) + VAR_EPS), SIGMA_MIN)
    return ChannelStats(mu=mu, sigma=sigma)


def batch_channel_stats(values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized per-sample stats: (N, C) means and clamped stds."""
    n, c = values.shape[:2]
    flat = values.reshape(n, c, -1)
    mu = flat.mean(axis=2)
    sigma = np.maximum(np.sqrt(flat.var(axis=2) + VAR_EPS), SIGMA_MIN)
    return mu, sigma


def update_prototype(proto: StylePrototype, stats: ChannelStats, alpha: float = 0.95,
                     mode: str = "train") -> StylePrototype:
    """EMA update p <- alpha*p + (1-alpha)*stats; the first call copies stats."""
    if mode != "train":
        raise RuntimeError("update_prototype: prototype updates are train-mode only")
    if not proto.initialized:
        proto.p_mu = stats.mu.astype(np.float64).copy()
        proto.p_sigma = stats.sigma.astype(np.float64).copy()
        proto.initialized = True
    else:
        proto.p_mu = alpha * proto.p_mu + (1.0 - alpha) * stats.mu
        proto.p_sigma = alpha * proto.p_sigma + (1.0 - alpha) * stats.sigma
    proto.update_count += 1
    return proto


def gaussian_kl(stats: ChannelStats, proto: StylePrototype) -> float:
    """KL(N(mu, sigma^2) || N(p_mu, p_sigma^2)) summed over channels."""
    if not proto.initialized:
        raise RuntimeError(f"gaussian_kl: prototype {proto.domain_id!r} not initialized")
    s, ps = stats.sigma, proto.p_sigma
    terms = np.log(ps / s) + (s * s + (stats.mu - proto.p_mu) ** 2) / (2.0 * ps * ps) - 0.5
    return float(terms.sum())


def attribution(stats: ChannelStats, site: SsrSite) -> np.ndarray:
    """Softmax over negative prototype divergences, max-subtracted for stability."""
    kls = np.array([gaussian_kl(stats, proto) for proto in site.prototypes])
    logits = -kls
    logits -= logits.max()
    ex = np.exp(logits)
    return ex / ex.sum()


def activation_mask(stats: ChannelStats, tau: float, rank_by: str = "sigma") -> np.ndarray:
    """Binary channel mask selecting the top share of style-sensitive channels.

    Channels are ranked descending by std (or mean with rank_by='mu'); ties go
    to the lower channel index. The count is the nearest integer to tau*C.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"activation_mask: tau must be in (0,1], got {tau}")
    key = stats.sigma if rank_by == "sigma" else stats.mu
    c = key.shape[0]
    count = int(np.floor(tau * c + 0.5))
    order = np.argsort(-key, kind="stable")
    mask = np.zeros(c, dtype=np.float64)
    mask[order[:count]] = 1.0
    return mask


def recompose(f: Tensor, site: SsrSite, mode: str = "train",
              domain_ids: list[str] | None = None) -> Tensor:
    """Selectively restyle the masked channels of each sample.

    In train mode the matching domain prototype is EMA-updated first, from the
    batch mean of the per-sample stats of that domain. Attribution and the
    restyling itself use per-sample statistics and run in both modes. Gradients
    flow through the feature map everywhere it enters (statistics and
    attribution included); prototype arrays and the discrete channel mask are
    constants.
    """
    n, c = f.shape[:2]
    dtype = f.dtype
    mu_all, sigma_all = batch_channel_stats(f.values)

    if mode == "train":
        if domain_ids is None:
            raise ValueError("recompose: domain_ids required in train mode")
        if len(domain_ids) != n:
            raise ValueError("recompose: one domain id per sample required")
        for dom in sorted(set(domain_ids)):
            rows = [i for i, d in enumerate(domain_ids) if d == dom]
            batch_stats = ChannelStats(
                mu=mu_all[rows].mean(axis=0), sigma=sigma_all[rows].mean(axis=0)
            )
            update_prototype(site.prototype_for(dom), batch_stats, alpha=site.alpha)

    if not all(proto.initialized for proto in site.prototypes):
        if not site._warned:
            logger.warning(
                "stage %d recomposition skipped: prototypes not initialized yet", site.stage
            )
            site._warned = True
        return f

    mask = np.stack(
        [
            activation_mask(ChannelStats(mu=mu_all[i], sigma=sigma_all[i]),
                            site.tau, site.rank_by)
            for i in range(n)
        ]
    )

    # graph-side per-sample stats so gradients see the normalization
    g_mu = axis_mean(f, "spatial")
    centered = f - g_mu
    g_sigma = clamp_min(sqrt(axis_mean(centered * centered, "spatial") + VAR_EPS), SIGMA_MIN)

    # closed-form divergence to each prototype, then a softmax over prototypes;
    # the max-shift is a detached constant, which softmax invariance allows
    kls = []
    for proto in site.prototypes:
        pmu = Tensor(proto.p_mu.reshape(1, c, 1, 1).astype(dtype))
        psig = Tensor(proto.p_sigma.reshape(1, c, 1, 1).astype(dtype))
        terms = (
            log(psig) - log(g_sigma)
            + (g_sigma * g_sigma + (g_mu - pmu) * (g_mu - pmu)) / (psig * psig * 2.0)
            - 0.5
        )
        kls.append(axis_mean(terms, "channel") * float(c))  # (N,1,1,1)
    shift = np.min([k.values for k in kls], axis=0)
    exps = [exp(-(k - Tensor(shift))) for k in kls]
    total = exps[0]
    for e in exps[1:]:
        total = total + e

    t_mu = None
    t_sigma = None
    for proto, e in zip(site.prototypes, exps):
        kappa = e / total
        pm = kappa * Tensor(proto.p_mu.reshape(1, c, 1, 1).astype(dtype))
        ps = kappa * Tensor(proto.p_sigma.reshape(1, c, 1, 1).astype(dtype))
        t_mu = pm if t_mu is None else t_mu + pm
        t_sigma = ps if t_sigma is None else t_sigma + ps

    restyled = t_sigma * (centered / g_sigma) + t_mu

    # unmasked channels stay bit-identical: only the masked residual is added
    gate = Tensor(((1.0 - site.lam) * mask).reshape(n, c, 1, 1).astype(dtype))
    return f + gate * (restyled - f)


# -- checkpoint support -----------------------------------------------------


def site_state_arrays(site: SsrSite) -> dict[str, np.ndarray]:
    out = {}
    for m, proto in enumerate(site.prototypes):
        if proto.initialized:
            out[f"ssr.stage{site.stage}.domain{m}.mu"] = proto.p_mu
            out[f"ssr.stage{site.stage}.domain{m}.sigma"] = proto.p_sigma
    return out


def load_site_state(site: SsrSite, arrays: dict[str, np.ndarray]) -> None:
    for m, proto in enumerate(site.prototypes):
        km = f"ssr.stage{site.stage}.domain{m}.mu"
        ks = f"ssr.stage{site.stage}.domain{m}.sigma"
        if km in arrays and ks in arrays:
            proto.p_mu = arrays[km].reshape(-1).astype(np.float64)
            proto.p_sigma = arrays[ks].reshape(-1).astype(np.float64)
            proto.initialized = True
