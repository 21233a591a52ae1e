"""Importance-sampling log-likelihood estimators with their log-weight
variance, plus cross-modality prediction accuracy.

Every example ``r`` of a batch draws from its own stream ``stream.spawn(r)``,
so a report does not depend on how examples are chunked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import MultimodalBatch, MvaeModel, decode_modality, fuse_posterior, log_likelihood
from .numerics import RngStream, log_sum_exp

_LOG_2PI = math.log(2.0 * math.pi)
# importance samples per example unless configured otherwise
DEFAULT_IS_SAMPLES = 1000
# rows (examples x samples) decoded at once
_CHUNK_ROWS = 50_000


@dataclass
class EstimatorReport:
    estimate: float
    n_samples: int
    log_weight_variance: float | None
    proposal: str
    per_example: np.ndarray = field(repr=False)
    per_example_variance: np.ndarray | None = field(default=None, repr=False)


def log_weight_variance(log_w) -> float:
    """Mean over examples of the unbiased variance of each row of log-weights."""
    log_w = np.asarray(log_w, dtype=np.float64)
    if log_w.shape[-1] < 2:
        raise ValueError("log-weight variance needs at least 2 samples")
    return float(np.var(log_w, axis=-1, ddof=1).mean())


def _as_mask(model: MvaeModel, spec) -> np.ndarray:
    m = np.zeros(model.n_modalities, dtype=bool)
    if isinstance(spec, (int, np.integer, str)):
        spec = [spec]
    spec = list(spec)
    if spec and isinstance(spec[0], (bool, np.bool_)) and len(spec) == model.n_modalities:
        return np.asarray(spec, dtype=bool)
    for s in spec:
        m[model.index(s)] = True
    return m


def _describe(model: MvaeModel, mask: np.ndarray) -> str:
    return "q(z|" + ",".join(s.name for s, on in zip(model.specs, mask) if on) + ")"


def _require_present(batch: MultimodalBatch, mask: np.ndarray, what: str) -> None:
    missing = np.flatnonzero(~batch.mask[:, mask].all(axis=1))
    if len(missing):
        raise ValueError(f"{what} modalities absent in {len(missing)} rows (first row {missing[0]})")


def _std_normal_logpdf(z: np.ndarray) -> np.ndarray:
    return -0.5 * (np.square(z) + _LOG_2PI).sum(axis=-1)


def _decode_loglik(model: MvaeModel, targets: np.ndarray, z: np.ndarray, batch: MultimodalBatch,
                   rows: np.ndarray, n: int) -> np.ndarray:
    """Sum over target modalities of log p(x_i | z); z is (len(rows) * n, D)."""
    total = np.zeros(len(z))
    for i in np.flatnonzero(targets):
        x = np.repeat(batch.data[i][rows], n, axis=0)
        total += log_likelihood(model.specs[i], decode_modality(model, int(i), z), x).data
    return total


def _log_weights(model: MvaeModel, batch: MultimodalBatch, targets: np.ndarray, proposal: np.ndarray,
                 n: int, stream: RngStream) -> np.ndarray:
    """(B, n) log p(x_targets | z) + log p(z) - log q(z | x_proposal)."""
    _require_present(batch, targets, "target")
    _require_present(batch, proposal, "proposal")
    if not proposal.any():
        raise ValueError("proposal subset is empty")
    # only proposal modalities are encoded, so other columns are never read
    q = fuse_posterior(model, batch.with_mask(batch.mask & proposal))
    mu, lv = q.mean.data, q.log_var.data
    B, D = mu.shape
    out = np.empty((B, n))
    per_chunk = max(1, _CHUNK_ROWS // n)
    for start in range(0, B, per_chunk):
        rows = np.arange(start, min(B, start + per_chunk))
        eps = np.stack([stream.spawn(int(r)).spawn(0).normal((n, D)) for r in rows])
        sd = np.exp(0.5 * lv[rows])[:, None, :]
        z = mu[rows][:, None, :] + sd * eps
        log_q = -0.5 * (np.square(eps) + lv[rows][:, None, :] + _LOG_2PI).sum(axis=-1)
        flat = z.reshape(-1, D)
        ll = _decode_loglik(model, targets, flat, batch, rows, n).reshape(len(rows), n)
        out[rows] = ll + _std_normal_logpdf(z) - log_q
    return out


def _lse_mean(log_w: np.ndarray) -> np.ndarray:
    return log_sum_exp(log_w, axis=-1).data - math.log(log_w.shape[-1])


def _report(log_w: np.ndarray, description: str) -> EstimatorReport:
    per = _lse_mean(log_w)
    n = log_w.shape[1]
    var_rows = np.var(log_w, axis=1, ddof=1) if n >= 2 else None
    return EstimatorReport(float(per.mean()), n, None if var_rows is None else float(var_rows.mean()),
                           description, per, var_rows)


def estimate_log_joint(model: MvaeModel, batch: MultimodalBatch, targets, proposal_mask, n_samples: int,
                       stream: RngStream) -> EstimatorReport:
    """log p(x_targets) ~ LSE_s(log w_s) - log n with z_s ~ q(z | proposal)."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    t, p = _as_mask(model, targets), _as_mask(model, proposal_mask)
    if not t.any():
        raise ValueError("target set is empty")
    return _report(_log_weights(model, batch, t, p, n_samples, stream), _describe(model, p))


def estimate_log_marginal(model: MvaeModel, batch: MultimodalBatch, target, proposal_mask, n_samples: int,
                          stream: RngStream) -> EstimatorReport:
    return estimate_log_joint(model, batch, [model.index(target)], proposal_mask, n_samples, stream)


def estimate_log_conditional(model: MvaeModel, batch: MultimodalBatch, target, given, n_samples: int,
                             n_prior_samples: int, stream: RngStream, proposal_mask=None) -> EstimatorReport:
    """log p(x_i | x_j) ~ log E_q(z|x_j)[p(x_i|z) p(x_j|z) p(z) / q] - log E_p(z)[p(x_j|z)].

    The reported log-weight variance is that of the first (joint) term.
    """
    i, j = model.index(target), model.index(given)
    if i == j:
        raise ValueError("target and given modality must differ")
    if n_prior_samples < 1:
        raise ValueError("n_prior_samples must be >= 1")
    proposal = [j] if proposal_mask is None else proposal_mask
    joint = estimate_log_joint(model, batch, [i, j], proposal, n_samples, stream.spawn(0))
    tj = _as_mask(model, [j])
    prior_stream = stream.spawn(1)
    B, D = len(batch), model.latent_dim
    evidence = np.empty(B)
    per_chunk = max(1, _CHUNK_ROWS // n_prior_samples)
    for start in range(0, B, per_chunk):
        rows = np.arange(start, min(B, start + per_chunk))
        z = np.stack([prior_stream.spawn(int(r)).normal((n_prior_samples, D)) for r in rows])
        ll = _decode_loglik(model, tj, z.reshape(-1, D), batch, rows, n_prior_samples)
        evidence[rows] = _lse_mean(ll.reshape(len(rows), n_prior_samples))
    per = joint.per_example - evidence
    return EstimatorReport(float(per.mean()), n_samples, joint.log_weight_variance,
                           joint.proposal + f" / p(z) x{n_prior_samples}", per, joint.per_example_variance)


def iw_log_weight_variance(model: MvaeModel, batch: MultimodalBatch, weight_kind: str, targets, proposal_mask,
                           n_samples: int, stream: RngStream) -> float:
    """Mean per-example variance of the log importance weights.

    ``targets`` is the target modality (marginal), the target set (joint) or
    the pair ``(target, given)`` (conditional, first-term weights).
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    if weight_kind == "marginal":
        t = _as_mask(model, [model.index(targets)])
    elif weight_kind == "joint":
        t = _as_mask(model, targets)
    elif weight_kind == "conditional":
        i, j = targets
        t = _as_mask(model, [i, j])
        stream = stream.spawn(0)
    else:
        raise ValueError(f"unknown weight kind {weight_kind!r}")
    return log_weight_variance(_log_weights(model, batch, t, _as_mask(model, proposal_mask), n_samples, stream))


def cross_modality_accuracy(model: MvaeModel, batch: MultimodalBatch, source, target, stream: RngStream,
                            labels=None) -> float:
    """Predict categorical ``target`` from one z ~ q(z | x_source); ties go to the lowest class."""
    i, j = model.index(source), model.index(target)
    if model.specs[j].likelihood != "categorical":
        raise ValueError(f"target modality {model.specs[j].name!r} is not categorical")
    src = _as_mask(model, [i])
    _require_present(batch, src, "source")
    truth = np.asarray(batch.data[j] if labels is None else labels).reshape(-1)
    if np.isnan(truth).any():
        raise ValueError("accuracy needs the true class for every row")
    q = fuse_posterior(model, batch.with_mask(batch.mask & src))
    B, D = q.shape
    eps = np.stack([stream.spawn(r).normal(D) for r in range(B)]) if B else np.zeros((0, D))
    z = q.mean.data + np.exp(0.5 * q.log_var.data) * eps
    logits = decode_modality(model, j, z).data
    # argmax returns the first maximum
    return float((logits.argmax(axis=1) == truth.astype(np.int64)).mean())
