"""Measurement instruments over attention distributions and predictions.

Sparsity here is the share of instances NOT needed to cover 95% of the
attention mass, scaled to [0, 100]: a delta distribution on one of 100
instances scores 99, uniform attention scores 5. The number is an artifact
convention chosen so that sharper attention scores higher; only orderings
between models are meaningful.

Optimization risk of an attention distribution is the largest post-softmax
weight assigned to any noisy instance. For a multi-head aggregator each
head touches 1/m of the pooled feature, so the multi-head risk is the mean
of per-head risks, upper-bounded by the worst head.

The modulation factor quantifies what correlation-based refinement does to
the worst noisy instance: with refined logits A + alpha * U A and
Delta = alpha * U A, the refined post-softmax weight factorizes exactly as

    softmax(A + Delta)[i] = softmax(A)[i] * Lambda(i),
    Lambda(i) = exp(Delta_i) / sum_k softmax(A)_k exp(Delta_k),

and Jensen's inequality gives sum_k a_k exp(Delta_k) >= exp(sum_k a_k Delta_k),
so Lambda <= 1 whenever the attention-weighted mean modulation reaches the
noisy instance's own modulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


def _flat(v):
    return np.asarray(v, dtype=np.float64).reshape(-1)


def _softmax(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def _check_stochastic(U, s):
    U = np.asarray(U, dtype=np.float64)
    if U.shape != (s, s):
        raise ValidationError(f"similarity matrix must be {s}x{s}, got {U.shape}")
    if np.abs(U.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValidationError("similarity matrix rows must sum to 1")
    return U


# ---------------------------------------------------------------------------
# sparsity and risk
# ---------------------------------------------------------------------------

def sparsity_score(attention, mass: float = 0.95) -> float:
    """100 * (1 - k/s) where k is the smallest number of top instances
    covering ``mass`` of the attention."""
    a = _flat(attention)
    if not 0.0 < mass <= 1.0:
        raise ValueError(f"mass must be in (0, 1], got {mass}")
    if abs(a.sum() - 1.0) > 1e-6 or (a < 0).any():
        raise ValidationError("attention must be a normalized distribution")
    cum = np.cumsum(np.sort(a)[::-1])
    kstar = int(np.searchsorted(cum, mass - 1e-12)) + 1
    kstar = min(kstar, a.size)
    return 100.0 * (a.size - kstar) / a.size


def optimization_risk(attention, noisy) -> float:
    """Largest post-softmax attention on any noisy instance; 0 if none."""
    a = _flat(attention)
    idx = np.asarray(list(noisy), dtype=int)
    if idx.size == 0:
        return 0.0
    if idx.min() < 0 or idx.max() >= a.size:
        raise IndexError(f"noisy index out of range for bag of {a.size}")
    return float(a[idx].max())


@dataclass
class RiskReport:
    per_head: list
    combined: float            # mean of per-head risks (each head has 1/m impact)
    bound: float               # max over heads
    worst_noisy_index: int     # argmax inside the worst head, or None
    lam: float = None


def multi_head_risk(head_attentions, noisy) -> RiskReport:
    heads = [_flat(a) for a in head_attentions]
    if not heads:
        raise ValueError("need at least one head")
    per = [optimization_risk(a, noisy) for a in heads]
    idx = np.asarray(list(noisy), dtype=int)
    worst = None
    if idx.size:
        j = int(np.argmax(per))
        worst = int(idx[np.argmax(heads[j][idx])])
    return RiskReport(per_head=per, combined=sum(per) / len(per),
                      bound=float(np.max(per)), worst_noisy_index=worst)


# ---------------------------------------------------------------------------
# refinement decomposition
# ---------------------------------------------------------------------------

@dataclass
class ModulationResult:
    lam: float
    weighted_exp_delta: float   # sum_k a_k exp(Delta_k)
    jensen_bound: float         # exp(sum_k a_k Delta_k), never above the line above
    delta: np.ndarray


def modulation_factor(logits, U, alpha: float, noisy_index: int) -> ModulationResult:
    """Multiplicative change refinement applies to one instance's
    post-softmax attention. The ratio is computed with the max of Delta
    subtracted from every exponent, which cancels exactly."""
    a = _flat(logits)
    s = a.size
    if not 0 <= noisy_index < s:
        raise IndexError(f"noisy_index {noisy_index} out of range for bag of {s}")
    U = _check_stochastic(U, s)
    delta = alpha * (U @ a)
    ahat = _softmax(a)
    m = delta.max()
    if delta.min() == m:
        # constant modulation (alpha 0 included): the ratio is exactly 1
        return ModulationResult(lam=1.0, weighted_exp_delta=float(np.exp(m)),
                                jensen_bound=float(np.exp(m)), delta=delta)
    shifted = np.exp(delta - m)
    denom = float((ahat * shifted).sum())
    lam = float(shifted[noisy_index] / denom)
    # the unshifted report values may overflow to inf for extreme inputs;
    # the ratio above never does
    with np.errstate(over="ignore"):
        weighted = float(np.exp(m + math.log(denom)))
        jensen = float(np.exp(float(ahat @ delta)))
    return ModulationResult(lam=lam, weighted_exp_delta=weighted,
                            jensen_bound=jensen, delta=delta)


def decompose_refined_attention(logits, U, alpha: float, noisy_index: int):
    """Returns (original attention, modulation factor, product) and checks
    the exact factorization of the refined softmax against a direct
    evaluation of softmax(A + alpha U A)."""
    a = _flat(logits)
    res = modulation_factor(a, U, alpha, noisy_index)
    orig = float(_softmax(a)[noisy_index])
    product = orig * res.lam
    direct = float(_softmax(a + res.delta)[noisy_index])
    if abs(direct - product) > 1e-9:
        raise ValidationError(
            f"refinement decomposition violated: {direct} vs {product}")
    return orig, res.lam, product


def sample_discriminative_dominant(rng, s: int = 8, n_disc: int = 4,
                                   alpha: float = 1.0):
    """One draw from the family where refinement provably suppresses the
    worst noisy instance: similarity mass >= 0.9 inside each role class,
    <= 0.1 across, and the top logits sit on the discriminative side.

    Returns (logits, U, noisy_indices, worst_noisy_index, alpha).
    """
    if not 1 <= n_disc < s:
        raise ValueError("need at least one discriminative and one noisy instance")
    disc = np.arange(n_disc)
    noisy = np.arange(n_disc, s)
    U = np.zeros((s, s))
    for i in range(s):
        own, other = (disc, noisy) if i < n_disc else (noisy, disc)
        intra = rng.uniform(0.9, 1.0)
        U[i, own] = intra / own.size
        U[i, other] = (1.0 - intra) / other.size
    logits = np.empty(s)
    logits[disc] = rng.uniform(2.0, 3.0, size=n_disc)
    logits[noisy] = rng.uniform(-1.0, 0.0, size=s - n_disc)
    worst = int(noisy[np.argmax(logits[noisy])])
    return logits, U, noisy, worst, alpha


# ---------------------------------------------------------------------------
# prediction metrics and bootstrap
# ---------------------------------------------------------------------------

def _midranks(x):
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size)
    i = 0
    sx = x[order]
    while i < x.size:
        j = i
        while j + 1 < x.size and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _auc_binary(pos_mask, scores):
    n_pos = int(pos_mask.sum())
    n_neg = pos_mask.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = _midranks(scores)
    return float((ranks[pos_mask].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metric(labels, scores, kind: str) -> float:
    """kind "acc": argmax match rate (ties to the lowest class index).
    kind "auc": rank-based AUC, macro one-vs-rest over the classes present."""
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise ValueError(f"scores must be (n, C), got {scores.shape}")
    if kind == "acc":
        return float(np.mean(np.argmax(scores, axis=1) == labels))
    if kind == "auc":
        present = np.unique(labels)
        if present.size < 2:
            raise ValueError("AUC undefined for single-class labels")
        aucs = [_auc_binary(labels == c, scores[:, c]) for c in present]
        return float(np.mean(aucs))
    raise ValueError(f"unknown metric {kind!r}")


@dataclass
class BootstrapResult:
    mean: float
    lo: float
    hi: float
    skipped: int = 0


def bootstrap_ci(labels, scores, metric: str, n_resamples: int = 1000,
                 level: float = 0.95, rng=None) -> BootstrapResult:
    """Percentile bootstrap over slide indices. Single-class AUC resamples
    are skipped and redrawn (counted in ``skipped``)."""
    labels = np.asarray(labels, dtype=int)
    scores = np.asarray(scores, dtype=np.float64)
    if rng is None:
        rng = np.random.default_rng(0)
    if n_resamples < 1:
        raise ValueError("n_resamples must be >= 1")
    if metric == "auc" and np.unique(labels).size < 2:
        raise ValueError("AUC undefined for single-class labels")
    n = labels.size
    values = []
    skipped = 0
    while len(values) < n_resamples:
        idx = rng.integers(0, n, size=n)
        if metric == "auc" and np.unique(labels[idx]).size < 2:
            skipped += 1
            if skipped > 100 * n_resamples + 1000:
                raise ValidationError("bootstrap: resamples keep degenerating")
            continue
        values.append(compute_metric(labels[idx], scores[idx], metric))
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [tail, 100.0 - tail])
    return BootstrapResult(mean=float(np.mean(values)), lo=float(lo),
                           hi=float(hi), skipped=skipped)


# ---------------------------------------------------------------------------
# histograms and feature export
# ---------------------------------------------------------------------------

def attention_histogram(attention, n_bins: int):
    """Linear bins over [0, max(attention)]; counts sum to the bag size."""
    a = _flat(attention)
    if n_bins < 1:
        raise ValueError(f"n_bins must be >= 1, got {n_bins}")
    edges = np.linspace(0.0, float(a.max()), n_bins + 1)
    counts, _ = np.histogram(a, bins=edges)
    return edges, counts


def export_features(pipeline, slides, path) -> None:
    """One row per instance: slide id, instance id, role, encoder features.

    Floats are written with repr (shortest round-trip), so re-exporting the
    same checkpoint is byte-identical.
    """
    from .tensor import Tensor
    from .trainer import encoder_forward

    with open(path, "w") as fh:
        dim = pipeline.encoder.w2.shape[1]
        header = ["slide", "instance", "role"] + [f"f{j}" for j in range(dim)]
        fh.write("\t".join(header) + "\n")
        for slide in slides:
            feats = encoder_forward(Tensor(slide.instances), pipeline).data
            for i in range(slide.n_instances):
                role = "discriminative" if slide.roles[i] else "noisy"
                cells = [str(slide.slide_id), str(i), role]
                cells += [repr(float(v)) for v in feats[i]]
                fh.write("\t".join(cells) + "\n")
