"""Brute-force oracle for cached path estimators in a 1D homogeneous medium.

The medium is reduced to its event structure. A camera path collides with
probability ``q0``. After every scattering event the next flight collides again
with probability ``q`` and otherwise escapes to a constant background ``b``.
Every vertex applies the albedo ``sigma`` and collects a deterministic
next-event term ``e``. A path is cut after ``max_depth`` collisions.

Everything is discrete, so the full event tree is enumerated exactly. This
includes every lottery outcome of the termination policy. The tree gives the
exact expectation of the estimator and its second moment. Because the medium
is homogeneous, the exact length-``n`` contribution ``C_n`` is available in
closed form. The estimator logic mirrors ``pathtracer.trace_path`` step by step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .policy import STORE_BOOSTED, STORE_RAW, PolicyConfig

RMSE_EPS = 1e-2


@dataclass(frozen=True)
class ToyMedium:
    sigma: float = 0.8
    q: float = 0.6
    q0: float = 0.9
    e: float = 1.0
    b: float = 0.2
    max_depth: int = 4

    def __post_init__(self):
        if not (0.0 <= self.sigma <= 1.0 and 0.0 <= self.q <= 1.0 and 0.0 <= self.q0 <= 1.0):
            raise ValueError("sigma, q, q0 must lie in [0, 1]")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")

    def reach_probability(self, n: int) -> float:
        """Probability that a path performs at least ``n`` collisions."""
        if n <= 0:
            return 1.0
        return self.q0 * self.q ** (n - 1)

    def length_term(self, n: int) -> float:
        """Expected radiance of a length-``n`` path given the path reached vertex ``n``, attenuated by sigma^n."""
        return self.sigma**n * (self.e + (1.0 - self.q) * self.b)

    def exact(self) -> float:
        """Expected pixel radiance (no cache involved)."""
        total = (1.0 - self.q0) * self.b
        for n in range(1, self.max_depth + 1):
            total += self.reach_probability(n) * self.length_term(n)
        return total


def exact_levels(toy: ToyMedium, n_levels: int, policy: PolicyConfig | None = None, convention: str = STORE_RAW) -> np.ndarray:
    """Converged cache value per level under a storage convention.

    ``store_raw`` levels hold the plain length terms. ``store_boosted`` levels
    hold the expectation of the boosted weight times the length term, taken
    over paths that survived every earlier lottery. That is the fixed point
    the trainer would reach from boosted records. The deepest level stores the
    exact length ``n_levels`` term, matching the renderer's record assignment.
    """
    out = np.zeros(n_levels)
    for lvl in range(n_levels):
        n = lvl + 1
        if convention == STORE_RAW or policy is None:
            out[lvl] = toy.length_term(n)
        else:
            out[lvl] = _mean_boosted_weight(toy, policy, n) * toy.length_term(n)
    return out


def _mean_boosted_weight(toy: ToyMedium, policy: PolicyConfig, n: int) -> float:
    """E[W_n / sigma^n | path reached vertex n] under the lottery dynamics."""
    # Paths reaching n survived all earlier lotteries; enumerate survival branches.
    branches = [(1.0, 1.0)]  # (probability, boosted weight)
    for k in range(1, n):
        nxt = []
        for p, w in branches:
            w = w * toy.sigma
            tr = min(max(policy.C * w, 0.0), 1.0)
            if tr < policy.activation_threshold:
                if tr > 0.0:
                    nxt.append((p * tr, w / (tr + policy.epsilon)))
            else:
                nxt.append((p, w))
        branches = nxt
    total = sum(p for p, _ in branches)
    if total <= 0.0:
        return 1.0
    return sum(p * w * toy.sigma for p, w in branches) / total / toy.sigma**n


def estimator_moments(toy: ToyMedium, levels=None, policy: PolicyConfig | None = None):
    """Exact ``(mean, second moment)`` of one cached (or plain) path sample.

    ``levels`` holds one cached scalar per level; reads beyond the last level
    clamp to it.
    """
    mean = 0.0
    second = 0.0
    # primary ray escapes
    p_esc = 1.0 - toy.q0
    mean += p_esc * toy.b
    second += p_esc * toy.b**2
    # state: (probability, radiance so far, raw P, boosted W, beta)
    stack = [(toy.q0, 0.0, 1.0, 1.0, 1.0, 1)]
    use = policy is not None and levels is not None
    while stack:
        prob, L, P, W, beta, n = stack.pop()
        if n > toy.max_depth:
            # exhausted: zero tail
            mean += prob * L
            second += prob * L * L
            continue
        P *= toy.sigma
        W *= toy.sigma
        v = W
        beta_prev = beta
        if use:
            tr = min(max(policy.C * W, 0.0), 1.0)
            if tr < policy.activation_threshold:
                p_hit = 1.0 - tr
                lvl = min(n, len(levels)) - 1
                div = beta_prev if policy.beta_division else 1.0
                val = L + levels[lvl] / div
                mean += prob * p_hit * val
                second += prob * p_hit * val * val
                prob *= tr
                if prob <= 0.0:
                    continue
                W /= tr + policy.epsilon
                beta *= tr
        L += v * toy.e
        # escape after scattering
        p_out = prob * (1.0 - toy.q)
        val = L + v * toy.b
        mean += p_out * val
        second += p_out * val * val
        if toy.q > 0.0:
            stack.append((prob * toy.q, L, P, W, beta, n + 1))
    return mean, second


def rmse(estimate: float, reference: float) -> float:
    return (estimate - reference) ** 2 / (reference**2 + RMSE_EPS)


def default_toys() -> list:
    """A small grid of toy media used as pixels of the oracle image."""
    toys = []
    for sigma in (0.5, 0.8, 0.95):
        for q in (0.3, 0.6, 0.9):
            toys.append(ToyMedium(sigma=sigma, q=q))
    return toys


@dataclass
class ToyReport:
    C: float
    convention: str
    beta_division: bool
    reference_mean: float
    estimate_mean: float
    rmse: float
    mse_per_sample: float


def evaluate(toys, C: float, convention: str, beta_division: bool, n_levels: int = 3) -> ToyReport:
    """Mean luminance and rMSE of the expected cached image over ``toys``."""
    policy = PolicyConfig(C=C, beta_convention=convention, beta_division=beta_division, natural_substitution=False)
    refs, ests, errs, mses = [], [], [], []
    for toy in toys:
        levels = exact_levels(toy, n_levels, policy, convention)
        m, s = estimator_moments(toy, levels, policy)
        ref = toy.exact()
        refs.append(ref)
        ests.append(m)
        errs.append(rmse(m, ref))
        mses.append((s - 2 * m * ref + ref * ref) / (ref * ref + RMSE_EPS))
    return ToyReport(C, convention, beta_division, float(np.mean(refs)), float(np.mean(ests)), float(np.mean(errs)), float(np.mean(mses)))


def select_convention(toys=None, C_values=(0.25, 0.5, 0.75), n_levels: int = 3):
    """Pick the storage convention with the lower summed rMSE (beta division on).

    Returns ``(convention, reports)``.
    """
    toys = default_toys() if toys is None else toys
    reports = []
    score = {}
    for conv in (STORE_RAW, STORE_BOOSTED):
        total = 0.0
        for C in C_values:
            r = evaluate(toys, C, conv, True, n_levels)
            reports.append(r)
            total += r.rmse
        score[conv] = total
    best = min(score, key=lambda c: (score[c], c != STORE_RAW))
    return best, reports

