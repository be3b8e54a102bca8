"""Numerical verification of the entropy/JS equivalence on discrete joints.

The training-side entropy regulariser is justified by an equivalence between
maximising the class-conditional entropy H(C|Z) and minimising the
Jensen-Shannon divergence between the per-class conditionals P(Z|C=c),
under a uniform class marginal. Here Z stands for the (box, feature)
pair collapsed to a single discrete variable with m cells, so the chain of
identities can be checked exactly on small probability tables, independent
of any neural component. Natural logarithms throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import check_prob_vector

# Conditionals closer than this (L-inf) are numerically indistinguishable from
# equal; between this and EQUAL_ATOL the equivalence checks are inconclusive
# and are not asserted either way.
_GRAY_ZONE = 1e-6
_EQUAL_ATOL = 1e-12


@dataclass(frozen=True)
class DiscreteJoint:
    """Dense joint probability table over (C: K classes, Z: m cells)."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.ndim != 2:
            raise ValueError(f"joint table must be 2-D (K x m), got shape {t.shape}")
        if np.any(t < 0):
            raise ValueError("joint table has negative entries")
        if abs(float(t.sum()) - 1.0) > 1e-12:
            raise ValueError(f"joint table sums to {t.sum()}, expected 1 within 1e-12")
        object.__setattr__(self, "table", t)

    @property
    def n_classes(self) -> int:
        return self.table.shape[0]

    @property
    def n_cells(self) -> int:
        return self.table.shape[1]

    def class_marginal(self) -> np.ndarray:
        return self.table.sum(axis=1)

    def cell_marginal(self) -> np.ndarray:
        return self.table.sum(axis=0)

    def conditionals(self) -> np.ndarray:
        """Rows P(Z | C=c); requires every class to have positive mass."""
        pc = self.class_marginal()
        if np.any(pc <= 0):
            raise ValueError("every class needs positive marginal mass")
        return self.table / pc[:, None]


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats, with 0 * log 0 = 0."""
    p = check_prob_vector(p)
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def kl(p: np.ndarray, q: np.ndarray) -> float:
    """Kullback-Leibler divergence KL(p || q) in nats."""
    p = check_prob_vector(p)
    q = check_prob_vector(q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    mask = p > 0
    if np.any(q[mask] <= 0):
        raise ValueError("KL undefined: q has zero mass where p is positive")
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def info_gain(joint: DiscreteJoint) -> float:
    """Information gain G(L, M) = H(L) - H(L | M) for a joint over (L, M)."""
    t = joint.table
    h_l = entropy(joint.class_marginal())
    p_m = joint.cell_marginal()
    h_l_given_m = 0.0
    for j in range(joint.n_cells):
        if p_m[j] <= 0:
            continue
        h_l_given_m += p_m[j] * entropy(t[:, j] / p_m[j])
    return h_l - h_l_given_m


def js(conditionals: np.ndarray) -> float:
    """JS divergence of K conditionals under a uniform prior.

    JS(P_1, ..., P_K) = (1/K) sum_i KL(P_i || P_bar) with P_bar the uniform
    mixture of the conditionals. Zero iff all conditionals are equal; bounded
    above by log K.
    """
    rows = np.asarray(conditionals, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise ValueError("need at least 2 conditionals in a 2-D array")
    for r in rows:
        check_prob_vector(r)
    mixture = rows.mean(axis=0)
    total = 0.0
    for r in rows:
        mask = r > 0
        total += float(np.sum(r[mask] * np.log(r[mask] / mixture[mask])))
    return total / rows.shape[0]


def conditional_entropy(joint: DiscreteJoint) -> float:
    """H(C | Z) for a joint over (C, Z)."""
    t = joint.table
    p_z = joint.cell_marginal()
    h = 0.0
    for j in range(joint.n_cells):
        if p_z[j] <= 0:
            continue
        h += p_z[j] * entropy(t[:, j] / p_z[j])
    return h


@dataclass(frozen=True)
class CheckResult:
    name: str
    residual: float
    passed: bool
    detail: str


@dataclass(frozen=True)
class TheoremReport:
    checks: tuple[CheckResult, ...]
    passed: bool
    max_residual: float

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            out.append(f"[{status}] {c.name}: residual={c.residual:.3e} ({c.detail})")
        return out


def _transpose(joint: DiscreteJoint) -> DiscreteJoint:
    return DiscreteJoint(joint.table.T.copy())


def verify_theorem1(joint: DiscreteJoint, tolerance: float = 1e-10, strict: bool = True) -> TheoremReport:
    """Check the entropy/JS identity chain on one joint over (C, Z).

    Verifies, each within ``tolerance``:
      (a) -H(C|Z) = G(Z;C) - H(C), with G computed as H(Z) - H(Z|C);
      (b) G(Z;C) = (1/K) sum_c KL(P(Z|C=c) || P(Z)) (uniform class marginal);
      (c) the quantity in (b) equals the uniform-prior JS of the conditionals;
      (d) JS = 0 exactly when the conditionals are all equal;
      (e) H(C|Z) attains its maximum log K exactly when JS = 0.

    With ``strict`` (default) a non-uniform class marginal is rejected, which
    is the hypothesis the equivalence rests on. Checks (d)/(e) assert strict
    positivity only when the conditionals differ by more than a small
    numerical gray zone.
    """
    k = joint.n_classes
    pc = joint.class_marginal()
    if strict and np.max(np.abs(pc - 1.0 / k)) > 1e-9:
        raise ValueError("class marginal is not uniform; theorem hypothesis violated")

    h_c = entropy(pc)
    h_c_given_z = conditional_entropy(joint)
    gain_zc = info_gain(_transpose(joint))  # H(Z) - H(Z|C)
    conds = joint.conditionals()
    p_z = joint.cell_marginal()

    kl_sum = sum(kl(conds[c], p_z) for c in range(k)) / k
    js_val = js(conds)

    res_a = abs(-h_c_given_z - (gain_zc - h_c))
    res_b = abs(gain_zc - kl_sum)
    res_c = abs(kl_sum - js_val)

    max_diff = 0.0
    for i in range(k):
        for j in range(i + 1, k):
            max_diff = max(max_diff, float(np.max(np.abs(conds[i] - conds[j]))))
    equal_conds = max_diff <= _EQUAL_ATOL

    if equal_conds:
        d_passed = js_val <= tolerance
        d_detail = f"equal conditionals, js={js_val:.3e}"
        e_res = abs(h_c_given_z - np.log(k))
        e_passed = e_res <= tolerance
        e_detail = f"H(C|Z)={h_c_given_z:.12f} vs log K={np.log(k):.12f}"
    elif max_diff > _GRAY_ZONE:
        d_passed = js_val > 0.0
        d_detail = f"conditionals differ (L-inf {max_diff:.3e}), js={js_val:.3e}"
        e_res = float(np.log(k) - h_c_given_z)
        e_passed = e_res > 0.0
        e_detail = f"H(C|Z)={h_c_given_z:.12f} below log K by {e_res:.3e}"
    else:
        # numerically indistinguishable from equal: nothing to assert
        d_passed = True
        d_detail = f"gray zone (L-inf {max_diff:.3e}), not asserted"
        e_res = 0.0
        e_passed = True
        e_detail = "gray zone, not asserted"

    checks = (
        CheckResult("neg-cond-entropy identity", res_a, res_a <= tolerance,
                    "-H(C|Z) vs G(Z;C) - H(C)"),
        CheckResult("gain-as-mean-KL", res_b, res_b <= tolerance,
                    "H(Z)-H(Z|C) vs (1/K) sum KL(P(Z|c) || P(Z))"),
        CheckResult("mean-KL-as-JS", res_c, res_c <= tolerance,
                    "mean KL vs uniform-prior JS"),
        CheckResult("js-zero-iff-equal", 0.0 if d_passed else js_val, d_passed, d_detail),
        CheckResult("entropy-max-at-js-zero", e_res if equal_conds else 0.0, e_passed, e_detail),
    )
    return TheoremReport(
        checks=checks,
        passed=all(c.passed for c in checks),
        max_residual=max(res_a, res_b, res_c),
    )


def random_uniform_marginal_joint(n_classes: int, n_cells: int, rng: np.random.Generator) -> DiscreteJoint:
    """Random joint whose class marginal is exactly uniform."""
    conds = rng.random((n_classes, n_cells)) + 1e-3
    conds /= conds.sum(axis=1, keepdims=True)
    return DiscreteJoint(conds / n_classes)


def equal_conditional_joint(n_classes: int, n_cells: int, rng: np.random.Generator) -> DiscreteJoint:
    """Joint with identical P(Z|C=c) rows and uniform class marginal."""
    row = rng.random(n_cells) + 1e-3
    row /= row.sum()
    return DiscreteJoint(np.tile(row / n_classes, (n_classes, 1)))
