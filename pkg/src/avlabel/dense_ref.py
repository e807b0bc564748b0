"""Dense reference implementation of the VB classifier-combination model.

Used as a numerical oracle: full L x L confusion matrices per annotator,
full-length log-responsibility rows, straightforward per-report loops, and
no shared machinery with the sparse path. Each E-step computes the row over
all L families and then restricts it to the report's candidate set, so the
model assumptions match the production implementation while the storage and
code path stay independent. Refuses to run above a small family bound.
"""

from __future__ import annotations

import numpy as np
from scipy.special import psi

from .errors import ConfigError
from .ibcc import InferenceInstance, SparsePosterior

DEFAULT_FAMILY_BOUND = 64


def dense_oracle(
    instance: InferenceInstance,
    tol: float = 1e-4,
    max_iter: int = 100,
    diag_boost: float = 1.5,
    base_mass: float = 0.5,
    class_prior_mass: float = 1.0,
    family_bound: int = DEFAULT_FAMILY_BOUND,
) -> SparsePosterior:
    """Reference posterior for small instances, on the same iteration schedule."""
    n_fam = instance.n_families
    n_ann = instance.n_annotators
    if n_fam > family_bound:
        raise ConfigError(
            f"dense oracle refused: {n_fam} families exceeds bound {family_bound}"
        )
    if base_mass <= 0 or class_prior_mass <= 0:
        raise ConfigError("base_mass and class_prior_mass must be positive")
    if diag_boost < 0:
        raise ConfigError("diag_boost must be non-negative")

    reports = []
    for i in range(instance.n_reports):
        votes = list(
            zip(
                instance.vote_annotators[
                    instance.vote_offsets[i] : instance.vote_offsets[i + 1]
                ].tolist(),
                instance.vote_families[
                    instance.vote_offsets[i] : instance.vote_offsets[i + 1]
                ].tolist(),
            )
        )
        cand = instance.cand_families[
            instance.cand_offsets[i] : instance.cand_offsets[i + 1]
        ].tolist()
        reports.append((votes, cand))

    alpha0 = np.full((n_fam, n_fam, n_ann), float(base_mass))
    for j in range(n_fam):
        alpha0[j, j, :] += diag_boost
    nu0 = np.full(n_fam, float(class_prior_mass))

    def e_step(alpha, nu):
        elog_kappa = psi(nu) - psi(nu.sum())
        elog_pi = psi(alpha) - psi(alpha.sum(axis=1, keepdims=True))
        rows = []
        for votes, cand in reports:
            log_rho = elog_kappa.copy()
            for annotator, family in votes:
                log_rho = log_rho + elog_pi[:, family, annotator]
            restricted = log_rho[cand]
            restricted = restricted - restricted.max()
            weights = np.exp(restricted)
            rows.append(weights / weights.sum())
        return rows

    def m_step(rows):
        nu = nu0.copy()
        alpha = alpha0.copy()
        for (votes, cand), q in zip(reports, rows):
            for j, q_ij in zip(cand, q):
                nu[j] += q_ij
                for annotator, family in votes:
                    alpha[j, family, annotator] += q_ij
        return alpha, nu

    def flatten(rows):
        return np.concatenate(rows) if rows else np.zeros(0)

    rows = e_step(alpha0, nu0)
    iterations = 0
    while iterations < max_iter:
        alpha, nu = m_step(rows)
        new_rows = e_step(alpha, nu)
        iterations += 1
        delta = (
            float(np.max(np.abs(flatten(new_rows) - flatten(rows))))
            if flatten(rows).size
            else 0.0
        )
        rows = new_rows
        if delta < tol:
            break

    return SparsePosterior(
        offsets=instance.cand_offsets.copy(),
        families=instance.cand_families.copy(),
        probs=flatten(rows),
    )
