"""Sparse Variational-Bayes classifier combination over family votes.

The model treats each AV product as a noisy annotator with a per-family
confusion row. Two sparsity assumptions keep memory tractable at extreme
family counts: confusion rows only span families that co-occur with the row
family in at least one report, and each report's posterior only spans the
families actually voted on that report.

Confusion pseudo-counts are stored as a single matrix of shape
(sum of co-occurrence row lengths) x (annotator count), addressed through
per-family row offsets.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.special import gammaln, psi

from .errors import ConfigError, EmptyInstanceError, InternalConsistencyError


@dataclass
class FamilyCooccurrence:
    """For each family j, the ordered set of families co-occurring with j.

    members concatenates the sorted rows; row j is
    members[offsets[j]:offsets[j+1]]. Every family co-occurs with itself and
    the relation is symmetric by construction.
    """

    members: np.ndarray
    offsets: np.ndarray

    @property
    def n_families(self) -> int:
        return len(self.offsets) - 1

    @property
    def total_entries(self) -> int:
        return int(self.members.size)

    def row(self, j: int) -> np.ndarray:
        return self.members[self.offsets[j] : self.offsets[j + 1]]

    @classmethod
    def from_candidate_sets(cls, n_families: int, candidate_sets) -> "FamilyCooccurrence":
        neighbors = [{j} for j in range(n_families)]
        for cand in candidate_sets:
            cand = list(cand)
            for a in cand:
                neighbors[a].update(cand)
        lengths = np.array([len(s) for s in neighbors], dtype=np.int64)
        offsets = np.zeros(n_families + 1, dtype=np.int64)
        np.cumsum(lengths, out=offsets[1:])
        members = np.empty(int(offsets[-1]), dtype=np.int64)
        for j, s in enumerate(neighbors):
            members[offsets[j] : offsets[j + 1]] = sorted(s)
        return cls(members=members, offsets=offsets)


@dataclass
class InferenceInstance:
    """Votes and candidate sets in dense-id form, ready for inference."""

    n_reports: int
    n_annotators: int
    n_families: int
    families: Tuple[str, ...]
    annotators: Tuple[str, ...]
    vote_offsets: np.ndarray      # (N+1,) slices into the vote arrays
    vote_annotators: np.ndarray
    vote_families: np.ndarray
    cand_offsets: np.ndarray      # (N+1,) slices into cand_families
    cand_families: np.ndarray     # sorted ascending within each report
    cooccurrence: FamilyCooccurrence
    report_keys: Optional[Tuple] = None
    _plan: Optional["_EStepPlan"] = field(default=None, repr=False, compare=False)

    @property
    def n_posterior_entries(self) -> int:
        return int(self.cand_families.size)

    def candidate_names(self, i: int) -> Tuple[str, ...]:
        row = self.cand_families[self.cand_offsets[i] : self.cand_offsets[i + 1]]
        return tuple(self.families[j] for j in row)


@dataclass
class _EStepPlan:
    """Precomputed index arrays for vectorized E/M steps.

    One triplet exists per (report, candidate family, vote); the arrays map
    each triplet to its confusion-matrix cell and its posterior slot. The
    *_cell arrays are raveled (entry, annotator) indices, precomputed once
    because they are invariant across iterations.
    """

    pair_report: np.ndarray    # posterior slot -> report
    pair_family: np.ndarray    # posterior slot -> candidate family id
    trip_pair: np.ndarray      # triplet -> posterior slot
    trip_row: np.ndarray       # triplet -> candidate family id (confusion row)
    trip_alpha: np.ndarray     # triplet -> flat confusion entry
    trip_annotator: np.ndarray # triplet -> annotator id
    trip_cell: np.ndarray      # triplet -> raveled (entry, annotator) in alpha
    trip_row_cell: np.ndarray  # triplet -> raveled (family, annotator) in row sums


def build_instance(
    family_votes: Sequence[Mapping[str, str]],
    report_keys: Optional[Sequence] = None,
):
    """Assemble an InferenceInstance from per-report vote maps.

    family_votes[i] maps annotator name -> family name. Reports with no
    votes are excluded from the instance and returned as (index, key) pairs.
    """
    keys = list(report_keys) if report_keys is not None else [None] * len(family_votes)
    if report_keys is not None and len(keys) != len(family_votes):
        raise ConfigError("report_keys length does not match family_votes")

    included = []
    excluded = []
    for i, votes in enumerate(family_votes):
        if votes:
            included.append(i)
        else:
            excluded.append((i, keys[i]))
    if not included:
        raise EmptyInstanceError("no report carries any family vote")

    annotator_names = sorted({a for i in included for a in family_votes[i]})
    family_names = sorted({f for i in included for f in family_votes[i].values()})
    annotator_id = {a: k for k, a in enumerate(annotator_names)}
    family_id = {f: j for j, f in enumerate(family_names)}

    vote_offsets = [0]
    vote_annotators: List[int] = []
    vote_families: List[int] = []
    cand_offsets = [0]
    cand_families: List[int] = []
    candidate_sets = []
    for i in included:
        votes = family_votes[i]
        for av in sorted(votes, key=lambda a: annotator_id[a]):
            vote_annotators.append(annotator_id[av])
            vote_families.append(family_id[votes[av]])
        vote_offsets.append(len(vote_annotators))
        cand = sorted({family_id[f] for f in votes.values()})
        cand_families.extend(cand)
        cand_offsets.append(len(cand_families))
        candidate_sets.append(cand)

    cooc = FamilyCooccurrence.from_candidate_sets(len(family_names), candidate_sets)
    instance = InferenceInstance(
        n_reports=len(included),
        n_annotators=len(annotator_names),
        n_families=len(family_names),
        families=tuple(family_names),
        annotators=tuple(annotator_names),
        vote_offsets=np.asarray(vote_offsets, dtype=np.int64),
        vote_annotators=np.asarray(vote_annotators, dtype=np.int64),
        vote_families=np.asarray(vote_families, dtype=np.int64),
        cand_offsets=np.asarray(cand_offsets, dtype=np.int64),
        cand_families=np.asarray(cand_families, dtype=np.int64),
        cooccurrence=cooc,
        report_keys=tuple(keys[i] for i in included) if report_keys is not None else None,
    )
    return instance, excluded


def _flat_confusion_lookup(cooc: FamilyCooccurrence, rows, cols) -> np.ndarray:
    """Flat index of confusion cell (row family, column family), vectorized.

    Raises InternalConsistencyError when a requested column is absent from
    the row's co-occurrence set, which indicates a co-occurrence build bug.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    starts = cooc.offsets[rows]
    ends = cooc.offsets[rows + 1]
    # Binary search inside each row slice of the concatenated members array.
    lo = starts.copy()
    hi = ends.copy()
    while np.any(lo < hi):
        mid = (lo + hi) // 2
        active = lo < hi
        less = active & (cooc.members[np.minimum(mid, cooc.members.size - 1)] < cols)
        lo = np.where(less, mid + 1, lo)
        hi = np.where(active & ~less, mid, hi)
    bad = (lo >= ends) | (cooc.members[np.minimum(lo, cooc.members.size - 1)] != cols)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise InternalConsistencyError(
            f"family {int(cols[idx])} not in co-occurrence row of family {int(rows[idx])}"
        )
    return lo


def _prepare_plan(instance: InferenceInstance) -> _EStepPlan:
    if instance._plan is not None:
        return instance._plan
    cand_counts = np.diff(instance.cand_offsets)
    vote_counts = np.diff(instance.vote_offsets)
    n_pairs = int(instance.cand_offsets[-1])

    pair_report = np.repeat(np.arange(instance.n_reports, dtype=np.int64), cand_counts)
    pair_family = instance.cand_families

    votes_per_pair = np.repeat(vote_counts, cand_counts)
    trip_pair = np.repeat(np.arange(n_pairs, dtype=np.int64), votes_per_pair)
    # Ragged arange: for each pair, the indices of its report's votes.
    trip_total = int(votes_per_pair.sum())
    trip_starts = np.repeat(instance.vote_offsets[:-1], cand_counts)
    offs = np.concatenate(([0], np.cumsum(votes_per_pair)))
    within = np.arange(trip_total, dtype=np.int64) - np.repeat(offs[:-1], votes_per_pair)
    trip_vote = np.repeat(trip_starts, votes_per_pair) + within

    trip_row = pair_family[trip_pair]
    trip_annotator = instance.vote_annotators[trip_vote]
    trip_col = instance.vote_families[trip_vote]
    trip_alpha = _flat_confusion_lookup(instance.cooccurrence, trip_row, trip_col)

    k = instance.n_annotators
    plan = _EStepPlan(
        pair_report=pair_report,
        pair_family=pair_family,
        trip_pair=trip_pair,
        trip_row=trip_row,
        trip_alpha=trip_alpha,
        trip_annotator=trip_annotator,
        trip_cell=trip_alpha * k + trip_annotator,
        trip_row_cell=trip_row * k + trip_annotator,
    )
    instance._plan = plan
    return plan


@dataclass
class SparseConfusion:
    """Dirichlet pseudo-counts over co-occurring family columns.

    Both matrices have shape (total co-occurrence entries, annotators);
    alpha never drops below alpha0 because counts only accumulate.
    """

    alpha0: np.ndarray
    alpha: np.ndarray

    @property
    def n_entries(self) -> int:
        return int(self.alpha.size)


@dataclass
class ClassPrior:
    """Dirichlet pseudo-counts over family proportions."""

    nu0: np.ndarray
    nu: np.ndarray


@dataclass
class SparsePosterior:
    """Per-report family probabilities, supported on candidate sets only."""

    offsets: np.ndarray
    families: np.ndarray
    probs: np.ndarray

    @property
    def n_reports(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_entries(self) -> int:
        return int(self.probs.size)

    def row(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        sl = slice(self.offsets[i], self.offsets[i + 1])
        return self.families[sl], self.probs[sl]

    def argmax_families(self) -> np.ndarray:
        """Most probable family id per report; ties pick the lowest id."""
        starts = self.offsets[:-1]
        seg_max = np.maximum.reduceat(self.probs, starts)
        owner = np.repeat(np.arange(self.n_reports), np.diff(self.offsets))
        entry = np.arange(self.probs.size)
        masked = np.where(self.probs >= seg_max[owner], entry, self.probs.size)
        first_max = np.minimum.reduceat(masked, starts)
        return self.families[first_max]

    def top_probs(self) -> np.ndarray:
        return np.maximum.reduceat(self.probs, self.offsets[:-1])

    def entropies_bits(self) -> np.ndarray:
        logs = np.zeros_like(self.probs)
        np.log2(self.probs, out=logs, where=self.probs > 0)
        return np.add.reduceat(-self.probs * logs, self.offsets[:-1])


def init_priors(
    instance: InferenceInstance,
    diag_boost: float = 1.5,
    base_mass: float = 0.5,
    class_prior_mass: float = 1.0,
) -> Tuple[SparseConfusion, ClassPrior]:
    """Symmetric Dirichlet priors with extra mass on the confusion diagonal."""
    if base_mass <= 0 or class_prior_mass <= 0:
        raise ConfigError("base_mass and class_prior_mass must be positive")
    if diag_boost < 0:
        raise ConfigError("diag_boost must be non-negative")
    cooc = instance.cooccurrence
    alpha0 = np.full((cooc.total_entries, instance.n_annotators), base_mass)
    row_ids = np.repeat(np.arange(cooc.n_families), np.diff(cooc.offsets))
    diag_flat = np.flatnonzero(cooc.members == row_ids)
    if diag_flat.size != cooc.n_families:
        raise InternalConsistencyError("some family is missing from its own co-occurrence row")
    alpha0[diag_flat, :] += diag_boost
    nu0 = np.full(instance.n_families, float(class_prior_mass))
    return (
        SparseConfusion(alpha0=alpha0, alpha=alpha0.copy()),
        ClassPrior(nu0=nu0, nu=nu0.copy()),
    )


def vb_e_step(
    instance: InferenceInstance,
    confusion: SparseConfusion,
    prior: ClassPrior,
) -> SparsePosterior:
    """Posterior over each report's candidate families given current parameters.

    log rho_ij sums the expected log class proportion and, per vote, the
    expected log confusion probability of that vote under row j; the
    candidate-set softmax subtracts the segment max for stability.
    """
    plan = _prepare_plan(instance)
    cooc = instance.cooccurrence

    elog_kappa = psi(prior.nu) - psi(prior.nu.sum())
    digamma_alpha = psi(confusion.alpha)
    row_sums = np.add.reduceat(confusion.alpha, cooc.offsets[:-1], axis=0)
    digamma_row = psi(row_sums)  # (L, K)

    contrib = (
        digamma_alpha.ravel()[plan.trip_cell]
        - digamma_row.ravel()[plan.trip_row_cell]
    )
    n_pairs = plan.pair_family.size
    log_rho = np.bincount(plan.trip_pair, weights=contrib, minlength=n_pairs)
    log_rho += elog_kappa[plan.pair_family]

    starts = instance.cand_offsets[:-1]
    seg_max = np.maximum.reduceat(log_rho, starts)
    z = np.exp(log_rho - seg_max[plan.pair_report])
    denom = np.add.reduceat(z, starts)
    probs = z / denom[plan.pair_report]
    return SparsePosterior(
        offsets=instance.cand_offsets.copy(),
        families=instance.cand_families.copy(),
        probs=probs,
    )


def vb_m_step(
    instance: InferenceInstance,
    posterior: SparsePosterior,
    alpha0: np.ndarray,
    nu0: np.ndarray,
) -> Tuple[SparseConfusion, ClassPrior]:
    """Fold posterior responsibilities back into the Dirichlet pseudo-counts."""
    plan = _prepare_plan(instance)
    nu = nu0 + np.bincount(
        plan.pair_family, weights=posterior.probs, minlength=instance.n_families
    )
    add = np.bincount(
        plan.trip_cell, weights=posterior.probs[plan.trip_pair], minlength=alpha0.size
    ).reshape(alpha0.shape)
    return (
        SparseConfusion(alpha0=alpha0, alpha=alpha0 + add),
        ClassPrior(nu0=nu0, nu=nu),
    )


def variational_lower_bound(
    instance: InferenceInstance,
    confusion: SparseConfusion,
    prior: ClassPrior,
    posterior: SparsePosterior,
) -> float:
    """Evidence lower bound for diagnostics; never decreases across iterations."""
    plan = _prepare_plan(instance)
    cooc = instance.cooccurrence
    starts = cooc.offsets[:-1]

    elog_kappa = psi(prior.nu) - psi(prior.nu.sum())
    row_sums = np.add.reduceat(confusion.alpha, starts, axis=0)
    elog_pi = psi(confusion.alpha) - psi(row_sums)[plan_row_ids(cooc), :]

    q = posterior.probs
    data_term = float(np.sum(q[plan.trip_pair] * elog_pi.ravel()[plan.trip_cell]))
    class_term = float(np.sum(q * elog_kappa[plan.pair_family]))

    def dirichlet_log_norm(masses, row_starts=None):
        if row_starts is None:  # single vector
            return gammaln(masses.sum()) - gammaln(masses).sum()
        totals = np.add.reduceat(masses, row_starts, axis=0)
        return gammaln(totals).sum() - gammaln(masses).sum()

    kappa_term = (
        dirichlet_log_norm(prior.nu0)
        - dirichlet_log_norm(prior.nu)
        + float(np.sum((prior.nu0 - prior.nu) * elog_kappa))
    )
    pi_term = (
        dirichlet_log_norm(confusion.alpha0, starts)
        - dirichlet_log_norm(confusion.alpha, starts)
        + float(np.sum((confusion.alpha0 - confusion.alpha) * elog_pi))
    )
    positive = q[q > 0]
    entropy_term = float(-(positive * np.log(positive)).sum())
    return data_term + class_term + kappa_term + pi_term + entropy_term


def plan_row_ids(cooc: FamilyCooccurrence) -> np.ndarray:
    """Family id owning each flat confusion entry."""
    return np.repeat(np.arange(cooc.n_families), np.diff(cooc.offsets))


@dataclass
class InferenceResult:
    posterior: SparsePosterior
    converged: bool
    iterations: int
    confusion: SparseConfusion
    prior: ClassPrior


def run_inference(
    instance: InferenceInstance,
    tol: float = 1e-4,
    max_iter: int = 100,
    diag_boost: float = 1.5,
    base_mass: float = 0.5,
    class_prior_mass: float = 1.0,
) -> InferenceResult:
    """Alternate E and M steps until the posterior stops moving.

    One iteration is an M-step followed by an E-step; max_iter=0 returns the
    prior-only E-step. Convergence is max |delta q| < tol. Non-convergence
    sets the flag rather than raising.
    """
    confusion, prior = init_priors(
        instance,
        diag_boost=diag_boost,
        base_mass=base_mass,
        class_prior_mass=class_prior_mass,
    )
    posterior = vb_e_step(instance, confusion, prior)
    converged = False
    iterations = 0
    while iterations < max_iter:
        confusion, prior = vb_m_step(instance, posterior, confusion.alpha0, prior.nu0)
        new_posterior = vb_e_step(instance, confusion, prior)
        iterations += 1
        delta = (
            float(np.max(np.abs(new_posterior.probs - posterior.probs)))
            if posterior.probs.size
            else 0.0
        )
        posterior = new_posterior
        if delta < tol:
            converged = True
            break
    return InferenceResult(
        posterior=posterior,
        converged=converged,
        iterations=iterations,
        confusion=confusion,
        prior=prior,
    )


def plurality_vote(
    votes: Mapping[str, str],
    report_counts: Optional[Mapping[str, int]] = None,
) -> Optional[str]:
    """Family with the most votes in one report.

    Votes are assumed cluster-deduplicated, so each vote stands for one
    unrelated cluster. Ties break toward the higher corpus-wide report
    count, then the lexicographically smaller name.
    """
    if not votes:
        return None
    tally = Counter(votes.values())
    counts = report_counts or {}
    return min(tally, key=lambda fam: (-tally[fam], -counts.get(fam, 0), fam))
