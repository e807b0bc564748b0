"""Token co-occurrence statistics and alias resolution.

Three alias classes are resolved: trivial (spelling variants), sibling
(family tokens that co-occur both ways at a high rate), and parent-child
(a rarer token that co-occurs with a similarly spelled common token). All
accepted pairs land in a union-find whose groups pick a canonical name.
"""

from __future__ import annotations

import logging
import pickle
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Tuple

from .errors import ConfigError, UndefinedTokenError
from .parsing import CONTENT_CATEGORIES

logger = logging.getLogger(__name__)

# Substrings commonly appended to (or prefixed onto) family names.
DEFAULT_ALIAS_SUBSTRINGS = ("bot", "net", "ware", "ransom", "crypt", "worm")


@dataclass(frozen=True)
class AliasParams:
    """Thresholds controlling sibling and parent-child aliasing."""

    min_coocur: float = 0.95    # S: both-way co-occurrence rate for siblings
    min_support: int = 1000     # T: report count floor for siblings
    min_escore: float = 0.6     # E: edit-similarity floor for parent-child
    min_combined: float = 0.5   # C: coocur * escore floor for parent-child

    def validate(self) -> None:
        if not 0 < self.min_coocur <= 1:
            raise ConfigError(f"sibling co-occurrence threshold out of range: {self.min_coocur}")
        if self.min_support < 1:
            raise ConfigError(f"sibling support threshold must be >= 1: {self.min_support}")
        if not 0 < self.min_escore <= 1:
            raise ConfigError(f"edit-similarity threshold out of range: {self.min_escore}")
        if not 0 < self.min_combined <= 1:
            raise ConfigError(f"combined threshold out of range: {self.min_combined}")


class CooccurrenceIndex:
    """Per-report token and token-pair counts, stored sparsely.

    A token (or pair) is counted at most once per report. Pair keys are
    lexicographically ordered tuples.
    """

    def __init__(self):
        self.singles = Counter()
        self.pairs = Counter()

    def observe_report(self, tokens, pair_tokens=None) -> None:
        """Count one report. Pairs may be restricted to `pair_tokens`
        (e.g. alias-eligible tokens) to keep the index small; singles always
        cover every token."""
        toks = sorted(set(tokens))
        for t in toks:
            self.singles[t] += 1
        paired = toks if pair_tokens is None else sorted(set(pair_tokens))
        for i, a in enumerate(paired):
            for b in paired[i + 1 :]:
                self.pairs[(a, b)] += 1

    def single_count(self, token) -> int:
        return self.singles.get(token, 0)

    def pair_count(self, a, b) -> int:
        if a == b:
            return self.singles.get(a, 0)
        key = (a, b) if a <= b else (b, a)
        return self.pairs.get(key, 0)

    def merge(self, other: "CooccurrenceIndex") -> None:
        self.singles.update(other.singles)
        self.pairs.update(other.pairs)

    def spill(self, path) -> None:
        """Write this shard to disk and reset to empty."""
        with open(path, "wb") as fd:
            pickle.dump((self.singles, self.pairs), fd)
        self.singles = Counter()
        self.pairs = Counter()

    def absorb_spill(self, path) -> None:
        with open(path, "rb") as fd:
            singles, pairs = pickle.load(fd)
        self.singles.update(singles)
        self.pairs.update(pairs)

    def __len__(self) -> int:
        return len(self.pairs)


def build_cooccurrence(report_token_sets, scope=None) -> CooccurrenceIndex:
    """Index a stream of per-report token collections.

    `scope` optionally filters which tokens are indexed at all.
    """
    index = CooccurrenceIndex()
    for tokens in report_token_sets:
        if scope is not None:
            tokens = [t for t in tokens if scope(t)]
        index.observe_report(tokens)
    return index


def coocur(t_i, t_j, index: CooccurrenceIndex) -> float:
    """Fraction of t_i's reports that also contain t_j. Asymmetric."""
    n = index.single_count(t_i)
    if n == 0:
        raise UndefinedTokenError(f"token {t_i!r} has no report count")
    return index.pair_count(t_i, t_j) / n


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance (insert, delete, substitute)."""
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cost = 0 if ca == cb else 1
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + cost))
        prev = cur
    return prev[-1]


def escore(t_i: str, t_j: str) -> float:
    """Edit-distance similarity, 1 - edist/min(len), clamped at zero."""
    d = levenshtein(t_i.lower(), t_j.lower())
    return max(0.0, 1.0 - d / min(len(t_i), len(t_j)))


def _eligible_by_category(tokens, taxonomy, categories):
    by_cat = {}
    for token in tokens:
        cat = taxonomy.get(token)
        if cat in categories:
            by_cat.setdefault(cat, set()).add(token)
    return by_cat


def find_trivial_aliases(
    tokens,
    taxonomy,
    substrings=DEFAULT_ALIAS_SUBSTRINGS,
    categories=CONTENT_CATEGORIES,
) -> List[Tuple[str, str]]:
    """Spelling-variant aliases within one lexical category.

    A pair is emitted when one token is the other plus a single trailing
    character, or when stripping one listed substring from either end of one
    token yields the other.
    """
    pairs = set()
    for _cat, tokset in _eligible_by_category(tokens, taxonomy, categories).items():
        for b in tokset:
            stem = b[:-1]
            if len(b) >= 2 and stem in tokset:
                pairs.add((min(stem, b), max(stem, b)))
            for sub in substrings:
                if len(b) <= len(sub):
                    continue
                if b.endswith(sub):
                    a = b[: -len(sub)]
                    if a in tokset:
                        pairs.add((min(a, b), max(a, b)))
                if b.startswith(sub):
                    a = b[len(sub) :]
                    if a in tokset:
                        pairs.add((min(a, b), max(a, b)))
    return sorted(pairs)


def find_sibling_aliases(
    fam_tokens,
    index: CooccurrenceIndex,
    min_coocur: float = 0.95,
    min_support: int = 1000,
) -> List[Tuple[str, str]]:
    """Family pairs that co-occur both ways above the thresholds.

    Both directions must exceed min_coocur and both report counts must
    exceed min_support; one-way relationships are rejected.
    """
    fams = set(fam_tokens)
    pairs = []
    for (a, b), joint in index.pairs.items():
        if a not in fams or b not in fams:
            continue
        na, nb = index.singles[a], index.singles[b]
        if min(na, nb) <= min_support:
            continue
        if min(joint / na, joint / nb) > min_coocur:
            pairs.append((a, b))
    return sorted(pairs)


def find_parent_child(
    index: CooccurrenceIndex,
    taxonomy,
    min_escore: float = 0.6,
    min_combined: float = 0.5,
    categories=CONTENT_CATEGORIES,
    tokens=None,
) -> List[Tuple[str, str]]:
    """(child, parent) alias candidates: one-way co-occurrence plus spelling.

    The child is the less frequent token (ties: lexicographically smaller).
    Requires escore >= min_escore and coocur(child, parent) * escore >=
    min_combined. Applies within every eligible category, families included.
    """
    scope = set(tokens) if tokens is not None else None
    pairs = []
    for (a, b), joint in index.pairs.items():
        if scope is not None and (a not in scope or b not in scope):
            continue
        cat_a = taxonomy.get(a)
        if cat_a is None or cat_a not in categories or taxonomy.get(b) is not cat_a:
            continue
        na, nb = index.singles[a], index.singles[b]
        if na < nb or (na == nb and a < b):
            child, parent, n_child = a, b, na
        else:
            child, parent, n_child = b, a, nb
        rate = joint / n_child
        if rate < min_combined:  # escore <= 1, so the product cannot recover
            continue
        s = escore(child, parent)
        if s >= min_escore and rate * s >= min_combined:
            pairs.append((child, parent))
    return sorted(pairs)


class AliasMap:
    """Union-find over tokens with a canonical name per group."""

    def __init__(self):
        self._parent: Dict[str, str] = {}
        self._canonical: Dict[str, str] = {}

    def find(self, token: str) -> str:
        if token not in self._parent:
            return token
        root = token
        while self._parent[root] != root:
            root = self._parent[root]
        while self._parent[token] != root:  # path compression
            self._parent[token], token = root, self._parent[token]
        return root

    def union(self, a: str, b: str) -> None:
        self._parent.setdefault(a, a)
        self._parent.setdefault(b, b)
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # Deterministic: larger root string attaches under smaller.
            if rb < ra:
                ra, rb = rb, ra
            self._parent[rb] = ra

    def groups(self) -> Dict[str, set]:
        out = {}
        for token in self._parent:
            out.setdefault(self.find(token), set()).add(token)
        return out

    def assign_canonicals(self, report_counts) -> None:
        """Pick each group's canonical: highest report count, then lexicographic."""
        self._canonical = {}
        for root, members in self.groups().items():
            best = min(members, key=lambda t: (-report_counts.get(t, 0), t))
            self._canonical[root] = best

    def resolve(self, token: str) -> str:
        """Canonical name for a token; unknown tokens resolve to themselves."""
        root = self.find(token)
        return self._canonical.get(root, root)

    def nonself_mappings(self) -> List[Tuple[str, str]]:
        out = []
        for token in self._parent:
            canonical = self.resolve(token)
            if canonical != token:
                out.append((token, canonical))
        return sorted(out)

    def write(self, path) -> None:
        """Emit `<token>\\t<canonical>` lines for every non-self mapping."""
        with open(path, "w", encoding="utf-8") as fd:
            for token, canonical in self.nonself_mappings():
                fd.write(f"{token}\t{canonical}\n")


def build_alias_map(
    trivial_pairs,
    sibling_pairs,
    parent_child_pairs,
    taxonomy,
    report_counts,
) -> AliasMap:
    """Merge all accepted alias pairs per category and pick canonicals.

    A pair whose tokens carry different permanent categories is discarded
    and logged rather than merged.
    """
    alias_map = AliasMap()
    for source, pairs in (
        ("trivial", trivial_pairs),
        ("sibling", sibling_pairs),
        ("parent-child", parent_child_pairs),
    ):
        for a, b in pairs:
            if taxonomy.get(a) is not taxonomy.get(b):
                logger.warning(
                    "discarding %s alias pair %r/%r: category mismatch", source, a, b
                )
                continue
            alias_map.union(a, b)
    alias_map.assign_canonicals(report_counts)
    return alias_map
