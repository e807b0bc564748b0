"""Tokenization and structure-keyed parsing of AV detection strings.

A detection string is split into tokens (maximal alphanumeric runs) and a
structure string in which every token is replaced by "TOK" while delimiters
are kept verbatim. Parsing rules are keyed by (AV product, structure) and
assign one lexical category per token position, either unconditionally or
through an anchored regular-expression test with a fallback.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Iterator, Optional, Tuple

from .errors import ConfigError, EmptyDetectionError


class LexicalCategory(str, Enum):
    FAM = "FAM"    # malware family
    GRP = "GRP"    # APT group, campaign, or operation
    BEH = "BEH"    # malware category or malicious behavior
    FILE = "FILE"  # OS, file format, or programming language
    VULN = "VULN"  # exploited vulnerability
    PACK = "PACK"  # packer
    HEUR = "HEUR"  # heuristic detection marker
    SUF = "SUF"    # low-information suffix
    PRE = "PRE"    # ambiguous, but not a family or suffix
    UNK = "UNK"    # truly ambiguous


# Categories that carry content downstream (votes, tags, aliasing).
CONTENT_CATEGORIES = frozenset(
    {
        LexicalCategory.FAM,
        LexicalCategory.GRP,
        LexicalCategory.BEH,
        LexicalCategory.FILE,
        LexicalCategory.VULN,
        LexicalCategory.PACK,
    }
)

_TOKEN_RE = re.compile(r"[0-9A-Za-z]+")
# Hex-looking suffixes must contain a digit; pure-alpha strings like "Abc"
# are ambiguous rather than hashes.
_HEX_RE = re.compile(r"^(?=.*[0-9])[0-9a-fA-F]+$")


@dataclass(frozen=True)
class TokenizedDetection:
    """Tokens of one detection plus the delimiter runs between them."""

    tokens: Tuple[str, ...]
    separators: Tuple[str, ...]  # interior delimiter runs only
    structure: str               # leading/trailing delimiters preserved here

    def reassemble(self) -> str:
        """Rebuild the original detection string exactly."""
        it = iter(self.tokens)
        return re.sub("TOK", lambda _m: next(it), self.structure)


def tokenize(detection: str) -> TokenizedDetection:
    """Split a detection on non-alphanumeric characters, preserving case."""
    tokens = _TOKEN_RE.findall(detection)
    if not tokens:
        raise EmptyDetectionError(f"no alphanumeric characters in {detection!r}")
    structure = _TOKEN_RE.sub("TOK", detection)
    parts = _TOKEN_RE.split(detection)  # parts[0]/parts[-1] are leading/trailing
    return TokenizedDetection(
        tokens=tuple(tokens),
        separators=tuple(parts[1:-1]),
        structure=structure,
    )


@dataclass(frozen=True)
class PositionRule:
    """Category logic for one TOK slot.

    Either `fixed` is set, or (`pattern`, `then`, `fallback`) are set and the
    anchored pattern decides between the two categories.
    """

    fixed: Optional[LexicalCategory] = None
    pattern: Optional[re.Pattern] = None
    then: Optional[LexicalCategory] = None
    fallback: Optional[LexicalCategory] = None

    def apply(self, token: str) -> LexicalCategory:
        if self.fixed is not None:
            return self.fixed
        if self.pattern.fullmatch(token):
            return self.then
        return self.fallback


@dataclass(frozen=True)
class ParseRule:
    av_name: str
    structure: str
    position_logic: Tuple[PositionRule, ...]


def _parse_position(entry, context: str) -> PositionRule:
    if isinstance(entry, str):
        try:
            return PositionRule(fixed=LexicalCategory(entry))
        except ValueError:
            raise ConfigError(f"{context}: unknown category {entry!r}") from None
    if isinstance(entry, dict):
        missing = {"pattern", "then", "else"} - entry.keys()
        if missing:
            raise ConfigError(f"{context}: predicate missing keys {sorted(missing)}")
        try:
            return PositionRule(
                pattern=re.compile(entry["pattern"], re.IGNORECASE),
                then=LexicalCategory(entry["then"]),
                fallback=LexicalCategory(entry["else"]),
            )
        except (re.error, ValueError) as exc:
            raise ConfigError(f"{context}: bad predicate: {exc}") from None
    raise ConfigError(f"{context}: position entry must be a category or a predicate")


class Rulebook:
    """Parsing rules keyed by (av_name, structure)."""

    def __init__(self, rules: Iterable[ParseRule]):
        self._rules = {}
        for rule in rules:
            key = (rule.av_name, rule.structure)
            if key in self._rules:
                raise ConfigError(f"duplicate rule for AV {key[0]!r} structure {key[1]!r}")
            n_slots = rule.structure.count("TOK")
            if len(rule.position_logic) != n_slots:
                raise ConfigError(
                    f"rule for {key}: {len(rule.position_logic)} positions "
                    f"but structure has {n_slots} TOK slots"
                )
            self._rules[key] = rule

    def __len__(self) -> int:
        return len(self._rules)

    def select(self, av_name: str, structure: str) -> Optional[ParseRule]:
        """The unique rule for (av_name, structure), or None."""
        return self._rules.get((av_name, structure))

    @classmethod
    def load(cls, path) -> "Rulebook":
        """Load rules from a JSON-lines file with fields av/structure/positions."""
        rules = []
        with open(path, "r", encoding="utf-8") as fd:
            for lineno, line in enumerate(fd, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                context = f"{path}:{lineno}"
                try:
                    rec = json.loads(line)
                except ValueError as exc:
                    raise ConfigError(f"{context}: bad JSON: {exc}") from None
                for key in ("av", "structure", "positions"):
                    if key not in rec:
                        raise ConfigError(f"{context}: missing field {key!r}")
                positions = tuple(
                    _parse_position(entry, context) for entry in rec["positions"]
                )
                rules.append(ParseRule(rec["av"], rec["structure"], positions))
        return cls(rules)


def load_token_list(path) -> frozenset:
    """Plain-text token list, one per line, '#' comments, lowercased."""
    tokens = set()
    with open(path, "r", encoding="utf-8") as fd:
        for line in fd:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            tokens.add(line.lower())
    return frozenset(tokens)


@dataclass(frozen=True)
class ParsedDetection:
    """One detection's tokens with category assignments.

    vuln_spans are half-open [start, end) token ranges merged into a single
    vulnerability identifier; dropped holds indices of placeholder family
    tokens that must not reach any downstream vote, tag, or count.
    """

    av_name: str
    tokens: Tuple[str, ...]
    categories: Tuple[LexicalCategory, ...]
    vuln_spans: Tuple[Tuple[int, int], ...] = ()
    vuln_ids: Tuple[str, ...] = ()
    dropped: frozenset = frozenset()

    def items(self) -> Iterator[Tuple[str, LexicalCategory]]:
        """Yield (token, category) pairs for downstream use.

        Tokens are lowercased, vulnerability spans are merged into their
        normalized identifier, and dropped tokens are omitted.
        """
        span_start = {start: idx for idx, (start, _end) in enumerate(self.vuln_spans)}
        i = 0
        while i < len(self.tokens):
            if i in span_start:
                span_idx = span_start[i]
                yield self.vuln_ids[span_idx], LexicalCategory.VULN
                i = self.vuln_spans[span_idx][1]
                continue
            if i not in self.dropped:
                yield self.tokens[i].lower(), self.categories[i]
            i += 1


# --- vulnerability sequences ------------------------------------------------

_CVE_FULL = re.compile(r"^cve((?:19|20)\d{2})(\d{1,5})$", re.IGNORECASE)
_CVE_WORD = re.compile(r"^cve$", re.IGNORECASE)
_CVE_YEAR = re.compile(r"^(?:19|20)\d{2}$")
_CVE_ID = re.compile(r"^\d{1,5}$")
_CVE_YEAR_ID = re.compile(r"^((?:19|20)\d{2})(\d{1,5})$")
_MS_FULL = re.compile(r"^ms(\d{2})(\d{2,3})$", re.IGNORECASE)
_MS_WORD = re.compile(r"^ms$", re.IGNORECASE)
_MS_YEAR = re.compile(r"^ms(\d{2})$", re.IGNORECASE)
_MS_2DIGITS = re.compile(r"^\d{2}$")
_MS_ID = re.compile(r"^\d{2,3}$")
_MS_YEAR_ID = re.compile(r"^(\d{2})(\d{2,3})$")


def _match_vuln_at(tokens: Tuple[str, ...], i: int):
    """Try to match a vulnerability identifier starting at token i.

    Returns (span_end, normalized_id) or None. Longer matches win.
    """
    n = len(tokens)
    if (
        i + 2 < n
        and _CVE_WORD.match(tokens[i])
        and _CVE_YEAR.match(tokens[i + 1])
        and _CVE_ID.match(tokens[i + 2])
    ):
        return i + 3, f"cve_{tokens[i + 1]}_{tokens[i + 2]}"
    if i + 1 < n and _CVE_WORD.match(tokens[i]):
        m = _CVE_YEAR_ID.match(tokens[i + 1])
        if m:
            return i + 2, f"cve_{m.group(1)}_{m.group(2)}"
    m = _CVE_FULL.match(tokens[i])
    if m:
        return i + 1, f"cve_{m.group(1)}_{m.group(2)}"
    # MS bulletins: MS 08 067 / MS 08067 / MS08 067 / MS08067
    if (
        i + 2 < n
        and _MS_WORD.match(tokens[i])
        and _MS_2DIGITS.match(tokens[i + 1])
        and _MS_ID.match(tokens[i + 2])
    ):
        return i + 3, f"ms{tokens[i + 1]}_{tokens[i + 2]}"
    if i + 1 < n and _MS_WORD.match(tokens[i]):
        m = _MS_YEAR_ID.match(tokens[i + 1])
        if m:
            return i + 2, f"ms{m.group(1)}_{m.group(2)}"
    if i + 1 < n:
        m = _MS_YEAR.match(tokens[i])
        if m and _MS_ID.match(tokens[i + 1]):
            return i + 2, f"ms{m.group(1)}_{tokens[i + 1]}"
    m = _MS_FULL.match(tokens[i])
    if m:
        return i + 1, f"ms{m.group(1)}_{m.group(2)}"
    return None


def detect_vuln_sequence(tokens, categories):
    """Merge CVE/MS-bulletin token runs into single VULN spans.

    Returns (categories, vuln_spans, vuln_ids); categories inside a span are
    re-assigned VULN. No match leaves everything unchanged.
    """
    tokens = tuple(tokens)
    categories = list(categories)
    spans = []
    ids = []
    i = 0
    while i < len(tokens):
        hit = _match_vuln_at(tokens, i)
        if hit is None:
            i += 1
            continue
        end, vuln_id = hit
        spans.append((i, end))
        ids.append(vuln_id.lower())
        for pos in range(i, end):
            categories[pos] = LexicalCategory.VULN
        i = end
    return tuple(categories), tuple(spans), tuple(ids)


def classify_special(token, current_category, group_list, placeholder_list):
    """Apply threat-group and placeholder-family handling to one token.

    Returns the (possibly updated) category, or None as a drop marker when a
    family token is a known placeholder.
    """
    lowered = token.lower()
    if lowered in group_list:
        return LexicalCategory.GRP
    if current_category is LexicalCategory.FAM and lowered in placeholder_list:
        return None
    return current_category


def _suffix_like(token: str) -> bool:
    # Short all-lowercase or all-hex trailing tokens carry no family signal.
    return len(token) <= 5 and (token.islower() or _HEX_RE.match(token) is not None)


class DetectionParser:
    """Parses detections with a rulebook, token lists, and optional taxonomy.

    The rulebook and lists are immutable after construction; parsing is pure,
    so one parser can be shared across workers.
    """

    def __init__(
        self,
        rulebook: Rulebook,
        group_list=frozenset(),
        placeholder_list=frozenset(),
        taxonomy=None,
    ):
        self.rulebook = rulebook
        self.group_list = frozenset(t.lower() for t in group_list)
        self.placeholder_list = frozenset(t.lower() for t in placeholder_list)
        self.taxonomy = taxonomy

    def with_taxonomy(self, taxonomy) -> "DetectionParser":
        """Second-pass parser sharing this parser's rulebook and lists."""
        return DetectionParser(
            self.rulebook, self.group_list, self.placeholder_list, taxonomy
        )

    def parse(self, av_name: str, detection: str) -> ParsedDetection:
        tok = tokenize(detection)
        rule = self.rulebook.select(av_name, tok.structure)
        if rule is not None:
            categories = [
                pos.apply(token) for pos, token in zip(rule.position_logic, tok.tokens)
            ]
        else:
            categories = [LexicalCategory.PRE] * len(tok.tokens)
            if _suffix_like(tok.tokens[-1]):
                categories[-1] = LexicalCategory.SUF

        for i, token in enumerate(tok.tokens):
            if len(token) < 2:
                categories[i] = LexicalCategory.SUF

        if self.taxonomy is not None:
            for i, token in enumerate(tok.tokens):
                permanent = self.taxonomy.get(token.lower())
                if permanent is not None:
                    categories[i] = permanent

        categories, spans, vuln_ids = detect_vuln_sequence(tok.tokens, categories)
        categories = list(categories)

        in_span = set()
        for start, end in spans:
            in_span.update(range(start, end))
        dropped = set()
        for i, token in enumerate(tok.tokens):
            if i in in_span:
                continue
            special = classify_special(
                token, categories[i], self.group_list, self.placeholder_list
            )
            if special is None:
                dropped.add(i)
            else:
                categories[i] = special

        return ParsedDetection(
            av_name=av_name,
            tokens=tok.tokens,
            categories=tuple(categories),
            vuln_spans=spans,
            vuln_ids=vuln_ids,
            dropped=frozenset(dropped),
        )
