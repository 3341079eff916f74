"""Prompt synthesis, similarity filtering, and bank assembly.

A deterministic template grammar expands damage-category phrases into
per-domain prompts. Candidate prompts then pass a greedy two-constraint
filter: token-level ROUGE-L against every previously retained prompt must
stay below tau, and the cosine between hashed-trigram embeddings must stay
below delta. Banks serialise to JSON lines.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from hers.linalg import SeededRng, fnv1a64

CATEGORIES = ("dent", "scrape", "torn_bumper", "cracked_paint", "broken_light")
DOMAINS = ("typical_parts", "scene_narratives", "implausible")

EMBED_DIM = 64

_PUNCT_TABLE = str.maketrans("", "", string.punctuation + "’‘“”")
_SLOT_RE = re.compile(r"\{(\w+)\}")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation characters, split on whitespace."""
    return text.lower().translate(_PUNCT_TABLE).split()


def lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    """Length of the longest common subsequence of two token lists."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        append = cur.append
        for j, y in enumerate(b, 1):
            if x == y:
                append(prev[j - 1] + 1)
            else:
                left = cur[j - 1]
                up = prev[j]
                append(left if left >= up else up)
        prev = cur
    return prev[-1]


def rouge_l(a: Sequence[str], b: Sequence[str]) -> float:
    """LCS-based F-measure (beta = 1); 0.0 when either list is empty."""
    if not a or not b:
        return 0.0
    lcs = lcs_len(a, b)
    if lcs == 0:
        return 0.0
    precision = lcs / len(a)
    recall = lcs / len(b)
    return 2.0 * precision * recall / (precision + recall)


def embed_prompt(tokens: Sequence[str]) -> np.ndarray:
    """Hashed character-trigram bag of the normalized text, L2-normalized.

    Trigrams of the space-joined tokens are bucketed by FNV-1a 64 modulo
    64 with +1 counts. Text shorter than three characters hashes as a
    single gram; an empty token list yields the zero vector.
    """
    text = " ".join(tokens)
    counts = np.zeros(EMBED_DIM)
    if not text:
        return counts
    if len(text) < 3:
        counts[fnv1a64(text.encode("utf-8")) % EMBED_DIM] += 1.0
    else:
        for i in range(len(text) - 2):
            counts[fnv1a64(text[i : i + 3].encode("utf-8")) % EMBED_DIM] += 1.0
    return counts / np.linalg.norm(counts)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(u @ v) / (nu * nv)


@dataclass
class PromptRecord:
    id: str
    text: str
    category: str
    domain: str
    tokens: list[str] = field(default_factory=list)
    embedding: np.ndarray = field(default_factory=lambda: np.zeros(EMBED_DIM))
    retained: bool = True
    reject_reason: str | None = None


def make_record(pid: str, text: str, category: str, domain: str) -> PromptRecord:
    tokens = tokenize(text)
    return PromptRecord(
        id=pid,
        text=text,
        category=category,
        domain=domain,
        tokens=tokens,
        embedding=embed_prompt(tokens),
    )


# ---------------------------------------------------------------------------
# Grammar
# ---------------------------------------------------------------------------

# A template is (text, fixed_category); fixed_category None means the
# damage phrase slot is drawn for a sampled category.
Template = tuple[str, str | None]


@dataclass(frozen=True)
class PromptGrammar:
    templates: Mapping[str, tuple[Template, ...]]
    slots: Mapping[str, tuple[str, ...]]
    damage_phrases: Mapping[str, tuple[str, ...]]
    seed: int = 1

    def render(self, template: str, values: Mapping[str, str]) -> str:
        """Expand one template with explicit slot values."""
        return template.format(**values)


def default_grammar(seed: int = 1) -> PromptGrammar:
    """Grammar whose vocabulary is drawn from the curated prompt corpus."""
    slots = {
        "part": (
            "bumper", "door", "headlight", "taillight", "side mirror", "hood",
            "fender", "windshield", "grille", "trunk lid", "quarter panel", "fog light",
        ),
        "side": (
            "front", "rear", "left", "right", "front-left", "front-right",
            "rear-left", "rear-right", "driver-side", "passenger-side",
        ),
        "color": ("silver", "white", "black", "red", "blue", "gray", "green"),
        "brand": (
            "Toyota Vios", "Honda Civic", "Nissan Almera", "Mazda CX-5", "Ford Fiesta",
            "Isuzu D-Max", "Toyota Camry", "BMW 3 Series", "Mitsubishi Mirage",
            "Honda Jazz", "Suzuki Swift", "Toyota Corolla", "Hyundai Elantra",
            "Kia Picanto", "Toyota Prius",
        ),
        "body": ("sedan", "hatchback", "pickup", "coupe", "wagon", "SUV"),
        "scene": (
            "sits beneath a highway overpass after heavy rain",
            "is parked awkwardly on a gravel shoulder near a construction zone",
            "idles on a flooded city street at night",
            "waits beside orange cones at an accident reporting station",
            "is stuck in gridlocked evening traffic",
            "rests under dense tree cover littered with leaves",
            "is angled against a curb in a tight alley at dusk",
            "stands in a crowded shopping mall parking lot",
        ),
    }
    damage_phrases = {
        "dent": ("dent", "deep dent", "shallow dent", "crease dent"),
        "scrape": ("scrape", "long scrape", "key scratch", "paint scuff"),
        "torn_bumper": ("torn bumper flap", "ripped bumper section", "torn trim strip"),
        "cracked_paint": ("patch of cracked paint", "web of cracked paint", "cracked paint blister"),
        "broken_light": ("broken headlight lens", "shattered light cluster", "cracked lamp housing"),
    }
    templates = {
        "typical_parts": (
            ("A {damage} on the {side} {part} of a {color} {brand} {body}.", None),
            ("A {damage} above the {side} {part} of a {color} {brand}.", None),
            ("Close-up of a {damage} near the {side} {part} on a {color} {brand}.", None),
            ("The {side} {part} of a {color} {brand} shows a {damage}.", None),
        ),
        "scene_narratives": (
            ("A {color} {brand} with a {damage} on the {side} {part} {scene}.", None),
            ("Showing a {damage} along the {side} {part}, a {color} {brand} {scene}.", None),
            ("After a minor crash, a {color} {brand} {scene}, a {damage} visible on the {side} {part}.", None),
        ),
        "implausible": (
            (
                "A floating {part} hovers midair, its paint cracking and peeling despite never touching the ground.",
                "cracked_paint",
            ),
            ("The {side} {part} of a {color} {brand} disintegrates into colorful pixels, leaving a {damage} frozen in space.", None),
            ("A translucent {brand} drifts above the road while a {damage} flickers across its {side} {part}.", None),
            ("Suspended in zero gravity, a {part} twists like rubber as a {damage} spreads in reverse.", None),
            ("A {color} {brand} casts two shadows, one showing a {damage} on the {side} {part} that is not there.", None),
        ),
    }
    return PromptGrammar(templates=templates, slots=slots, damage_phrases=damage_phrases, seed=seed)


def generate_prompts(
    grammar: PromptGrammar,
    n_per_domain: int,
    rng: SeededRng | None = None,
    domains: Sequence[str] | None = None,
) -> list[PromptRecord]:
    """Expand ``n_per_domain`` prompts for each domain, unfiltered.

    Draw order per prompt is pinned: template index, then category (when
    the template does not fix one), then each slot in order of first
    appearance. Duplicates are possible; filtering handles them.
    """
    if n_per_domain < 1:
        raise ValueError("n_per_domain must be >= 1")
    if rng is None:
        rng = SeededRng(grammar.seed)
    if domains is None:
        domains = tuple(grammar.templates)
    categories = tuple(grammar.damage_phrases)

    records = []
    counter = 0
    for domain in domains:
        if domain not in grammar.templates:
            raise ValueError(f"grammar has no templates for domain {domain!r}")
        family = grammar.templates[domain]
        for _ in range(n_per_domain):
            template, fixed_category = family[rng.randbelow(len(family))]
            category = fixed_category if fixed_category is not None else categories[rng.randbelow(len(categories))]
            values: dict[str, str] = {}
            for slot in _SLOT_RE.findall(template):
                if slot in values:
                    continue
                vocab = grammar.damage_phrases[category] if slot == "damage" else grammar.slots.get(slot, ())
                if not vocab:
                    raise ValueError(f"empty vocabulary for slot {slot!r}")
                values[slot] = vocab[rng.randbelow(len(vocab))]
            records.append(make_record(f"p{counter:04d}", grammar.render(template, values), category, domain))
            counter += 1
    return records


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


def filter_bank(records: Sequence[PromptRecord], tau: float, delta: float) -> list[PromptRecord]:
    """Greedy single-pass similarity/diversity filter in input order.

    A record is retained iff, against every previously retained record,
    ROUGE-L < tau and embedding cosine < delta. The first record is always
    retained; rejections note the violated constraint and the offending
    id. Flags are rewritten in place and the records returned.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must be in (0, 1], got {delta}")

    kept: list[PromptRecord] = []
    kept_embeddings: list[np.ndarray] = []
    for rec in records:
        rec.retained = True
        rec.reject_reason = None
        if not rec.tokens:
            rec.retained = False
            rec.reject_reason = "empty token list"
            continue

        cosines = np.stack(kept_embeddings) @ rec.embedding if kept_embeddings else np.empty(0)
        for j, other in enumerate(kept):
            len_a, len_b = len(rec.tokens), len(other.tokens)
            # ROUGE-L is at most 2*min/(la+lb); skip the LCS when that bound clears tau.
            if 2.0 * min(len_a, len_b) / (len_a + len_b) >= tau:
                score = rouge_l(rec.tokens, other.tokens)
                if score >= tau:
                    rec.retained = False
                    rec.reject_reason = f"rouge_l {score:.4f} >= tau {tau} against {other.id}"
                    break
            sim = float(cosines[j])
            if sim >= delta:
                rec.retained = False
                rec.reject_reason = f"cosine {sim:.4f} >= delta {delta} against {other.id}"
                break
        if rec.retained:
            kept.append(rec)
            kept_embeddings.append(rec.embedding)
    return list(records)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_BANK_FIELDS = ("id", "text", "category", "domain", "retained", "reject_reason")


def bank_to_lines(records: Iterable[PromptRecord]) -> list[str]:
    lines = []
    for rec in records:
        payload = {
            "id": rec.id,
            "text": rec.text,
            "category": rec.category,
            "domain": rec.domain,
            "retained": rec.retained,
            "reject_reason": rec.reject_reason,
        }
        lines.append(json.dumps(payload, sort_keys=True, ensure_ascii=False))
    return lines


def write_bank(records: Iterable[PromptRecord], path: str | Path) -> None:
    Path(path).write_text("\n".join(bank_to_lines(records)) + "\n", encoding="utf-8")


def read_bank(path: str | Path) -> list[PromptRecord]:
    """Load a JSON-lines bank; tokens and embeddings are recomputed."""
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        payload = json.loads(line)
        missing = [f for f in _BANK_FIELDS if f not in payload]
        if missing:
            raise ValueError(f"bank line missing fields {missing}: {line[:80]}")
        rec = make_record(payload["id"], payload["text"], payload["category"], payload["domain"])
        rec.retained = payload["retained"]
        rec.reject_reason = payload["reject_reason"]
        records.append(rec)
    return records


def load_reference_prompts() -> list[PromptRecord]:
    """The 45 curated prompts bundled with the package (15 per domain)."""
    data = resources.files("hers").joinpath("data/reference_prompts.jsonl").read_text(encoding="utf-8")
    records = []
    for line in data.splitlines():
        if not line.strip():
            continue
        payload = json.loads(line)
        rec = make_record(payload["id"], payload["text"], payload["category"], payload["domain"])
        rec.retained = payload["retained"]
        rec.reject_reason = payload["reject_reason"]
        records.append(rec)
    return records
