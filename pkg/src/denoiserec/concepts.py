"""Text-to-concept extraction: normalization, longest-match, TF-IDF filtering.

Turns per-item documents (captions, comments, reviews) into weighted
item-concept edges consumable by the graph builder.
"""

from __future__ import annotations

import json
import math
import unicodedata
from collections import Counter
from dataclasses import dataclass


@dataclass
class ConceptInventory:
    """Known concept phrases, keyed by their normalized token sequence."""

    phrase_ids: dict  # tuple[str, ...] -> phrase string
    max_len: int

    @classmethod
    def from_phrases(cls, phrases, stopwords=frozenset()):
        ids = {}
        for phrase in phrases:
            toks = tuple(normalize(phrase, stopwords))
            if toks and toks not in ids:
                ids[toks] = " ".join(toks)
        if not ids:
            raise ValueError("concept inventory is empty after normalization")
        return cls(phrase_ids=ids, max_len=max(len(t) for t in ids))

    @classmethod
    def from_file(cls, path, stopwords=frozenset()):
        with open(path, encoding="utf-8") as f:
            return cls.from_phrases((ln.strip() for ln in f if ln.strip()), stopwords)


def _keep_char(ch: str) -> bool:
    cat = unicodedata.category(ch)
    # letters, digits and marks survive; punctuation, symbols (incl. emoji)
    # and separators become token boundaries
    return cat[0] in ("L", "N", "M")


def normalize(text: str, stopwords=frozenset()) -> list:
    """Lowercase, strip punctuation/emoji, split on whitespace, drop stop words."""
    cleaned = "".join(ch if _keep_char(ch) else " " for ch in text.lower())
    return [tok for tok in cleaned.split() if tok not in stopwords]


def load_stopwords(path) -> frozenset:
    with open(path, encoding="utf-8") as f:
        return frozenset(w.strip().lower() for w in f if w.strip())


def extract_concepts(tokens, inv: ConceptInventory) -> Counter:
    """Greedy left-to-right longest match; matched tokens are consumed."""
    counts = Counter()
    i = 0
    n = len(tokens)
    while i < n:
        matched = 0
        for length in range(min(inv.max_len, n - i), 0, -1):
            span = tuple(tokens[i:i + length])
            if span in inv.phrase_ids:
                counts[inv.phrase_ids[span]] += 1
                matched = length
                break
        i += matched if matched else 1
    return counts


def tfidf_filter(doc_extractions, threshold: float):
    """Score extracted (doc, concept) pairs and keep those at or above threshold.

    ``doc_extractions``: mapping doc_id -> Counter of concept term frequencies.
    Score is tf * ln(N / df). Returns a list of (doc_id, concept, score).
    """
    if threshold < 0:
        raise ValueError("tf-idf threshold must be non-negative")
    n_docs = len(doc_extractions)
    if n_docs < 1:
        raise ValueError("empty corpus")
    df = Counter()
    for counts in doc_extractions.values():
        df.update(counts.keys())
    edges = []
    for doc_id, counts in doc_extractions.items():
        for concept, tf in counts.items():
            score = tf * math.log(n_docs / df[concept])
            if score >= threshold:
                edges.append((doc_id, concept, score))
    return edges


def run_pipeline(corpus_path, inventory_path, threshold, stopwords_path=None):
    """corpus (JSON-lines of {"item_id", "text"}) -> item-concept edge rows."""
    stop = load_stopwords(stopwords_path) if stopwords_path else frozenset()
    inv = ConceptInventory.from_file(inventory_path, stop)
    extractions = {}
    with open(corpus_path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                item_id, text = rec["item_id"], rec["text"]
            except (json.JSONDecodeError, KeyError) as e:
                raise ValueError(f"{corpus_path}:{ln}: bad corpus record: {e}") from None
            counts = extract_concepts(normalize(text, stop), inv)
            if item_id in extractions:
                extractions[item_id].update(counts)
            else:
                extractions[item_id] = counts
    return tfidf_filter(extractions, threshold)
