"""Local concept vocabulary with synonym folding.

A small editable table of disease / antigen / sign / formulation labels
with synonym lists. It backs diagnosis normalization, decision-node
synonym expansion, and antigen extraction from prose answers. Operators
can extend it with their own CSV (columns: label,kind,synonyms where
synonyms are '|'-separated).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .text import is_token_subsequence, tokenize


@dataclass
class ConceptEntry:
    label: str
    kind: str
    synonyms: list[str] = field(default_factory=list)

    def all_forms(self) -> list[str]:
        return [self.label] + self.synonyms


class Vocabulary:
    """Synonym-folding lookups over the bundled concept table."""

    def __init__(self, entries: list[ConceptEntry]):
        self.entries = entries
        # term (lowercased) -> canonical label
        self._fold: dict[str, str] = {}
        for entry in entries:
            for form in entry.all_forms():
                self._fold.setdefault(form.lower(), entry.label)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "Vocabulary":
        """Load from CSV; defaults to the bundled table."""
        if path is None:
            ref = resources.files("guidebench.data").joinpath("vocabulary.csv")
            with ref.open("r", encoding="utf-8") as fh:
                return cls._parse(fh)
        with open(path, "r", encoding="utf-8") as fh:
            return cls._parse(fh)

    @classmethod
    def _parse(cls, fh) -> "Vocabulary":
        entries = []
        for row in csv.DictReader(fh):
            synonyms = [s.strip() for s in row["synonyms"].split("|") if s.strip()]
            entries.append(ConceptEntry(row["label"], row["kind"], synonyms))
        return cls(entries)

    def canonical(self, term: str) -> str:
        """Fold a term to its canonical label; unknown terms fold to
        lowercased, whitespace-trimmed form."""
        return self._fold.get(term.strip().lower(), term.strip().lower())

    def synonyms_for(self, label: str) -> list[str]:
        for entry in self.entries:
            if entry.label.lower() == label.lower():
                return list(entry.synonyms)
        return []

    def match_labels(self, text: str, kind: str | None = None) -> set[str]:
        """Canonical labels whose label or any synonym occurs in ``text``
        as a consecutive token run."""
        hay = tokenize(text)
        found = set()
        for entry in self.entries:
            if kind is not None and entry.kind != kind:
                continue
            for form in entry.all_forms():
                if is_token_subsequence(tokenize(form), hay):
                    found.add(entry.label)
                    break
        return found

    def same_concept(self, a: str, b: str) -> bool:
        return self.canonical(a) == self.canonical(b)
