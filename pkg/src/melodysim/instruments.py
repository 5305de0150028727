"""General MIDI program grouping used for re-instrumentation and synthesis."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources

ENSEMBLES = (
    "pianos",
    "guitars",
    "strings_high",
    "strings_low",
    "winds",
    "brass",
    "organs",
    "synth_leads",
    "synth_pads",
    "basses",
    "mallets",
    "other",
)
REGISTERS = ("low", "mid", "high")

PIANO_PROGRAMS = frozenset(range(0, 8))
GUITAR_PROGRAMS = frozenset(range(24, 32))


@dataclass(frozen=True)
class EnsembleTable:
    ensemble: tuple[str, ...]  # indexed by program 0..127
    register: tuple[str, ...]

    def __post_init__(self):
        if len(self.ensemble) != 128 or len(self.register) != 128:
            raise ValueError("ensemble table must cover programs 0..127")
        unknown = set(self.ensemble) - set(ENSEMBLES)
        if unknown:
            raise ValueError(f"unknown ensembles {sorted(unknown)}")
        if set(self.register) - set(REGISTERS):
            raise ValueError("unknown register tag")
        missing = set(ENSEMBLES) - set(self.ensemble)
        if missing:
            raise ValueError(f"empty ensembles {sorted(missing)}")

    def members(self, ensemble: str) -> list[int]:
        return [p for p in range(128) if self.ensemble[p] == ensemble]

    def ensemble_id(self, program: int) -> int:
        return ENSEMBLES.index(self.ensemble[program])

    @classmethod
    def from_csv(cls, text: str) -> "EnsembleTable":
        rows = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        ens: dict[int, str] = {}
        reg: dict[int, str] = {}
        for row in csv.DictReader(io.StringIO("\n".join(rows))):
            p = int(row["program"])
            ens[p] = row["ensemble"].strip()
            reg[p] = row["register"].strip()
        if sorted(ens) != list(range(128)):
            raise ValueError("ensemble table must list every program 0..127 exactly once")
        return cls(tuple(ens[p] for p in range(128)), tuple(reg[p] for p in range(128)))

    def to_csv(self) -> str:
        out = ["program,ensemble,register"]
        out += [f"{p},{self.ensemble[p]},{self.register[p]}" for p in range(128)]
        return "\n".join(out) + "\n"


_DEFAULT: EnsembleTable | None = None


def default_table() -> EnsembleTable:
    global _DEFAULT
    if _DEFAULT is None:
        text = resources.files("melodysim").joinpath("data/ensembles.csv").read_text()
        _DEFAULT = EnsembleTable.from_csv(text)
    return _DEFAULT
