"""Random small-molecule SMILES with a smooth synthetic gap target.

Used for desk-scale experiments where the real dataset is unavailable.  The
target depends only on atom counts, so a sum-pooled GNN can learn it.
"""

from __future__ import annotations

import csv
import math

import numpy as np

from .chem import mol_from_smiles

_CHAIN_ATOMS = ["C", "C", "C", "C", "C", "N", "O", "S"]
_BRANCHES = ["(C)", "(O)", "(=O)", "(N)", "(F)", "(Cl)", "(CC)", "(C#N)"]
_RINGS = ["c1ccccc1", "C1CCCCC1", "c1ccncc1", "C1CCOC1", "c1ccsc1"]


def random_smiles(rng: np.random.Generator, max_units: int = 7) -> str:
    n_units = int(rng.integers(1, max_units + 1))
    parts: list[str] = []
    for i in range(n_units):
        r = rng.random()
        if r < 0.18:
            parts.append(_RINGS[rng.integers(len(_RINGS))])
        else:
            atom = _CHAIN_ATOMS[rng.integers(len(_CHAIN_ATOMS))]
            if i > 0 and atom == "C" and parts[-1] == "C" and rng.random() < 0.15:
                parts.append("=")
            parts.append(atom)
            if atom == "C" and rng.random() < 0.3:
                parts.append(_BRANCHES[rng.integers(len(_BRANCHES))])
    return "".join(parts)


def synthetic_gap(smiles: str) -> float:
    """Smooth function of heavy-atom counts, in a HOMO-LUMO-like eV range."""
    g = mol_from_smiles(smiles)
    counts: dict[int, int] = {}
    for a in g.atoms:
        counts[a.element] = counts.get(a.element, 0) + 1
    n_heavy = len(g.atoms)
    n_hetero = counts.get(7, 0) + counts.get(8, 0)
    n_arom = sum(a.aromatic for a in g.atoms)
    n_halo = counts.get(9, 0) + counts.get(17, 0)
    return 2.5 + 6.0 / (1.0 + 0.15 * n_heavy) + 0.3 * math.sqrt(n_hetero) - 0.08 * n_arom + 0.2 * n_halo


def make_corpus(n: int, seed: int = 0) -> list[tuple[str, float]]:
    rng = np.random.default_rng(seed)
    return [(s, synthetic_gap(s)) for s in (random_smiles(rng) for _ in range(n))]


def write_corpus(path, rows: list[tuple[str, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["smiles", "homolumogap"])
        for s, y in rows:
            w.writerow([s, repr(float(y))])
