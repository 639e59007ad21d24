"""SMILES parsing into heavy-atom graphs plus integer feature codes.

The accepted grammar is a practical subset: organic-subset and aromatic
atoms, bracket atoms (isotope, chirality and atom class are parsed and
dropped), bond symbols ``- = # : / \\``, ring closures ``1-9`` and ``%nn``,
branches and ``.`` component separators.  Aromaticity is read verbatim from
lowercase atoms; no kekulization is attempted.
"""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, OutOfVocabulary, UnclosedBranch, UnclosedRing, UnknownToken

ELEMENTS = (
    "H He Li Be B C N O F Ne Na Mg Al Si P S Cl Ar K Ca Sc Ti V Cr Mn Fe Co Ni Cu Zn "
    "Ga Ge As Se Br Kr Rb Sr Y Zr Nb Mo Tc Ru Rh Pd Ag Cd In Sn Sb Te I Xe Cs Ba La Ce "
    "Pr Nd Pm Sm Eu Gd Tb Dy Ho Er Tm Yb Lu Hf Ta W Re Os Ir Pt Au Hg Tl Pb Bi Po At Rn "
    "Fr Ra Ac Th Pa U Np Pu Am Cm Bk Cf Es Fm Md No Lr Rf Db Sg Bh Hs Mt Ds Rg Cn Nh Fl "
    "Mc Lv Ts Og"
).split()
ATOMIC_NUMBER = {sym: z for z, sym in enumerate(ELEMENTS, start=1)}

ORGANIC = {"B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"}
AROMATIC_ORGANIC = {"b", "c", "n", "o", "p", "s"}
BRACKET_AROMATIC = {"b", "c", "n", "o", "p", "s", "se", "as", "te"}

# Default valences for filling implicit hydrogens on unbracketed atoms.
VALENCE = {5: 3, 6: 4, 7: 3, 8: 2, 15: 3, 16: 2, 9: 1, 17: 1, 35: 1, 53: 1}

BOND_ORDERS = ("single", "double", "triple", "aromatic")
BOND_SYMBOLS = {"-": "single", "=": "double", "#": "triple", ":": "aromatic", "/": "single", "\\": "single"}
_BOND_WEIGHT = {"single": 1.0, "double": 2.0, "triple": 3.0, "aromatic": 1.5}

# Vocabulary sizes of the five atom codes and two bond codes.
ATOM_VOCAB = (119, 11, 11, 9, 2)
BOND_VOCAB = (4, 2)

_BRACKET_RE = re.compile(
    r"^(?P<isotope>\d+)?"
    r"(?P<symbol>[A-Z][a-z]?|se|as|te|[bcnops])"
    r"(?P<chiral>@@?(?:TH[12]|AL[12]|SP[123]|TB\d\d?|OH\d\d?)?)?"
    r"(?P<hcount>H\d?)?"
    r"(?P<charge>\+\d+|-\d+|\++|-+)?"
    r"(?P<cls>:\d+)?$"
)


@dataclass(frozen=True)
class Atom:
    element: int
    degree: int = 0
    formal_charge: int = 0
    explicit_h: int = 0
    aromatic: bool = False
    bracket: bool = False


@dataclass(frozen=True)
class Bond:
    endpoints: tuple[int, int]
    order: str = "single"
    in_ring: bool = False


@dataclass(frozen=True)
class MolGraph:
    atoms: tuple[Atom, ...]
    bonds: tuple[Bond, ...]
    source: str = ""

    @property
    def num_atoms(self) -> int:
        return len(self.atoms)


def _parse_bracket(body: str, position: int) -> Atom:
    m = _BRACKET_RE.match(body)
    if m is None:
        raise UnknownToken(position, f"bad bracket atom [{body}]")
    symbol = m.group("symbol")
    aromatic = symbol.islower()
    if aromatic:
        if symbol not in BRACKET_AROMATIC:
            raise UnknownToken(position, f"bad aromatic symbol {symbol!r}")
        symbol = symbol.capitalize()
    if symbol not in ATOMIC_NUMBER:
        raise UnknownToken(position, f"unknown element {symbol!r}")

    hcount = m.group("hcount")
    n_h = 0 if not hcount else (int(hcount[1:]) if len(hcount) > 1 else 1)

    charge_text = m.group("charge") or ""
    if not charge_text:
        charge = 0
    elif charge_text[1:].isdigit():
        charge = int(charge_text)
    else:
        charge = len(charge_text) * (1 if charge_text[0] == "+" else -1)

    return Atom(
        element=ATOMIC_NUMBER[symbol],
        formal_charge=charge,
        explicit_h=n_h,
        aromatic=aromatic,
        bracket=True,
    )


def _tokenize_atom(s: str, i: int) -> tuple[Atom, int] | None:
    """Return (atom, next index) if an atom starts at ``s[i]``, else None."""
    if s[i] == "[":
        close = s.find("]", i + 1)
        if close < 0:
            raise UnknownToken(i, "unterminated bracket atom")
        return _parse_bracket(s[i + 1 : close], i), close + 1
    two = s[i : i + 2]
    if two in ("Cl", "Br"):
        return Atom(element=ATOMIC_NUMBER[two]), i + 2
    if s[i] in ORGANIC:
        return Atom(element=ATOMIC_NUMBER[s[i]]), i + 1
    if s[i] in AROMATIC_ORGANIC:
        return Atom(element=ATOMIC_NUMBER[s[i].upper()], aromatic=True), i + 1
    return None


def parse_smiles(s: str) -> MolGraph:
    """Parse ``s`` into a heavy-atom :class:`MolGraph`.

    Explicit hydrogens written as bracket atoms bonded to a single heavy atom
    are folded into that atom's ``explicit_h``.  Implicit hydrogens are not
    filled here; see :func:`implicit_hydrogens`.
    """
    if not s:
        raise EmptyInput("empty SMILES string")

    atoms: list[Atom] = []
    bonds: list[list] = []  # [u, v, order]
    bonded: set[frozenset] = set()
    branch_stack: list[int | None] = []
    rings: dict[int, tuple[int, str | None, int]] = {}  # digit -> (atom, bond, pos)
    prev: int | None = None
    pending: str | None = None
    pending_pos = 0

    def add_bond(u: int, v: int, order: str | None, pos: int) -> None:
        key = frozenset((u, v))
        if u == v or key in bonded:
            raise UnknownToken(pos, "ring closure duplicates a bond")
        if order is None:
            order = "aromatic" if atoms[u].aromatic and atoms[v].aromatic else "single"
        bonded.add(key)
        bonds.append([u, v, order])

    i, n = 0, len(s)
    while i < n:
        ch = s[i]
        if not ch.isascii():
            raise UnknownToken(i, "non-ASCII character")

        parsed = _tokenize_atom(s, i)
        if parsed is not None:
            atom, nxt = parsed
            atoms.append(atom)
            idx = len(atoms) - 1
            if prev is not None:
                add_bond(prev, idx, pending, i)
            elif pending is not None:
                raise UnknownToken(pending_pos, "bond without a preceding atom")
            prev, pending = idx, None
            i = nxt
        elif ch in BOND_SYMBOLS:
            if pending is not None or prev is None:
                raise UnknownToken(i)
            pending, pending_pos = BOND_SYMBOLS[ch], i
            i += 1
        elif ch == "(":
            if prev is None or pending is not None:
                raise UnknownToken(i)
            branch_stack.append(prev)
            i += 1
        elif ch == ")":
            if not branch_stack or pending is not None:
                raise UnknownToken(i)
            prev = branch_stack.pop()
            i += 1
        elif ch.isdigit() or ch == "%":
            if prev is None:
                raise UnknownToken(i)
            if ch == "%":
                if not s[i + 1 : i + 3].isdigit() or len(s[i + 1 : i + 3]) != 2:
                    raise UnknownToken(i, "'%' must be followed by two digits")
                digit, nxt = int(s[i + 1 : i + 3]), i + 3
            else:
                digit, nxt = int(ch), i + 1
            if digit in rings:
                opener, open_bond, _ = rings.pop(digit)
                if pending and open_bond and pending != open_bond:
                    raise UnknownToken(i, "conflicting ring-closure bond orders")
                add_bond(opener, prev, pending or open_bond, i)
            else:
                rings[digit] = (prev, pending, i)
            pending = None
            i = nxt
        elif ch == ".":
            if pending is not None or prev is None:
                raise UnknownToken(i)
            prev = None
            i += 1
        else:
            raise UnknownToken(i)

    if pending is not None:
        raise UnknownToken(pending_pos, "dangling bond symbol")
    if branch_stack:
        raise UnclosedBranch()
    if rings:
        raise UnclosedRing(min(rings))

    return _finalize(atoms, bonds, s)


def _finalize(atoms: list[Atom], bonds: list[list], source: str) -> MolGraph:
    n = len(atoms)
    neighbors: list[list[int]] = [[] for _ in range(n)]
    for u, v, _ in bonds:
        neighbors[u].append(v)
        neighbors[v].append(u)

    # Fold explicit [H] atoms hanging off a single heavy atom.
    drop = set()
    extra_h = [0] * n
    for i, a in enumerate(atoms):
        if a.element == 1 and a.formal_charge == 0 and len(neighbors[i]) == 1:
            j = neighbors[i][0]
            if atoms[j].element != 1:
                drop.add(i)
                extra_h[j] += 1 + a.explicit_h

    remap = {}
    for i in range(n):
        if i not in drop:
            remap[i] = len(remap)
    kept_bonds = [(remap[u], remap[v], o) for u, v, o in bonds if u not in drop and v not in drop]

    degree = [0] * len(remap)
    for u, v, _ in kept_bonds:
        degree[u] += 1
        degree[v] += 1

    new_atoms = []
    for i, a in enumerate(atoms):
        if i in drop:
            continue
        k = remap[i]
        new_atoms.append(dataclasses.replace(a, degree=degree[k], explicit_h=a.explicit_h + extra_h[i]))

    pairs = [(u, v) for u, v, _ in kept_bonds]
    new_bonds = tuple(
        Bond(endpoints=(u, v), order=o, in_ring=_in_ring(len(new_atoms), pairs, b))
        for b, (u, v, o) in enumerate(kept_bonds)
    )
    return MolGraph(atoms=tuple(new_atoms), bonds=new_bonds, source=source)


def _in_ring(n: int, pairs: list[tuple[int, int]], skip: int) -> bool:
    """True if the bond ``pairs[skip]`` lies on a cycle, i.e. is not a bridge."""
    adj: list[list[int]] = [[] for _ in range(n)]
    for b, (u, v) in enumerate(pairs):
        if b != skip:
            adj[u].append(v)
            adj[v].append(u)
    start, goal = pairs[skip]
    seen = {start}
    stack = [start]
    while stack:
        x = stack.pop()
        if x == goal:
            return True
        for y in adj[x]:
            if y not in seen:
                seen.add(y)
                stack.append(y)
    return False


def implicit_hydrogens(g: MolGraph) -> MolGraph:
    """Fill hydrogen counts on unbracketed organic-subset atoms.

    Aromatic bonds count 1.5 each; the bond-order sum is floored before it is
    subtracted from the default valence.  Bracket atoms keep their written
    hydrogen count.
    """
    order_sum = [0.0] * len(g.atoms)
    for b in g.bonds:
        w = _BOND_WEIGHT[b.order]
        order_sum[b.endpoints[0]] += w
        order_sum[b.endpoints[1]] += w

    atoms = []
    for a, total in zip(g.atoms, order_sum):
        if a.bracket or a.element not in VALENCE:
            atoms.append(a)
            continue
        # explicit_h here only holds folded [H] atoms, which also consume valence
        free = VALENCE[a.element] - math.floor(total) - a.explicit_h
        atoms.append(dataclasses.replace(a, explicit_h=a.explicit_h + max(0, free)))
    return dataclasses.replace(g, atoms=tuple(atoms))


def mol_from_smiles(s: str) -> MolGraph:
    return implicit_hydrogens(parse_smiles(s))


def atom_feature_codes(a: Atom) -> list[int]:
    codes = [a.element, a.degree, a.formal_charge + 5, a.explicit_h, int(a.aromatic)]
    names = ("element", "degree", "formal_charge", "explicit_h", "aromatic")
    for name, code, size, raw in zip(names, codes, ATOM_VOCAB, (a.element, a.degree, a.formal_charge, a.explicit_h, a.aromatic)):
        if not 0 <= code < size:
            raise OutOfVocabulary(name, raw)
    return codes


def bond_feature_codes(b: Bond) -> list[int]:
    return [BOND_ORDERS.index(b.order), int(b.in_ring)]


def feature_arrays(g: MolGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Node codes ``[N, 5]``, bond codes ``[B, 2]`` and bond endpoints ``[B, 2]``."""
    node = np.array([atom_feature_codes(a) for a in g.atoms], dtype=np.int64).reshape(-1, 5)
    edge = np.array([bond_feature_codes(b) for b in g.bonds], dtype=np.int64).reshape(-1, 2)
    ends = np.array([b.endpoints for b in g.bonds], dtype=np.int64).reshape(-1, 2)
    return node, edge, ends
