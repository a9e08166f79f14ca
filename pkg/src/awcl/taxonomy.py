"""Fine-grained and coarse anatomy label spaces and the mapping between them."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import ManifestError, TaxonomyError


class Granularity(str, enum.Enum):
    FINE = "fine"
    COARSE = "coarse"


@dataclass(frozen=True)
class AnatomyLabel:
    id: int
    name: str
    granularity: Granularity


@dataclass(frozen=True)
class Taxonomy:
    """Two label spaces plus a total fine -> coarse map.

    Coarse classes without fine children are allowed (e.g. ``3D-mode``).
    """

    fine_labels: tuple[AnatomyLabel, ...]
    coarse_labels: tuple[AnatomyLabel, ...]
    fine_to_coarse: Mapping[int, int]
    _fine_by_name: dict = field(init=False, repr=False, compare=False)
    _coarse_by_name: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for labels, gran in ((self.fine_labels, Granularity.FINE),
                             (self.coarse_labels, Granularity.COARSE)):
            ids = [lab.id for lab in labels]
            if sorted(ids) != list(range(len(ids))):
                raise TaxonomyError(f"{gran.value} ids must be dense 0..{len(ids) - 1}, got {ids}")
            names = [lab.name for lab in labels]
            if any(not n for n in names):
                raise TaxonomyError(f"empty {gran.value} label name")
            if len(set(names)) != len(names):
                raise TaxonomyError(f"duplicate {gran.value} label name")
            if any(lab.granularity != gran for lab in labels):
                raise TaxonomyError(f"label listed under {gran.value} with wrong granularity")
        n_coarse = len(self.coarse_labels)
        for lab in self.fine_labels:
            c = self.fine_to_coarse.get(lab.id)
            if c is None:
                raise TaxonomyError(f"fine label {lab.name!r} has no coarse parent")
            if not 0 <= c < n_coarse:
                raise TaxonomyError(f"fine label {lab.name!r} maps to unknown coarse id {c}")
        object.__setattr__(self, "fine_to_coarse", dict(self.fine_to_coarse))
        object.__setattr__(self, "_fine_by_name", {lab.name: lab.id for lab in self.fine_labels})
        object.__setattr__(self, "_coarse_by_name", {lab.name: lab.id for lab in self.coarse_labels})

    @classmethod
    def from_names(cls, coarse: Sequence[str], fine_parents: Sequence[tuple[str, str]]) -> "Taxonomy":
        """Build from coarse names and ``(fine_name, coarse_name)`` pairs; ids follow list order."""
        coarse_labels = tuple(AnatomyLabel(i, n, Granularity.COARSE) for i, n in enumerate(coarse))
        index = {n: i for i, n in enumerate(coarse)}
        fine_labels = []
        mapping = {}
        for i, (name, parent) in enumerate(fine_parents):
            if parent not in index:
                raise TaxonomyError(f"fine label {name!r} names unknown coarse parent {parent!r}")
            fine_labels.append(AnatomyLabel(i, name, Granularity.FINE))
            mapping[i] = index[parent]
        return cls(tuple(fine_labels), coarse_labels, mapping)

    @property
    def n_fine(self) -> int:
        return len(self.fine_labels)

    @property
    def n_coarse(self) -> int:
        return len(self.coarse_labels)

    def fine_id(self, name: str) -> int:
        try:
            return self._fine_by_name[name]
        except KeyError:
            raise TaxonomyError(f"unknown fine label {name!r}") from None

    def coarse_id(self, name: str) -> int:
        try:
            return self._coarse_by_name[name]
        except KeyError:
            raise TaxonomyError(f"unknown coarse label {name!r}") from None

    def fine_name(self, fine_id: int) -> str:
        self._check_fine(fine_id)
        return self.fine_labels[fine_id].name

    def coarse_name(self, coarse_id: int) -> str:
        if not (isinstance(coarse_id, int) and 0 <= coarse_id < self.n_coarse):
            raise TaxonomyError(f"unknown coarse id {coarse_id!r}")
        return self.coarse_labels[coarse_id].name

    def coarsen(self, fine_id: int) -> int:
        self._check_fine(fine_id)
        return self.fine_to_coarse[fine_id]

    def children(self, coarse_id: int) -> list[int]:
        return [f for f, c in self.fine_to_coarse.items() if c == coarse_id]

    def _check_fine(self, fine_id):
        if isinstance(fine_id, bool) or not isinstance(fine_id, int) or not 0 <= fine_id < self.n_fine:
            raise TaxonomyError(f"unknown fine id {fine_id!r}")

    # -- serialisation -----------------------------------------------------

    def to_text(self) -> str:
        lines = ["# granularity\tid\tname\tparent_coarse_id"]
        for lab in self.coarse_labels:
            lines.append(f"coarse\t{lab.id}\t{lab.name}")
        for lab in self.fine_labels:
            lines.append(f"fine\t{lab.id}\t{lab.name}\t{self.fine_to_coarse[lab.id]}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def coarsen(t: Taxonomy, fine_id: int) -> int:
    return t.coarsen(fine_id)


def parse_taxonomy(text: str) -> Taxonomy:
    """Parse the tab-separated taxonomy format written by :meth:`Taxonomy.to_text`."""
    fine, coarse, parents = [], [], {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        try:
            gran = Granularity(parts[0])
            ident = int(parts[1])
            name = parts[2]
        except (ValueError, IndexError):
            raise ManifestError(f"taxonomy line {lineno}: cannot parse {raw!r}") from None
        if gran is Granularity.COARSE:
            if len(parts) != 3:
                raise ManifestError(f"taxonomy line {lineno}: coarse records take 3 fields")
            coarse.append(AnatomyLabel(ident, name, gran))
        else:
            if len(parts) != 4:
                raise ManifestError(f"taxonomy line {lineno}: fine records need a parent coarse id")
            try:
                parents[ident] = int(parts[3])
            except ValueError:
                raise ManifestError(f"taxonomy line {lineno}: bad parent id {parts[3]!r}") from None
            fine.append(AnatomyLabel(ident, name, gran))
    fine.sort(key=lambda lab: lab.id)
    coarse.sort(key=lambda lab: lab.id)
    return Taxonomy(tuple(fine), tuple(coarse), parents)


def load_taxonomy(path) -> Taxonomy:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"taxonomy file not found: {path}")
    return parse_taxonomy(path.read_text())


DEFAULT_COARSE = (
    "heart", "brain", "spine", "abdomen", "femur", "kidneys", "nose-and-lips",
    "face-side-profile", "full-body-side-profile", "bladder", "3D-mode",
    "maternal-anatomy", "other",
)

DEFAULT_FINE = (
    ("3VT", "heart"), ("4CH", "heart"), ("RVOT", "heart"), ("LVOT", "heart"),
    ("BrainTv", "brain"), ("BrainTc", "brain"),
    ("SpineCor", "spine"), ("SpineSag", "spine"),
    ("abdomen", "abdomen"), ("femur", "femur"), ("kidneys", "kidneys"),
    ("lips", "nose-and-lips"), ("profile", "face-side-profile"),
    ("background", "other"),
)


def default_taxonomy() -> Taxonomy:
    """The second-trimester label set: 14 fine classes (incl. background), 13 coarse."""
    return Taxonomy.from_names(DEFAULT_COARSE, DEFAULT_FINE)


def synthetic_taxonomy(n_fine: int, fine_per_coarse: int) -> Taxonomy:
    """Taxonomy for generated data: coarse ``c<k>`` with children ``c<k>.f<j>``."""
    if n_fine <= 0 or fine_per_coarse <= 0 or n_fine % fine_per_coarse:
        raise TaxonomyError("n_fine must be a positive multiple of fine_per_coarse")
    n_coarse = n_fine // fine_per_coarse
    coarse = [f"c{k}" for k in range(n_coarse)]
    fine = [(f"c{k}.f{j}", f"c{k}") for k in range(n_coarse) for j in range(fine_per_coarse)]
    return Taxonomy.from_names(coarse, fine)


def relabel_count(t: Taxonomy, fine_ids: Iterable[int]) -> tuple[int, int]:
    """Number of distinct classes used at (fine, coarse) granularity."""
    fine_ids = set(fine_ids)
    return len(fine_ids), len({t.coarsen(f) for f in fine_ids})
