"""Amharic alphabet label structure.

Every character carries three labels: its sequential character label
(1-265), the row of the alphabet grid it sits in (1-34, the base
consonant) and its column (1-9, the vowel-order form). The grid is
ragged -- rows have between 7 and 9 columns -- so the mapping is pure
data, shipped as a CSV manifest, and is never computed arithmetically.
"""

import csv
from dataclasses import dataclass
from importlib import resources

NUM_CHARACTERS = 265
NUM_ROWS = 34
NUM_COLUMNS = 9
SPLITS = ("train", "val", "test")
SPLIT_SIZES = {"train": 120, "val": 61, "test": 84}

# fixed corner cells of the grid, used as sanity anchors by the loader
ANCHOR_CELLS = {1: (1, 1), 265: (34, 7)}

MANIFEST_HEADER = ["char_label", "row_label", "col_label", "split"]


class ManifestError(ValueError):
    """An alphabet manifest is malformed or violates the alphabet contract."""


@dataclass(frozen=True)
class AlphabetEntry:
    char_label: int
    row_label: int
    col_label: int
    split: str


class AlphabetTable:
    """Immutable char_label -> (row, column, split) lookup.

    The constructor checks structural consistency only (unique positive
    labels, known split names); the canonical Amharic contract -- exactly
    265 characters, 120/61/84 splits, the anchor cells -- is enforced by
    :func:`load_alphabet` so that small custom tables (e.g. synthetic
    corpora) can reuse the same machinery.
    """

    def __init__(self, entries):
        entries = tuple(entries)
        if not entries:
            raise ManifestError("empty table")
        seen = set()
        for e in entries:
            if e.char_label in seen:
                raise ManifestError(f"duplicate char_label {e.char_label}")
            seen.add(e.char_label)
            if e.split not in SPLITS:
                raise ManifestError(
                    f"char {e.char_label}: unknown split {e.split!r}, expected one of {SPLITS}"
                )
            if min(e.char_label, e.row_label, e.col_label) < 1:
                raise ManifestError(f"char {e.char_label}: labels must be >= 1, got {e}")
        self.entries = entries
        self._by_char = {e.char_label: e for e in entries}
        self._split_classes = {
            s: tuple(sorted(e.char_label for e in entries if e.split == s)) for s in SPLITS
        }

    def __len__(self):
        return len(self.entries)

    def __contains__(self, char_label):
        return char_label in self._by_char

    def entry(self, char_label: int) -> AlphabetEntry:
        try:
            return self._by_char[char_label]
        except KeyError:
            raise KeyError(
                f"char_label {char_label} not in alphabet table ({len(self)} entries)"
            ) from None

    def row_of(self, char_label: int) -> int:
        return self.entry(char_label).row_label

    def col_of(self, char_label: int) -> int:
        return self.entry(char_label).col_label

    def split_of(self, char_label: int) -> str:
        return self.entry(char_label).split

    def split_classes(self, split: str) -> tuple:
        """Character labels belonging to a split, sorted ascending."""
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}, expected one of {SPLITS}")
        return self._split_classes[split]

    def split_sizes(self) -> dict:
        return {s: len(self._split_classes[s]) for s in SPLITS}


def read_manifest(path) -> AlphabetTable:
    """Parse a manifest CSV (header: char_label,row_label,col_label,split).

    Applies structural checks only; see load_alphabet for the canonical
    alphabet contract.
    """
    entries = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(
                f"{path}, line 1: expected header {','.join(MANIFEST_HEADER)!r}, got {','.join(header)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise ManifestError(f"{path}, line {lineno}: expected 4 fields, got {len(row)}")
            try:
                char_label, row_label, col_label = (int(c) for c in row[:3])
            except ValueError:
                raise ManifestError(
                    f"{path}, line {lineno}: non-integer label in {row[:3]}"
                ) from None
            entries.append(AlphabetEntry(char_label, row_label, col_label, row[3].strip()))
    try:
        return AlphabetTable(entries)
    except ManifestError as e:
        raise ManifestError(f"{path}: {e}") from None


def check_amharic_contract(table: AlphabetTable):
    """Enforce the canonical alphabet invariants on a loaded table.

    Raises ManifestError unless the table has exactly the 265 characters
    {1..265}, row labels in 1..34, column labels in 1..9, split sizes
    (120, 61, 84) and the two anchor cells.
    """
    chars = {e.char_label for e in table.entries}
    expected = set(range(1, NUM_CHARACTERS + 1))
    missing = expected - chars
    extra = chars - expected
    if missing:
        raise ManifestError(
            f"missing characters: {len(missing)} of {NUM_CHARACTERS} absent (e.g. {sorted(missing)[:5]})"
        )
    if extra:
        raise ManifestError(f"unexpected char_labels outside 1..{NUM_CHARACTERS}: {sorted(extra)[:5]}")
    for e in table.entries:
        if not 1 <= e.row_label <= NUM_ROWS:
            raise ManifestError(f"char {e.char_label}: row_label {e.row_label} outside 1..{NUM_ROWS}")
        if not 1 <= e.col_label <= NUM_COLUMNS:
            raise ManifestError(f"char {e.char_label}: col_label {e.col_label} outside 1..{NUM_COLUMNS}")
    sizes = table.split_sizes()
    if sizes != SPLIT_SIZES:
        raise ManifestError(f"split sizes {sizes} != required {SPLIT_SIZES}")
    for char_label, (row_label, col_label) in ANCHOR_CELLS.items():
        got = (table.row_of(char_label), table.col_of(char_label))
        if got != (row_label, col_label):
            raise ManifestError(
                f"anchor mismatch: char {char_label} must sit at (row, col) = "
                f"{(row_label, col_label)}, manifest says {got}"
            )


def bundled_manifest_path() -> str:
    """Path of the alphabet manifest shipped with the package."""
    return str(resources.files("amfewshot").joinpath("data/alphabet_manifest.csv"))


def load_alphabet(path=None) -> AlphabetTable:
    """Load and fully validate an Amharic alphabet manifest.

    With no path the bundled manifest is used. All canonical invariants
    are checked eagerly; any violation raises ManifestError.
    """
    if path is None:
        path = bundled_manifest_path()
    table = read_manifest(path)
    try:
        check_amharic_contract(table)
    except ManifestError as e:
        raise ManifestError(f"{path}: {e}") from None
    return table
