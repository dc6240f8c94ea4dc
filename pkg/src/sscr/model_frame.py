"""Tabular data ingestion, model formulas and design matrices.

A fitted model has one linear predictor per distribution parameter, each
with its own formula.  The per-parameter design blocks are stacked into
the block-diagonal "vlm" matrix used by the IRLS fitter::

    X_vlm = diag(X_1, X_2, ..., X_p)

where row band ``k`` holds the ``n`` rows of ``X_k``.
"""

from __future__ import annotations

import csv
import itertools
import logging
import re
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Dataset",
    "Formula",
    "FormulaError",
    "DesignBlocks",
    "read_csv",
    "parse_formula",
    "build_design",
    "build_vlm_matrix",
    "build_model_frame",
]

log = logging.getLogger(__name__)

NA_STRINGS = frozenset({"", "NA", "NaN", "nan", "null", "NULL"})


class FormulaError(ValueError):
    """Raised for malformed formula text."""


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Named columns of equal length.

    Numeric columns are float arrays (NaN marks a missing cell).
    Categorical columns are object arrays of strings (None marks a
    missing cell).
    """

    columns: Mapping[str, np.ndarray]
    kinds: Mapping[str, str]

    def __post_init__(self):
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise ValueError(f"columns have unequal lengths: {sorted(lengths)}")
        if not self.columns or lengths == {0}:
            raise ValueError("dataset has no rows")
        for name, kind in self.kinds.items():
            if kind not in ("numeric", "categorical"):
                raise ValueError(f"column {name!r}: unknown kind {kind!r}")
            if kind == "categorical" and not self.levels(name):
                raise ValueError(f"categorical column {name!r} has no observed level")

    @classmethod
    def from_dict(cls, data: Mapping[str, Iterable], kinds: Mapping[str, str] | None = None) -> "Dataset":
        """Build from plain sequences; kinds are inferred unless given."""
        kinds = dict(kinds or {})
        cols: dict[str, np.ndarray] = {}
        for name, values in data.items():
            values = list(values)
            kind = kinds.get(name) or _infer_kind(values)
            kinds[name] = kind
            cols[name] = _coerce(values, kind)
        return cls(cols, kinds)

    @classmethod
    def from_frame(cls, frame) -> "Dataset":
        """Build from a pandas DataFrame (numeric dtypes stay numeric)."""
        data, kinds = {}, {}
        for name in frame.columns:
            col = frame[name]
            if col.dtype.kind in "biuf":
                kinds[name] = "numeric"
                data[name] = col.to_numpy(dtype=float)
            else:
                kinds[name] = "categorical"
                data[name] = [None if v is None or v != v else str(v) for v in col]
        return cls.from_dict(data, kinds)

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    @property
    def n_rows(self) -> int:
        return len(next(iter(self.columns.values())))

    def __len__(self) -> int:
        return self.n_rows

    def __getitem__(self, name: str) -> np.ndarray:
        return self.columns[name]

    def __contains__(self, name: str) -> bool:
        return name in self.columns

    def levels(self, name: str) -> list[str]:
        """Observed levels of a categorical column, sorted lexicographically."""
        col = self.columns[name]
        return sorted({v for v in col if v is not None})

    def missing(self, name: str) -> np.ndarray:
        col = self.columns[name]
        if self.kinds[name] == "numeric":
            return np.isnan(col)
        return np.array([v is None for v in col], dtype=bool)

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset({k: v[rows] for k, v in self.columns.items()}, dict(self.kinds))

    def frequencies(self, name: str) -> dict:
        values, counts = np.unique(self.columns[name], return_counts=True)
        return {v.item() if hasattr(v, "item") else v: int(c) for v, c in zip(values, counts)}


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def _infer_kind(values: Sequence) -> str:
    present = [v for v in values if not _is_missing(v)]
    if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in present):
        return "numeric"
    if all(isinstance(v, str) and _is_number(v.strip()) for v in present):
        return "numeric"
    return "categorical"


def _is_missing(v) -> bool:
    if v is None:
        return True
    if isinstance(v, float) and np.isnan(v):
        return True
    return isinstance(v, str) and v.strip() in NA_STRINGS


def _coerce(values: Sequence, kind: str) -> np.ndarray:
    if kind == "numeric":
        return np.array([np.nan if _is_missing(v) else float(v) for v in values], dtype=float)
    out = np.empty(len(values), dtype=object)
    out[:] = [None if _is_missing(v) else str(v) for v in values]
    return out


def read_csv(path: str | Path, schema: Mapping[str, str] | None = None) -> Dataset:
    """Read a UTF-8, RFC-4180 CSV file with a header row.

    A column is numeric when every non-empty cell parses as a decimal
    number, categorical otherwise.  ``schema`` forces the kind of
    selected columns.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise ValueError(f"{path}: duplicate column names in header")
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path}: row {reader.line_num} has {len(row)} fields, expected {len(header)}"
                )
            rows.append(row)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    schema = dict(schema or {})
    data = {name: [r[j] for r in rows] for j, name in enumerate(header)}
    kinds = {name: schema.get(name) or _infer_kind(vals) for name, vals in data.items()}
    return Dataset.from_dict(data, kinds)


# ---------------------------------------------------------------------------
# Formulas
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"""\s*(?:
        (?P<name>`[^`]+`|[A-Za-z_][A-Za-z0-9_.]*|\.[A-Za-z_][A-Za-z0-9_.]*)
      | (?P<number>\d+)
      | (?P<op>[~+\-*:])
      | (?P<dot>\.)
    )""",
    re.VERBOSE,
)


@dataclass(frozen=True)
class Formula:
    """A parsed model formula.

    ``terms`` holds one tuple of variable names per term; ``("."),`` is
    the placeholder for "all other columns", expanded against a dataset.
    """

    response: str | None
    terms: tuple[tuple[str, ...], ...]
    intercept: bool = True

    def __str__(self) -> str:
        parts = [] if self.intercept else ["-1"]
        if self.intercept and not self.terms:
            parts = ["1"]
        rhs = " + ".join([":".join(_quote(v) for v in t) for t in self.terms] + parts)
        rhs = rhs.replace("+ -1", "- 1")
        lhs = f"{_quote(self.response)} " if self.response else ""
        return f"{lhs}~ {rhs}"

    @property
    def variables(self) -> list[str]:
        seen: dict[str, None] = {}
        for term in self.terms:
            for v in term:
                seen.setdefault(v)
        return list(seen)


def _quote(name: str) -> str:
    if name == "." or re.fullmatch(r"[A-Za-z_.][A-Za-z0-9_.]*", name):
        return name
    return f"`{name}`"


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    pos, out = 0, []
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise FormulaError(f"unexpected character {text[pos]!r} at position {pos} in {text!r}")
        kind = m.lastgroup
        value = m.group(kind)
        if kind == "name" and value.startswith("`"):
            value = value[1:-1]
        out.append((kind, value, m.start(kind)))
        pos = m.end()
    return out


def parse_formula(text: str) -> Formula:
    """Parse ``[response] ~ rhs``.

    The right-hand side is a ``+``-separated list of ``1``, ``0``, ``.``
    or products of variables joined by ``:`` (interaction) and ``*``
    (crossing: ``a*b`` is ``a + b + a:b``).  ``-1`` or ``+0`` drop the
    intercept.
    """
    tokens = _tokenize(text)
    tildes = [i for i, t in enumerate(tokens) if t[0] == "op" and t[1] == "~"]
    if len(tildes) != 1:
        raise FormulaError(f"formula must contain exactly one '~': {text!r}")
    split = tildes[0]
    lhs, rhs = tokens[:split], tokens[split + 1:]
    if len(lhs) > 1 or (lhs and lhs[0][0] != "name"):
        raise FormulaError(f"left-hand side must be a single column name: {text!r}")
    response = lhs[0][1] if lhs else None
    if not rhs:
        raise FormulaError(f"empty right-hand side in {text!r}")

    intercept = True
    terms: list[tuple[str, ...]] = []
    i = 0
    sign = "+"
    expect_item = True
    while i < len(rhs):
        kind, value, pos = rhs[i]
        if expect_item:
            if kind == "op" and value in "+-" and i == 0:
                sign = value
                i += 1
                continue
            if kind == "number":
                if value not in ("0", "1"):
                    raise FormulaError(f"unsupported constant {value!r} at position {pos}")
                intercept = (value == "1") if sign == "+" else (value == "0")
                i += 1
            elif kind == "dot":
                if sign == "-":
                    raise FormulaError(f"cannot remove '.' at position {pos}")
                terms.append((".",))
                i += 1
            elif kind == "name":
                if sign == "-":
                    raise FormulaError(f"term removal is not supported (position {pos})")
                groups: list[list[str]] = [[value]]
                i += 1
                while i + 1 < len(rhs) and rhs[i][0] == "op" and rhs[i][1] in ":*":
                    op = rhs[i][1]
                    nkind, nvalue, npos = rhs[i + 1]
                    if nkind != "name":
                        raise FormulaError(f"expected a variable name at position {npos}")
                    if op == ":":
                        groups[-1].append(nvalue)
                    else:
                        groups.append([nvalue])
                    i += 2
                terms.extend(_cross(groups))
            else:
                raise FormulaError(f"unexpected token {value!r} at position {pos}")
            expect_item = False
        else:
            if kind == "op" and value in "+-":
                sign = value
                expect_item = True
                i += 1
            else:
                raise FormulaError(f"unexpected token {value!r} at position {pos}")
    if expect_item:
        raise FormulaError(f"formula ends with an operator: {text!r}")

    unique: dict[frozenset, tuple[str, ...]] = {}
    for t in terms:
        key = frozenset(t)
        if len(key) != len(t):
            t = tuple(dict.fromkeys(t))
        unique.setdefault(key, t)
    ordered = sorted(unique.values(), key=len)
    return Formula(response=response, terms=tuple(ordered), intercept=intercept)


def _cross(groups: list[list[str]]) -> list[tuple[str, ...]]:
    out = []
    for size in range(1, len(groups) + 1):
        for combo in itertools.combinations(groups, size):
            out.append(tuple(itertools.chain.from_iterable(combo)))
    return out


# ---------------------------------------------------------------------------
# Design matrices
# ---------------------------------------------------------------------------


def _expand_dot(formula: Formula, dataset: Dataset, exclude: Iterable[str]) -> list[tuple[str, ...]]:
    skip = set(exclude)
    if formula.response:
        skip.add(formula.response)
    out: list[tuple[str, ...]] = []
    for term in formula.terms:
        if term == (".",):
            out.extend((name,) for name in dataset.names if name not in skip)
        else:
            out.append(term)
    return list(dict.fromkeys(out))


def formula_variables(formula: Formula, dataset: Dataset, exclude: Iterable[str] = ()) -> list[str]:
    names: dict[str, None] = {}
    for term in _expand_dot(formula, dataset, exclude):
        for v in term:
            names.setdefault(v)
    return list(names)


def build_design(
    dataset: Dataset, formula: Formula | str, exclude: Iterable[str] = ()
) -> tuple[np.ndarray, list[str]]:
    """Treatment-coded design matrix for the right-hand side of ``formula``.

    A categorical column with ``L`` levels gives ``L - 1`` indicators
    named ``<var><level>``; the lexicographically first level is the
    reference.  Without an intercept the first categorical main effect
    keeps all its levels.
    """
    if isinstance(formula, str):
        formula = parse_formula(formula)
    terms = _expand_dot(formula, dataset, exclude)
    for term in terms:
        for v in term:
            if v not in dataset:
                raise KeyError(f"formula refers to unknown column {v!r}")
    n = dataset.n_rows
    cols: list[np.ndarray] = []
    names: list[str] = []
    if formula.intercept:
        cols.append(np.ones(n))
        names.append("(Intercept)")
    full_coding_used = formula.intercept
    for term in terms:
        parts = []
        for v in term:
            if dataset.kinds[v] == "numeric":
                parts.append([(v, np.asarray(dataset[v], dtype=float))])
            else:
                levels = dataset.levels(v)
                full = not full_coding_used and len(term) == 1
                used = levels if full else levels[1:]
                col = dataset[v]
                parts.append([(f"{v}{lev}", (col == lev).astype(float)) for lev in used])
                full_coding_used = full_coding_used or full
        # first component varies fastest, as in R's model.matrix
        for combo in itertools.product(*reversed(parts)):
            combo = combo[::-1]
            names.append(":".join(c[0] for c in combo))
            cols.append(np.prod([c[1] for c in combo], axis=0))
    X = np.column_stack(cols) if cols else np.empty((n, 0))
    if X.shape[1] and np.all(np.isfinite(X)):
        rank = np.linalg.matrix_rank(X)
        if rank < X.shape[1]:
            warnings.warn(
                f"design for {formula} is rank deficient ({rank} < {X.shape[1]} columns)",
                RuntimeWarning,
                stacklevel=2,
            )
    return X, names


@dataclass(frozen=True)
class DesignBlocks:
    """Response, per-parameter design blocks, offsets and prior weights."""

    y: np.ndarray
    blocks: tuple[np.ndarray, ...]
    names: tuple[tuple[str, ...], ...]
    param_names: tuple[str, ...]
    offsets: np.ndarray
    weights: np.ndarray
    data: Dataset | None = field(default=None, compare=False, repr=False)
    formulas: Mapping[str, Formula] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        n = len(self.y)
        if any(b.shape[0] != n for b in self.blocks):
            raise ValueError("every design block must have one row per observation")
        if len(self.blocks) != len(self.param_names):
            raise ValueError("need one design block per distribution parameter")
        if self.offsets.shape != (n, len(self.blocks)):
            raise ValueError(f"offsets must have shape {(n, len(self.blocks))}")
        if self.weights.shape != (n,):
            raise ValueError("weights must be a vector with one entry per observation")

    @classmethod
    def from_arrays(cls, y, blocks, param_names=None, offsets=None, weights=None, names=None) -> "DesignBlocks":
        y = np.asarray(y, dtype=float)
        blocks = tuple(np.atleast_2d(np.asarray(b, dtype=float).T).T for b in blocks)
        p = len(blocks)
        n = len(y)
        if param_names is None:
            param_names = tuple(f"eta{j + 1}" for j in range(p))
        if names is None:
            names = tuple(tuple(f"x{j + 1}.{i + 1}" for i in range(b.shape[1])) for j, b in enumerate(blocks))
        offsets = np.zeros((n, p)) if offsets is None else np.asarray(offsets, dtype=float).reshape(n, p)
        weights = np.ones(n) if weights is None else np.broadcast_to(np.asarray(weights, dtype=float), (n,)).copy()
        return cls(y, blocks, tuple(tuple(x) for x in names), tuple(param_names), offsets, weights)

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def p(self) -> int:
        return len(self.blocks)

    @property
    def block_widths(self) -> tuple[int, ...]:
        return tuple(b.shape[1] for b in self.blocks)

    @property
    def n_coef(self) -> int:
        return int(sum(self.block_widths))

    @property
    def coef_names(self) -> list[str]:
        out = list(self.names[0])
        for param, names in zip(self.param_names[1:], self.names[1:]):
            out.extend(f"{nm}:{param}" for nm in names)
        return out

    def split(self, beta: np.ndarray) -> list[np.ndarray]:
        """Split a stacked coefficient vector into per-block pieces."""
        edges = np.cumsum((0,) + self.block_widths)
        return [beta[edges[j]:edges[j + 1]] for j in range(self.p)]

    def eta(self, beta: np.ndarray) -> np.ndarray:
        """Linear predictor matrix (n x p) including offsets."""
        beta = np.asarray(beta, dtype=float)
        cols = [X @ b for X, b in zip(self.blocks, self.split(beta))]
        return np.column_stack(cols) + self.offsets

    def xt_dot(self, g: np.ndarray) -> np.ndarray:
        """``X_vlm^T`` applied to an n x p matrix stacked column-wise."""
        return np.concatenate([X.T @ g[:, j] for j, X in enumerate(self.blocks)])

    def xtwx(self, W: np.ndarray) -> np.ndarray:
        """``X_vlm^T W X_vlm`` for per-row p x p weight blocks ``W`` (n x p x p)."""
        edges = np.cumsum((0,) + self.block_widths)
        q = edges[-1]
        out = np.zeros((q, q))
        for a, Xa in enumerate(self.blocks):
            for b in range(a, self.p):
                Xb = self.blocks[b]
                blk = Xa.T @ (W[:, a, b][:, None] * Xb)
                out[edges[a]:edges[a + 1], edges[b]:edges[b + 1]] = blk
                if a != b:
                    out[edges[b]:edges[b + 1], edges[a]:edges[a + 1]] = blk.T
        return out

    def vlm(self) -> np.ndarray:
        return build_vlm_matrix(self)

    def take(self, rows) -> "DesignBlocks":
        rows = np.asarray(rows)
        return replace(
            self,
            y=self.y[rows],
            blocks=tuple(b[rows] for b in self.blocks),
            offsets=self.offsets[rows],
            weights=self.weights[rows],
            data=None if self.data is None else self.data.take(rows),
        )


def build_vlm_matrix(blocks: DesignBlocks | Sequence[np.ndarray]) -> np.ndarray:
    """Stack design blocks into the block-diagonal ``(n*p) x sum(widths)`` matrix."""
    mats = blocks.blocks if isinstance(blocks, DesignBlocks) else [np.atleast_2d(np.asarray(b, float).T).T for b in blocks]
    if not mats:
        raise ValueError("need at least one design block")
    n = mats[0].shape[0]
    if any(m.shape[0] != n for m in mats):
        raise ValueError("design blocks must have equal row counts")
    widths = [m.shape[1] for m in mats]
    out = np.zeros((n * len(mats), sum(widths)))
    col = 0
    for k, m in enumerate(mats):
        out[k * n:(k + 1) * n, col:col + widths[k]] = m
        col += widths[k]
    return out


def build_model_frame(
    dataset: Dataset,
    formulas: Mapping[str, Formula | str],
    param_names: Sequence[str],
    weights=None,
    offsets=None,
) -> DesignBlocks:
    """Design blocks for every distribution parameter of a family.

    ``formulas`` maps parameter names to formulas; the first parameter's
    formula carries the response.  Missing formulas default to ``~ 1``.
    Rows with a missing value in any used column are dropped.
    """
    parsed = {k: parse_formula(v) if isinstance(v, str) else v for k, v in formulas.items()}
    unknown = set(parsed) - set(param_names)
    if unknown:
        raise ValueError(f"formulas given for unknown parameters {sorted(unknown)}; family has {list(param_names)}")
    main = parsed.get(param_names[0])
    if main is None or main.response is None:
        raise ValueError(f"the {param_names[0]} formula must name the response column")
    for name, f in parsed.items():
        if name != param_names[0] and f.response is not None:
            raise ValueError(f"the {name} formula must have an empty left-hand side")
    if main.response not in dataset:
        raise KeyError(f"response column {main.response!r} not in data")
    if dataset.kinds[main.response] != "numeric":
        raise ValueError(f"response column {main.response!r} must be numeric")
    full = {name: parsed.get(name, Formula(None, (), True)) for name in param_names}

    used = [main.response]
    for f in full.values():
        used.extend(formula_variables(f, dataset, exclude=[main.response]))
    used = list(dict.fromkeys(used))
    keep = np.ones(dataset.n_rows, dtype=bool)
    for name in used:
        keep &= ~dataset.missing(name)
    n_all = dataset.n_rows
    if weights is not None:
        weights = np.broadcast_to(np.asarray(weights, dtype=float), (n_all,))
    if offsets is not None:
        offsets = np.asarray(offsets, dtype=float).reshape(n_all, len(param_names))
    if not keep.all():
        log.info("dropping %d row(s) with missing values", int((~keep).sum()))
        dataset = dataset.take(np.flatnonzero(keep))
        weights = None if weights is None else weights[keep]
        offsets = None if offsets is None else offsets[keep]

    y = np.asarray(dataset[main.response], dtype=float)
    if np.any(y != np.round(y)) or np.any(y < 0):
        raise ValueError("response must contain nonnegative integer counts")
    blocks, names = [], []
    for name in param_names:
        X, nm = build_design(dataset, full[name], exclude=[main.response])
        blocks.append(X)
        names.append(tuple(nm))
    frame = DesignBlocks.from_arrays(y, blocks, param_names, offsets, weights, names)
    return replace(frame, data=dataset, formulas=full)
