"""Reading and writing relational data: dense CSV matrices, long-format panels with
covariates, and binary edge lists."""
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import yaml

from matlrt.core import RelationalMatrix, UserError, DimensionError
from matlrt.eigenmodel import BinaryNetwork
from matlrt.meanmodel import DyadicDesign

logger = logging.getLogger(__name__)

LONG_FORMAT_KEYS = ["i", "j", "k"]


MISSING_TOKENS = ["", "NA", "NaN", "nan"]


def _is_numeric(values: pd.Series) -> bool:
    return bool(pd.to_numeric(values, errors="coerce").notna().all())


def _is_numeric_or_missing(values: pd.Series) -> bool:
    return _is_numeric(values[~values.isin(MISSING_TOKENS)])


def _read_table(path: str) -> pd.DataFrame:
    """Read a CSV, dropping a header row and a label column if present. Header names must not
    be plain numbers."""
    try:
        frame = pd.read_csv(path, header=None, comment="#", dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise UserError(f"Could not read '{path}': {exc}") from exc
    if not _is_numeric_or_missing(frame.iloc[0]):
        frame = frame.iloc[1:]
    if frame.empty:
        raise UserError(f"'{path}' holds no data.")
    if not _is_numeric_or_missing(frame.iloc[:, 0]) or frame.shape[1] == frame.shape[0] + 1:
        frame = frame.iloc[:, 1:]
    return frame.reset_index(drop=True)


def read_dense_matrix(path: str, missing_diagonal: bool = False) -> RelationalMatrix:
    """Read a square matrix from CSV. Header row and label column are optional; NA is allowed
    only on the diagonal and only with `missing_diagonal`."""
    frame = _read_table(path)
    values = frame.apply(lambda column: pd.to_numeric(column, errors="coerce")).to_numpy(
        dtype=float)
    if values.shape[0] != values.shape[1]:
        raise DimensionError(f"'{path}' holds a {values.shape[0]}x{values.shape[1]} matrix, "
                             f"expected a square one.")
    missing = np.isnan(values)
    off_diagonal = missing & ~np.eye(values.shape[0], dtype=bool)
    if np.any(off_diagonal):
        raise UserError(f"'{path}' has missing or non-numeric entries off the diagonal.")
    if np.any(missing) and not missing_diagonal:
        raise UserError(f"'{path}' has a missing diagonal; use the missing-diagonal option.")
    logger.debug("Read %dx%d matrix from %s.", values.shape[0], values.shape[1], path)
    return RelationalMatrix(np.nan_to_num(values), diagonal_defined=not missing_diagonal)


def read_dense_stack(paths: Sequence[str], missing_diagonal: bool = False
                     ) -> List[RelationalMatrix]:
    """Read one replicate per file; all must share m."""
    ys = [read_dense_matrix(path, missing_diagonal) for path in paths]
    if len({y.m for y in ys}) > 1:
        raise DimensionError("Replicates differ in dimension.")
    return ys


def write_dense_matrix(path: str, y: RelationalMatrix):
    """Write a matrix as header-less CSV, with NA on an undefined diagonal."""
    values = y.entries.copy()
    if not y.diagonal_defined:
        np.fill_diagonal(values, np.nan)
    pd.DataFrame(values).to_csv(path, header=False, index=False, na_rep="NA",
                                float_format="%.17g", lineterminator="\n")


def load_name_map(path: Optional[str]) -> Dict[str, Dict[str, str]]:
    """Read a YAML or JSON sidecar mapping node and replicate codes to display names, e.g.
    {"nodes": {"0": "Australia"}, "replicates": {"0": "1996"}}."""
    if path is None:
        return {"nodes": {}, "replicates": {}}
    try:
        with open(path, "r", encoding="utf-8") as file:
            content = yaml.safe_load(file) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise UserError(f"Could not read name map '{path}': {exc}") from exc
    if not isinstance(content, dict):
        raise UserError(f"Name map '{path}' must be a mapping.")
    return {section: {str(key): str(value) for key, value in (content.get(section) or {}).items()}
            for section in ("nodes", "replicates")}


# pylint: disable=too-few-public-methods
class LongPanel:
    """Replicate stack read from long format, with its design and labels."""
    ys: List[RelationalMatrix]
    design: DyadicDesign
    nodes: List[str]
    replicates: List[str]

    def __init__(self, ys: List[RelationalMatrix], design: DyadicDesign, nodes: List[str],
                 replicates: List[str]):
        self.ys = ys
        self.design = design
        self.nodes = nodes
        self.replicates = replicates

    def __repr__(self):
        return f"LongPanel(m={len(self.nodes)}, p={len(self.replicates)}, " \
               f"covariates={self.design.names})"


def _sorted_labels(values: pd.Series) -> List[str]:
    unique = pd.unique(values)
    if _is_numeric(pd.Series(unique)):
        return [str(value) for value in sorted(unique, key=float)]
    return sorted(str(value) for value in unique)


# pylint: disable=too-many-locals
def read_long_format(path: str, missing_diagonal: bool = False,
                     names_path: Optional[str] = None) -> LongPanel:
    """Read columns (i, j, k, y, x_1..x_px): one row per ordered pair and replicate.

    Every off-diagonal pair must be present once per replicate; diagonal rows may be absent
    with `missing_diagonal`."""
    try:
        frame = pd.read_csv(path, comment="#", dtype={key: str for key in LONG_FORMAT_KEYS})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise UserError(f"Could not read '{path}': {exc}") from exc
    missing_columns = [column for column in LONG_FORMAT_KEYS + ["y"] if column not in frame]
    if missing_columns:
        raise UserError(f"'{path}' lacks columns {missing_columns}.")
    if frame.duplicated(LONG_FORMAT_KEYS).any():
        raise UserError(f"'{path}' has duplicate (i, j, k) rows.")
    covariate_columns = [column for column in frame.columns if column.startswith("x_")]
    nodes = _sorted_labels(pd.concat([frame["i"], frame["j"]]))
    replicates = _sorted_labels(frame["k"])
    m, p = len(nodes), len(replicates)
    node_index = {label: index for index, label in enumerate(nodes)}
    replicate_index = {label: index for index, label in enumerate(replicates)}
    rows = frame["i"].map(node_index).to_numpy()
    cols = frame["j"].map(node_index).to_numpy()
    reps = frame["k"].map(replicate_index).to_numpy()
    if missing_diagonal:
        keep = rows != cols
        rows, cols, reps, frame = rows[keep], cols[keep], reps[keep], frame[keep]
    expected = p * m * (m - 1) if missing_diagonal else p * m * m
    if len(frame) != expected:
        raise UserError(f"'{path}' has {len(frame)} usable rows, expected {expected} for "
                        f"m={m}, p={p}.")
    response = pd.to_numeric(frame["y"], errors="coerce").to_numpy(dtype=float)
    covariates = frame[covariate_columns].apply(pd.to_numeric, errors="coerce").to_numpy(
        dtype=float).reshape(len(frame), len(covariate_columns))
    if np.isnan(response).any() or np.isnan(covariates).any():
        raise UserError(f"'{path}' has missing or non-numeric values.")
    stack = np.zeros((p, m, m))
    stack[reps, rows, cols] = response
    design = np.zeros((p, m, m, len(covariate_columns)))
    design[reps, rows, cols] = covariates
    names = load_name_map(names_path)
    ys = [RelationalMatrix(stack[k], diagonal_defined=not missing_diagonal) for k in range(p)]
    logger.info("Read long-format panel with m=%d, p=%d and %d covariates.", m, p,
                len(covariate_columns))
    return LongPanel(ys, DyadicDesign(design, covariate_columns),
                     [names["nodes"].get(label, label) for label in nodes],
                     [names["replicates"].get(label, label) for label in replicates])


def write_long_format(path: str, ys: Sequence[RelationalMatrix], nodes: Sequence[str],
                      replicates: Sequence[str]):
    """Write a replicate stack as (i, j, k, y) rows; undefined diagonals are omitted."""
    records = []
    for label, y in zip(replicates, ys):
        for row, source in enumerate(nodes):
            for col, target in enumerate(nodes):
                if row == col and not y.diagonal_defined:
                    continue
                records.append({"i": source, "j": target, "k": label,
                                "y": y.entries[row, col]})
    pd.DataFrame(records, columns=["i", "j", "k", "y"]).to_csv(
        path, index=False, float_format="%.17g", lineterminator="\n")


def read_edge_list(path: str, m: Optional[int] = None,
                   diagonal_meaningful: bool = True) -> BinaryNetwork:
    """Read (source, target) pairs. Integer node ids 0..m-1 are used as indices when `m` is
    given, otherwise the sorted distinct labels define the nodes."""
    try:
        frame = pd.read_csv(path, header=None, comment="#", dtype=str)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise UserError(f"Could not read '{path}': {exc}") from exc
    if frame.shape[1] < 2:
        raise UserError(f"'{path}' needs a source and a target column.")
    frame = frame.iloc[:, :2]
    if m is not None and not _is_numeric(frame.iloc[0]):
        frame = frame.iloc[1:]
    elif m is None and frame.iloc[0].tolist() == ["source", "target"]:
        frame = frame.iloc[1:]
    if m is not None:
        sources = pd.to_numeric(frame.iloc[:, 0], errors="coerce")
        targets = pd.to_numeric(frame.iloc[:, 1], errors="coerce")
        if sources.isna().any() or targets.isna().any() or \
                not (sources.between(0, m - 1).all() and targets.between(0, m - 1).all()):
            raise UserError(f"'{path}' has node ids outside 0..{m - 1}.")
        if not ((sources % 1 == 0).all() and (targets % 1 == 0).all()):
            raise UserError(f"'{path}' has node ids that are not integers.")
        rows, cols, size = sources.to_numpy(dtype=int), targets.to_numpy(dtype=int), m
    else:
        labels = _sorted_labels(pd.concat([frame.iloc[:, 0], frame.iloc[:, 1]]))
        index = {label: position for position, label in enumerate(labels)}
        rows = frame.iloc[:, 0].map(index).to_numpy(dtype=int)
        cols = frame.iloc[:, 1].map(index).to_numpy(dtype=int)
        size = len(labels)
    a = np.zeros((size, size), dtype=int)
    a[rows, cols] = 1
    return BinaryNetwork(a, diagonal_meaningful)


def read_adjacency(path: str, diagonal_meaningful: bool = True) -> BinaryNetwork:
    """Read a dense 0/1 adjacency matrix."""
    return BinaryNetwork(read_dense_matrix(path).entries, diagonal_meaningful)
