import io
import json
import math
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd

FLOAT_FORMAT = "%.9g"
SIGNIFICANT_DIGITS = 9

PathLike = Union[str, Path]


def _prepare(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def to_jsonable(value: Any) -> Any:
    """
    Convert nested containers of numpy/python scalars to JSON-ready values,
    rounding floats to 9 significant digits. Non-finite floats become null.
    """
    if isinstance(value, dict):
        return {str(key): to_jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, bool) or value is None or isinstance(value, (int, str)):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            return None
        return float(f"{value:.{SIGNIFICANT_DIGITS}g}")
    return str(value)


def write_json(data: Any, path: PathLike):
    _prepare(path).write_text(json.dumps(to_jsonable(data), indent=2) + "\n")


def write_csv(df: pd.DataFrame, path: PathLike):
    df.to_csv(_prepare(path), index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_matrix_csv(matrix: np.ndarray, path: PathLike):
    """Raw matrix, one row per line, no header"""
    np.savetxt(_prepare(path), np.asarray(matrix, dtype=np.float64), fmt=FLOAT_FORMAT, delimiter=",")


def write_pgm(matrix: np.ndarray, path: PathLike):
    """
    8-bit binary PGM (P5) of matrix, min-max normalized to 0..255.
    A constant matrix is written as all zeros.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D matrix, got shape {m.shape}")
    lo, hi = float(m.min()), float(m.max())
    if hi > lo:
        pixels = np.rint((m - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.zeros(m.shape, dtype=np.uint8)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii")
    _prepare(path).write_bytes(header + pixels.tobytes())


def export_multiple_sheets(data_dict: Dict[str, pd.DataFrame]) -> bytes:
    """
    Export multiple DataFrames to different sheets in one Excel file

    Args:
        data_dict: Dictionary with sheet names as keys and DataFrames as values

    Returns:
        Excel file as bytes
    """
    output = io.BytesIO()

    with pd.ExcelWriter(output, engine='xlsxwriter') as writer:
        workbook = writer.book

        header_format = workbook.add_format({
            'bold': True,
            'text_wrap': True,
            'valign': 'top',
            'fg_color': '#D7E4BC',
            'border': 1
        })
        percentage_format = workbook.add_format({'num_format': '0.00%'})

        for sheet_name, df in data_dict.items():
            if df.empty:
                continue

            # pivot tables carry their row labels in the index
            keep_index = df.index.name is not None
            df.to_excel(writer, sheet_name=sheet_name, index=keep_index)
            worksheet = writer.sheets[sheet_name]

            columns = ([df.index.name] if keep_index else []) + [str(col) for col in df.columns]
            for col_num, value in enumerate(columns):
                worksheet.write(0, col_num, value, header_format)

            for i, col in enumerate(columns):
                values = df.index if keep_index and i == 0 else df[df.columns[i - keep_index]]
                max_length = max(pd.Series(values).astype(str).map(len).max(), len(col)) + 2
                worksheet.set_column(i, i, min(max_length, 50))

                if col.endswith('_acc') or (keep_index and i > 0):
                    worksheet.set_column(i, i, None, percentage_format)

    output.seek(0)
    return output.getvalue()


def write_excel(data_dict: Dict[str, pd.DataFrame], path: PathLike):
    _prepare(path).write_bytes(export_multiple_sheets(data_dict))
