"""
Artifact writers: the JSON run report, per-check CSV tables and the pass/fail manifest.
"""

import json
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd

from config import FILE_PATTERNS

logger = logging.getLogger(__name__)


def to_jsonable(value):
    """
    Convert numpy scalars/arrays and non-finite floats into plain JSON values.

    inf and nan become the strings "inf", "-inf" and "nan" so the report stays strict JSON.
    """
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return 'nan'
        if math.isinf(value):
            return 'inf' if value > 0 else '-inf'
        return value
    return value


def write_report(report: dict, dir_out: str) -> Path:
    """
    Write the run report as JSON with sorted keys.

    Args:
        report: Report dictionary
        dir_out: Output directory path

    Returns:
        Path of the written file
    """
    try:
        output_dir = Path(dir_out)
        output_dir.mkdir(parents=True, exist_ok=True)
        file_path = output_dir / FILE_PATTERNS['report']
        text = json.dumps(to_jsonable(report), sort_keys=True, indent=2, allow_nan=False)
        file_path.write_text(text + '\n', encoding='utf-8')
        logger.info(f"Successfully wrote report to: {file_path}")
        return file_path
    except OSError as e:
        logger.error(f"Error writing report to {dir_out}: {e}")
        raise


def write_table(df: pd.DataFrame, dir_out: str, name: str) -> Path:
    """
    Write one result table to CSV.

    Args:
        df: Table
        dir_out: Output directory path
        name: Table name (file stem)

    Returns:
        Path of the written file
    """
    try:
        output_dir = Path(dir_out)
        output_dir.mkdir(parents=True, exist_ok=True)
        file_path = output_dir / FILE_PATTERNS['table'].format(name=name)
        df.to_csv(file_path, index=False, encoding='utf-8')
        logger.info(f"Table written: {file_path}")
        return file_path
    except OSError as e:
        logger.error(f"Error writing table {name}: {e}")
        raise


def write_manifest(checks: list, dir_out: str) -> Path:
    """Write the (check, passed) manifest."""
    try:
        output_dir = Path(dir_out)
        output_dir.mkdir(parents=True, exist_ok=True)
        file_path = output_dir / FILE_PATTERNS['manifest']
        frame = pd.DataFrame({'check': [c['name'] for c in checks], 'passed': [bool(c['passed']) for c in checks]})
        frame.to_csv(file_path, index=False, encoding='utf-8')
        logger.info(f"Manifest written: {file_path}")
        return file_path
    except OSError as e:
        logger.error(f"Error writing manifest to {dir_out}: {e}")
        raise
