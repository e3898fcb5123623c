"""
Writers for run artifacts: CSV tables, JSON sidecars, value-function tables and run manifests.
Floats are written with repr precision so identical runs produce identical bytes.
"""
import csv
import hashlib
import json
import logging
import platform
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from levyfbsde.errors import InterpolationError
from levyfbsde.forward_flow import PathBatch, PathRecord
from levyfbsde.value_function import ValueFunction

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '.17g'


def _cell(value):
    if isinstance(value, (bool, np.bool_)):
        return 'true' if value else 'false'
    if isinstance(value, (float, np.floating)):
        return format(float(value), FLOAT_FORMAT)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ''
    return str(value)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if np.isfinite(value) else str(value)
    return obj


def write_csv(path: Union[str, Path], rows: Sequence[Dict], fieldnames: Optional[List[str]] = None) -> Path:
    """Rows to CSV; columns in first-seen order unless given"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = []
        for row in rows:
            fieldnames.extend(k for k in row if k not in fieldnames)
    with path.open('w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(row.get(k)) for k in fieldnames})
    return path


def read_csv(path: Union[str, Path]) -> List[Dict[str, str]]:
    with Path(path).open(newline='') as fh:
        return list(csv.DictReader(fh))


def write_json(path: Union[str, Path], obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + '\n')
    return path


def read_json(path: Union[str, Path]):
    return json.loads(Path(path).read_text())


def sha256_file(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Path dumps
# ---------------------------------------------------------------------------

def dump_paths(paths: Union[PathBatch, Iterable[PathRecord]], stem: Union[str, Path],
               meta: Optional[Dict] = None) -> Path:
    """
    One CSV row per (record, grid node): record index, path id, time, jump flag, mark, state
    and flattened Jacobian; the JSON sidecar carries one origin per record, the horizon and
    the stream key. Multi-start batches reuse path ids, so the record index is the row key.
    """
    records = [paths.path(i) for i in range(paths.n_paths)] if isinstance(paths, PathBatch) else list(paths)
    rows = []
    for i, rec in enumerate(records):
        d = len(rec.origin_x)
        pid = rec.seed[-1] if rec.seed else 0
        for k in range(len(rec.grid)):
            row = {'record': i, 'path_id': pid, 'k': k, 'time': rec.grid[k], 'is_jump': bool(rec.is_jump[k])}
            row.update({f'mark_{a}': rec.marks[k, a] for a in range(d)})
            row.update({f'x_{a}': rec.states[k, a] for a in range(d)})
            row.update({f'jac_{a}{b}': rec.jacobians[k, a, b] for a in range(d) for b in range(d)})
            rows.append(row)
    stem = Path(stem)
    csv_path = write_csv(stem.with_suffix('.csv'), rows)
    write_json(stem.with_suffix('.json'), {
        'n_paths': len(records),
        'origins': [{'record': i, 'path_id': rec.seed[-1] if rec.seed else 0, 'x': rec.origin_x}
                    for i, rec in enumerate(records)],
        'origin_t': records[0].origin_t if records else None,
        'horizon': records[0].horizon if records else None,
        'stream': list(records[0].seed[:-1]) if records and records[0].seed else [],
        'invalid_records': [i for i, rec in enumerate(records) if not rec.valid],
        **(meta or {}),
    })
    logger.info("wrote %d paths to %s", len(records), csv_path)
    return csv_path


# ---------------------------------------------------------------------------
# Value functions
# ---------------------------------------------------------------------------

def save_value_function(v: ValueFunction, stem: Union[str, Path], extra: Optional[Dict] = None) -> Path:
    """Table rows (t, x_0..x_{d-1}, value) plus a JSON sidecar describing the grid"""
    pts = v.grid_points()
    rows = []
    for j, s in enumerate(v.times):
        vals = v.slice_values(j)
        for g in range(len(pts)):
            row = {'t': s}
            row.update({f'x_{a}': pts[g, a] for a in range(v.dim)})
            row['value'] = vals[g]
            rows.append(row)
    stem = Path(stem)
    csv_path = write_csv(stem.with_suffix('.csv'), rows)
    write_json(stem.with_suffix('.json'), {
        'label': v.label,
        'times': v.times,
        'axes': [a for a in v.axes],
        'growth_degree': v.growth_degree,
        'exit_fraction': v.exit_fraction,
        **(extra or {}),
    })
    return csv_path


def load_value_function(stem: Union[str, Path]) -> ValueFunction:
    stem = Path(stem)
    meta = read_json(stem.with_suffix('.json'))
    times = np.asarray(meta['times'], dtype=float)
    axes = tuple(np.asarray(a, dtype=float) for a in meta['axes'])
    rows = read_csv(stem.with_suffix('.csv'))
    shape = (len(times),) + tuple(len(a) for a in axes)
    if len(rows) != int(np.prod(shape)):
        raise InterpolationError(f"{stem}: {len(rows)} rows for a grid of shape {shape}")
    values = np.array([float(r['value']) for r in rows]).reshape(shape)
    return ValueFunction(times, axes, values, meta.get('label', 'v'), int(meta.get('growth_degree', 1)))


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def write_manifest(out_dir: Union[str, Path], cfg_hash: str, version: str, wall_time: float,
                   criteria: Sequence[Dict], artifacts: Sequence[Union[str, Path]],
                   extra: Optional[Dict] = None) -> Path:
    """manifest.json: config hash, code version, wall time, per-criterion results, artifact hashes"""
    out_dir = Path(out_dir)
    files = []
    for art in artifacts:
        art = Path(art)
        if art.exists():
            files.append({'path': str(art.relative_to(out_dir) if art.is_relative_to(out_dir) else art),
                          'sha256': sha256_file(art)})
    return write_json(out_dir / 'manifest.json', {
        'config_hash': cfg_hash,
        'code_version': version,
        'python': platform.python_version(),
        'numpy': np.__version__,
        'wall_time_s': round(wall_time, 3),
        'criteria': list(criteria),
        'passed': all(c.get('status') in ('pass', 'skipped') for c in criteria),
        'artifacts': files,
        **(extra or {}),
    })
