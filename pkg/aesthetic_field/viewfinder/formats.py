"""
Output artifacts: PPM renders, score-colored PLY point clouds and JSON reports.
"""

import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from matplotlib import colormaps
from PIL import Image

from .aesthetic import TeacherMap, save_teacher_map
from .exceptions import DomainError
from .rasterizer import FeatureImage

logger = logging.getLogger(__name__)

RAMP_NAME = 'viridis'
RAMP_SIZE = 256


def to_bytes(values) -> np.ndarray:
    """[0, 1] floats to 8-bit, clamped, rounding half up"""
    clipped = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


def write_ppm(image: Union[FeatureImage, np.ndarray], path: Union[str, Path]):
    """Binary P6 PPM of a 3-channel planar image"""
    data = image.data if isinstance(image, FeatureImage) else np.asarray(image)
    if data.ndim != 3 or data.shape[0] != 3:
        raise DomainError(f"PPM export needs a (3, H, W) image, got shape {data.shape}")
    pixels = np.ascontiguousarray(np.transpose(to_bytes(data), (1, 2, 0)))
    Image.fromarray(pixels).save(path, format='PPM')
    logger.info(f"Wrote {data.shape[2]}x{data.shape[1]} PPM to {path}")


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    """(3, H, W) uint8 array"""
    with Image.open(path) as image:
        return np.transpose(np.asarray(image.convert('RGB')), (2, 0, 1)).copy()


def write_feature_map(image: FeatureImage, path: Union[str, Path]):
    """Full-resolution rendered features as an FMAP file without a score"""
    save_teacher_map(TeacherMap(image.data), path)


@lru_cache(maxsize=1)
def ramp_table() -> np.ndarray:
    """(256, 3) uint8 score ramp"""
    colors = colormaps[RAMP_NAME](np.arange(RAMP_SIZE))[:, :3]
    table = to_bytes(colors)
    table.setflags(write=False)
    return table


def score_colors(scores: Sequence[float]) -> np.ndarray:
    """Min-max normalize scores and look them up in the ramp; a constant series maps to mid-ramp"""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return np.zeros((0, 3), dtype=np.uint8)
    low, high = float(scores.min()), float(scores.max())
    if high > low:
        normalized = (scores - low) / (high - low)
    else:
        normalized = np.full(scores.shape, 0.5)
    index = np.floor(normalized * (RAMP_SIZE - 1) + 0.5).astype(int)
    return ramp_table()[index]


def write_ply(points, colors, path: Union[str, Path]):
    """ASCII PLY with x y z float and red green blue uchar vertex properties"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    if points.shape[0] != colors.shape[0]:
        raise DomainError(f"{points.shape[0]} points but {colors.shape[0]} colors")
    with open(path, 'w', encoding='ascii') as handle:
        handle.write('ply\n')
        handle.write('format ascii 1.0\n')
        handle.write(f'element vertex {points.shape[0]}\n')
        handle.write('property float x\n')
        handle.write('property float y\n')
        handle.write('property float z\n')
        handle.write('property uchar red\n')
        handle.write('property uchar green\n')
        handle.write('property uchar blue\n')
        handle.write('end_header\n')
        for (x, y, z), (r, g, b) in zip(points, colors):
            handle.write(f'{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}\n')
    logger.info(f"Wrote {points.shape[0]} vertices to {path}")


def read_ply(path: Union[str, Path]):
    """Points (N, 3) and colors (N, 3) from a file written by write_ply"""
    with open(path, 'r', encoding='ascii') as handle:
        lines = handle.read().splitlines()
    count = 0
    for index, line in enumerate(lines):
        if line.startswith('element vertex'):
            count = int(line.split()[-1])
        if line == 'end_header':
            body = lines[index + 1:index + 1 + count]
            break
    else:
        raise DomainError(f"{path}: missing end_header")
    values = np.array([row.split() for row in body], dtype=np.float64).reshape(count, 6)
    return values[:, :3], values[:, 3:].astype(np.uint8)


def write_json(payload, path: Union[str, Path]):
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(payload, handle, indent=2)
        handle.write('\n')
    logger.info(f"Wrote {path}")


def format_table(rows: Sequence[dict], columns: Sequence[str]) -> str:
    """Fixed-width plain-text table"""
    cells = [[_cell(row.get(column)) for column in columns] for row in rows]
    widths = [max([len(column)] + [len(r[i]) for r in cells]) for i, column in enumerate(columns)]
    lines = ['  '.join(column.ljust(width) for column, width in zip(columns, widths))]
    lines.append('  '.join('-' * width for width in widths))
    for r in cells:
        lines.append('  '.join(value.ljust(width) for value, width in zip(r, widths)))
    return '\n'.join(lines) + '\n'


def _cell(value) -> str:
    if isinstance(value, float):
        return f'{value:.4f}'
    return '' if value is None else str(value)
