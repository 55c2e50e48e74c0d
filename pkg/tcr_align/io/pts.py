import math
import os
import re
from typing import List, Sequence, Tuple

from ..errors import CountMismatch, MissingFile, ParseError
from ..utils import put

Point = Tuple[float, float]

_header_pattern = re.compile(r'^\s*([A-Za-z_]+)\s*:\s*(\S+)\s*$')


def parse_pts(text: str, path: str = '<string>') -> List[Point]:
    """
    Parse a pts landmark container:

        version: 1
        n_points: N
        {
        x y
        ...
        }

    Blank lines and surrounding whitespace are ignored. Coordinates are returned as written.
    """
    lines = [(number, line.strip()) for number, line in enumerate(text.splitlines(), start=1)]
    lines = [(number, line) for number, line in lines if line]

    header = {}
    cursor = 0
    while cursor < len(lines) and lines[cursor][1] != '{':
        number, line = lines[cursor]
        match = _header_pattern.match(line)
        if match is None:
            raise ParseError(path, number, f'Expected a `key: value` header line, got {line!r}')
        header[match.group(1)] = (number, match.group(2))
        cursor += 1

    if 'version' not in header:
        raise ParseError(path, lines[0][0] if lines else 1, 'Missing `version` header')
    number, version = header['version']
    if version != '1':
        raise ParseError(path, number, f'Unsupported pts version {version!r}')
    if 'n_points' not in header:
        raise ParseError(path, number, 'Missing `n_points` header')
    number, count = header['n_points']
    if not count.isdigit():
        raise ParseError(path, number, f'Invalid point count {count!r}')
    count = int(count)
    if cursor == len(lines):
        raise ParseError(path, number, 'Missing `{` opening the point list')

    points = []
    cursor += 1
    while cursor < len(lines) and lines[cursor][1] != '}':
        number, line = lines[cursor]
        fields = line.split()
        if len(fields) != 2:
            raise ParseError(path, number, f'Expected two coordinates, got {line!r}')
        try:
            x, y = float(fields[0]), float(fields[1])
        except ValueError:
            raise ParseError(path, number, f'Invalid coordinates {line!r}')
        if not (math.isfinite(x) and math.isfinite(y)):
            raise ParseError(path, number, f'Non-finite coordinates {line!r}')
        points.append((x, y))
        cursor += 1

    if cursor == len(lines):
        raise ParseError(path, lines[-1][0], 'Missing `}` closing the point list')
    if cursor != len(lines) - 1:
        raise ParseError(path, lines[cursor + 1][0], 'Unexpected content after `}`')
    if len(points) != count:
        raise CountMismatch(f'{path}: header announces {count} points, body has {len(points)}')
    return points


def load_pts(path: str) -> List[Point]:
    if not os.path.isfile(path):
        raise MissingFile(f'Annotation file {path} does not exist')
    with open(path, 'r') as f:
        return parse_pts(f.read(), path)


def format_pts(points: Sequence[Sequence[float]]) -> str:
    # `repr` is the shortest exact round-trip representation of a float
    body = ''.join(f'{float(x)!r} {float(y)!r}\n' for x, y in points)
    return f'version: 1\nn_points: {len(points)}\n{{\n{body}}}\n'


def write_pts(path: str, points: Sequence[Sequence[float]]) -> None:
    assert all(math.isfinite(float(v)) for p in points for v in p), 'Refusing to write non-finite coordinates'
    put(path, format_pts(points))
