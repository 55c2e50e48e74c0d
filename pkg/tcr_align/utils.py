import hashlib
import os
import time
import uuid
from typing import Union


def bench(fn, num_warmups: int = 1, num_tests: int = 3) -> float:
    """
    Average wall time of `fn()` in seconds.
    """
    for _ in range(num_warmups):
        fn()

    start = time.perf_counter()
    for _ in range(num_tests):
        fn()
    return (time.perf_counter() - start) / num_tests


def calc_diff(x, y):
    x, y = x.double(), y.double()
    denominator = (x * x + y * y).sum()
    if denominator == 0:
        return denominator
    sim = 2 * (x * y).sum() / denominator
    return 1 - sim


def hash_to_hex(s: Union[str, bytes]) -> str:
    md5 = hashlib.md5()
    md5.update(s.encode('utf-8') if isinstance(s, str) else s)
    return md5.hexdigest()[0:12]


def hash_file(path: str) -> str:
    with open(path, 'rb') as f:
        return hashlib.sha256(f.read()).hexdigest()


def put(path: str, data: Union[str, bytes], is_binary: bool = False) -> None:
    # Write and do POSIX atomic replace, staying on the destination's file system
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_file_path = f'{directory}/.file.tmp.{str(uuid.uuid4())}.{hash_to_hex(path)}'
    with open(tmp_file_path, 'wb' if is_binary else 'w', newline='' if not is_binary else None) as f:
        f.write(data)
    os.replace(tmp_file_path, path)
