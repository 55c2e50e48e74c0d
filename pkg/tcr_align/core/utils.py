import os
import torch

_num_threads = None


def set_num_threads(num_threads: int) -> None:
    """
    Set the maximum number of CPU threads used by feature extraction and the linear solvers.

    Arguments:
        num_threads: the desired thread count, at least 1.
    """
    global _num_threads
    assert 0 < num_threads <= (os.cpu_count() or num_threads)
    _num_threads = num_threads
    torch.set_num_threads(num_threads)


def get_num_threads() -> int:
    """
    Get the current thread limit.
    If the count is never specified, `TCR_NUM_THREADS` is honored, otherwise torch's default is kept.

    Returns:
        Current thread limit.
    """
    global _num_threads
    if _num_threads is None:
        if os.getenv('TCR_NUM_THREADS'):
            set_num_threads(int(os.getenv('TCR_NUM_THREADS')))
        else:
            _num_threads = torch.get_num_threads()
    return _num_threads


def get_chunk_size() -> int:
    """
    Rows of shape estimates processed per feature-extraction chunk.
    Chunking bounds peak memory only; every row is computed independently, so results do not depend on it.

    Returns:
        `TCR_CHUNK_SIZE` if set, 64 otherwise.
    """
    chunk_size = int(os.getenv('TCR_CHUNK_SIZE', 64))
    assert chunk_size > 0, f'Invalid TCR_CHUNK_SIZE {chunk_size}'
    return chunk_size


def ceil_div(x: int, y: int) -> int:
    """
    Perform ceiling division of two integers.

    Args:
        x: the dividend.
        y: the divisor.

    Returns:
        The result of the ceiling division.
    """
    return (x + y - 1) // y
