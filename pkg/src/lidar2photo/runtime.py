"""Thread and determinism settings read from the environment."""

import os

import torch


def configure() -> None:
    """Apply ``L2P_THREADS`` and ``L2P_DETERMINISTIC`` to torch.

    Strict mode pins torch to one thread and deterministic kernels so two
    training runs with the same seed produce identical loss logs.
    """
    threads = os.environ.get("L2P_THREADS")
    if threads:
        n = int(threads)
        if n < 1:
            raise ValueError("L2P_THREADS must be >= 1")
        torch.set_num_threads(n)
    if strict():
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def strict() -> bool:
    return os.environ.get("L2P_DETERMINISTIC", "0") == "1"
