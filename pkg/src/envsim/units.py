"""Size and time constants shared across the simulator."""

PAGE_SIZE = 4096
KiB = 1024
MiB = 1024 * KiB
GiB = 1024 * MiB

US_PER_MS = 1000.0
US_PER_S = 1_000_000.0


def pages_for(nbytes: int) -> int:
    """Number of 4 KiB pages needed to hold ``nbytes``."""
    return -(-int(nbytes) // PAGE_SIZE)
