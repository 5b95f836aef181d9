"""Per-stage seeds derived from one master seed."""
import hashlib


def derive_seed(stage: str, master: int) -> int:
    digest = hashlib.sha256(f"{stage}:{int(master)}".encode()).digest()
    return int.from_bytes(digest[:8], "little")
