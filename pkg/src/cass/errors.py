"""Error type shared by every stage of the scanner pipeline."""

from __future__ import annotations


class CassError(ValueError):
    """Failure with a stable, machine-readable ``code``.

    The code is what the batch summary reports as a skip reason, so it is
    kept short and kebab-cased (``"no-focal-length"``, ``"malformed-ifd"``).
    """

    def __init__(self, code: str, message: str = "") -> None:
        self.code = code
        self.message = message or code
        super().__init__(f"{code}: {self.message}" if message else code)
