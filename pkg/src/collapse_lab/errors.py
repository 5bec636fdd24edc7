"""Error type shared by all modules.

Every failure raised by the library carries a short machine-readable code
(for example ``"dim-mismatch"``) so that the command-line front end can map
it to an exit status and an error report.
"""

from __future__ import annotations

from typing import Any


class CollapseLabError(Exception):
    """Library error carrying a stable string code.

    Args:
        code: Machine-readable error code.
        message: Human-readable explanation.
        module: Name of the module that raised the error.
        **detail: Extra diagnostic values (offending eigenvalue, residual
            history, seed, ...). They are exposed as ``self.detail``.
    """

    def __init__(self, code: str, message: str = "", module: str = "", **detail: Any):
        self.code = code
        self.module = module
        self.detail = detail
        text = f"[{code}] {message}" if message else f"[{code}]"
        super().__init__(text)
