"""Exception types. Each carries the process exit code the CLI reports."""


class PhiError(Exception):
    exit_code = 1


class ShapeError(PhiError, ValueError):
    exit_code = 3


class NonFiniteError(PhiError, FloatingPointError):
    exit_code = 4

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value produced by {op}"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class ConfigError(PhiError, ValueError):
    exit_code = 2


class FormatError(PhiError):
    exit_code = 5


class BadMagicError(FormatError):
    def __init__(self, path, found=b""):
        super().__init__(f"bad magic in {path}: {found!r}")


class VersionMismatchError(FormatError):
    def __init__(self, path, found, expected):
        super().__init__(f"version mismatch in {path}: found {found}, expected {expected}")


class TruncatedPayloadError(FormatError):
    def __init__(self, path, detail=""):
        super().__init__(f"truncated payload in {path}" + (f": {detail}" if detail else ""))


class FingerprintMismatchError(PhiError):
    exit_code = 6
