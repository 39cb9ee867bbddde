"""Error type shared across the package."""


class ChunkflowError(Exception):
    """Raised with a short machine-readable ``code`` (e.g. ``"codec-shape"``)."""

    def __init__(self, code: str, message: str = ""):
        self.code = code
        super().__init__(f"{code}: {message}" if message else code)
