"""Exception types shared across the package."""


class FormatError(ValueError):
    """A file on disk does not match its declared binary layout.

    ``field`` names the header field or section that failed to parse and
    ``offset`` is the byte position where parsing stopped, when known.
    """

    def __init__(self, message, field=None, offset=None):
        self.field = field
        self.offset = offset
        parts = [message]
        if field is not None:
            parts.append(f"field={field}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts) if len(parts) == 1 else f"{message} ({', '.join(parts[1:])})")


class NumericalError(ArithmeticError):
    """A computation produced non-finite values it cannot recover from."""
