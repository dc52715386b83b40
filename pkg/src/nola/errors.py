"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument is outside the operation's domain (bad shape, count, range)."""


class FormatError(ValueError):
    """A serialized blob or data file is malformed.

    ``offset`` is the byte position where decoding failed.  ``layer_index``
    (position in the file) and ``layer_id`` identify the layer record being
    decoded, when known.
    """

    def __init__(self, message, offset=None, layer_id=None, layer_index=None):
        parts = [message]
        if layer_index is not None:
            parts.append(f"layer #{layer_index}")
        if layer_id is not None:
            parts.append(f"layer_id={layer_id}")
        if offset is not None:
            parts.append(f"offset={offset}")
        super().__init__(" ".join(parts) if len(parts) == 1 else f"{parts[0]} ({', '.join(parts[1:])})")
        self.offset = offset
        self.layer_id = layer_id
        self.layer_index = layer_index


class VersionError(FormatError):
    """A checkpoint declares a format version this build cannot read."""


class UsageError(DomainError):
    """Command-line flags are inconsistent or point at missing inputs."""
