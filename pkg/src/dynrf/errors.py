"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input violates an operation's precondition."""


class DatasetError(Exception):
    """Base class for dataset loading failures."""


class ManifestError(DatasetError):
    """The manifest is missing, malformed or inconsistent."""


class MissingFileError(DatasetError, FileNotFoundError):
    """An image referenced by the manifest does not exist."""


class ImageDecodeError(DatasetError):
    """An image file exists but cannot be decoded."""

    def __init__(self, path, reason=""):
        self.path = str(path)
        super().__init__(f"cannot decode image {self.path}: {reason}".rstrip(": "))


class ShapeMismatchError(DatasetError):
    """An image on disk does not match the size declared by the manifest."""


class CheckpointError(Exception):
    """A checkpoint blob is malformed."""
