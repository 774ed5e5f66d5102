"""Exception types shared across the toolkit.

Everything derives from ``MMCoTError`` so callers can catch the whole
family; the subclasses inherit from the closest builtin so untyped code
keeps working (e.g. ``except ValueError``).
"""


class MMCoTError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(MMCoTError, ValueError):
    """Array dimensions disagree with an operation's contract."""


class NonFiniteError(MMCoTError, ValueError):
    """A NaN or Inf value appeared where only finite values are allowed."""


class ContractError(MMCoTError, ValueError):
    """An operation was called outside its stated preconditions."""


class ParameterError(MMCoTError, ValueError):
    """A configuration value or hyperparameter is out of range."""


class DegenerateInputError(MMCoTError, ValueError):
    """Input is structurally valid but degenerate (zero vector, empty batch)."""


class VocabularyError(MMCoTError, ValueError):
    """Token id outside the vocabulary, or vocabulary capacity exceeded."""


class FileFormatError(MMCoTError, ValueError):
    """A tensor/checkpoint/corpus file does not match the expected layout."""


class TrainingDivergedError(MMCoTError, RuntimeError):
    """Training produced a non-finite loss; aborted with diagnostics."""


class GenerationError(MMCoTError, RuntimeError):
    """The external rationale generator failed for a record."""


class JournalCorruptError(MMCoTError, RuntimeError):
    """The curation progress journal could not be parsed; refusing to resume."""


class UnknownIdError(MMCoTError, KeyError):
    """A review decision or prediction references an id not in the corpus."""
