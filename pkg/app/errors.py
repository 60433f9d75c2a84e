from typing import List, Optional, Sequence, Tuple


class AtomFlowError(Exception):
    """Base class for all errors raised by AtomFlow"""


class ValidationFailure(AtomFlowError):
    """Bad input, bad configuration or bad files (CLI exit code 1)"""


class DomainFieldMismatch(ValidationFailure):
    """Molecule carrying periodic fields, or material missing them"""


class RangeError(ValidationFailure):
    """A value lies outside its admissible interval"""


class ShapeError(ValidationFailure):
    """Array or tensor shapes disagree"""


class NonFiniteInput(ValidationFailure):
    """NaN or infinite values in an input"""


class DegenerateCell(ValidationFailure):
    """Lattice volume at or below the degeneracy threshold"""

    def __init__(self, volume: float):
        self.volume = volume
        super().__init__(f"Degenerate cell: volume {volume:.3e} Å³")


class EmptyBatch(ValidationFailure):
    """No systems supplied for a training batch"""


class DomainMismatch(ValidationFailure):
    """Operation applied to the wrong domain or mismatched outputs"""


class UnsupportedGroup(ValidationFailure):
    """Unknown finite rotation group name"""


class UnsupportedDomain(ValidationFailure):
    """Model variant cannot handle the requested domain"""


class UnsupportedVariant(ValidationFailure):
    """Model variant cannot run the requested operation"""


class InfeasibleWidth(ValidationFailure):
    """Channel matching produced fewer channels than heads"""


class TimeOutOfRange(ValidationFailure):
    """Flow time outside the interval a step is defined on"""


class TapOutOfRange(ValidationFailure):
    """Tap layer beyond the trunk depth"""


class AllMasked(ValidationFailure):
    """Every label in the batch is masked out"""


class EmptyInput(ValidationFailure):
    """Nothing to evaluate"""


class UsageError(ValidationFailure):
    """Bad command-line usage"""


class ParseError(ValidationFailure):
    """Malformed dataset or structure file"""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.message = message
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
        if line is not None:
            where = f"{where}:{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class UnknownElement(ParseError):
    """Element symbol not in the periodic table"""


class SchemaVersionError(ValidationFailure):
    """File format with an unsupported major version"""

    def __init__(self, found: str, supported: str):
        self.found = found
        self.supported = supported
        super().__init__(f"Unsupported format version {found} (supported major: {supported})")


class ChecksumError(ValidationFailure):
    """Checkpoint blob is truncated or corrupted"""


class ConfigMismatch(ValidationFailure):
    """Checkpoint tensors do not fit the model built from the config"""

    def __init__(self, mismatches: Sequence[Tuple[str, Optional[tuple], Optional[tuple]]]):
        self.mismatches: List[Tuple[str, Optional[tuple], Optional[tuple]]] = list(mismatches)
        lines = [f"  {name}: checkpoint {found} vs model {expected}" for name, found, expected in self.mismatches]
        super().__init__("Checkpoint does not match model config:\n" + "\n".join(lines))


class NonFiniteActivation(AtomFlowError):
    """NaN/Inf in activations or losses; training diverged"""

    def __init__(self, where: str, step: Optional[int] = None):
        self.where = where
        self.step = step
        suffix = f" at step {step}" if step is not None else ""
        super().__init__(f"Non-finite values in {where}{suffix}")


def exit_code_for(error: BaseException) -> int:
    """CLI exit code: 1 for validation errors, 2 for runtime failures"""
    if isinstance(error, (ValidationFailure, FileNotFoundError)):
        return 1
    try:
        from pydantic import ValidationError
    except ImportError:  # pragma: no cover
        return 2
    return 1 if isinstance(error, ValidationError) else 2
