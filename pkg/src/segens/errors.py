"""Exception hierarchy shared by every segens module."""


class SegensError(Exception):
    """Base class for all errors raised by segens."""


class NonFiniteLogit(SegensError):
    def __init__(self, field, index):
        self.field = field
        self.index = tuple(int(i) for i in index)
        super().__init__(f"non-finite value in {field} at index {self.index}")


class ShapeMismatch(SegensError):
    pass


class EmptyTensor(SegensError):
    pass


class WrongTransform(SegensError):
    pass


class DegenerateTarget(SegensError):
    pass


class MissingFlow(SegensError):
    pass


class MixedClassCount(SegensError):
    pass


class EmptyEnsemble(SegensError):
    pass


class NoSamples(SegensError):
    pass


class EmptyInput(SegensError):
    pass


class DegenerateLabels(SegensError):
    pass


class NoValidClasses(SegensError):
    pass


class Unplaceable(SegensError):
    pass


class FormatError(SegensError):
    """Base for binary container decoding failures."""


class BadMagic(FormatError):
    pass


class BadVersion(FormatError):
    pass


class Truncated(FormatError):
    def __init__(self, path, offset):
        self.offset = int(offset)
        super().__init__(f"{path}: truncated at byte offset {self.offset}")


class ParseError(SegensError):
    def __init__(self, path, line, reason):
        self.line = line
        super().__init__(f"{path}:{line}: {reason}")


class MissingFile(SegensError):
    pass


class DuplicateId(SegensError):
    pass


class MissingBaseline(SegensError):
    pass
