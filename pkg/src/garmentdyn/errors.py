"""Exception types raised across the package."""


class GarmentDynError(Exception):
    """Base class for all package errors."""


class MalformedAsset(GarmentDynError):
    pass


class DegenerateElement(GarmentDynError):
    def __init__(self, index, message=None):
        self.index = index
        super().__init__(message or f"degenerate element {index}")


class UnknownPreset(GarmentDynError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class InvalidMaterial(GarmentDynError, ValueError):
    pass


class NonManifold(GarmentDynError):
    def __init__(self, edge):
        self.edge = tuple(edge)
        super().__init__(f"edge {self.edge} has more than two incident triangles")


class NumericalFailure(GarmentDynError):
    """Raised when a solve produces NaN/Inf or breaks down.

    ``partial`` carries whatever result existed at the point of failure
    (a PCG iterate, a partial trajectory, ...).
    """

    def __init__(self, message, partial=None):
        self.partial = partial
        super().__init__(message)


class SingularBlock(GarmentDynError):
    def __init__(self, level, block):
        self.level = level
        self.block = block
        super().__init__(f"singular preconditioner block {block} on level {level}")


class UntangleFailed(GarmentDynError):
    """Penetrations remain after the allowed number of untangling passes.

    ``positions`` holds the best-effort corrected positions.
    """

    def __init__(self, message, positions=None, count=0):
        self.positions = positions
        self.count = count
        super().__init__(message)


class EmptyPointSet(GarmentDynError, ValueError):
    pass


class DegenerateRegistration(GarmentDynError):
    pass


class NoOverlap(GarmentDynError):
    pass


class InvalidScript(GarmentDynError, ValueError):
    pass
