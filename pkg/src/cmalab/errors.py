"""Exception types shared across the package."""


class CmaError(Exception):
    """Base class for every error raised by cmalab."""


class GridError(CmaError, ValueError):
    pass


class GridMismatch(CmaError, ValueError):
    pass


class PositivityLost(CmaError):
    """A metric field has a node whose smallest eigenvalue is not positive."""

    def __init__(self, node, eigenvalue):
        self.node = tuple(int(i) for i in node)
        self.eigenvalue = float(eigenvalue)
        super().__init__(f"metric not positive at node {self.node}: smallest eigenvalue {self.eigenvalue:.3e}")


class SingularMetric(CmaError):
    def __init__(self, node):
        self.node = tuple(int(i) for i in node)
        super().__init__(f"metric not invertible at node {self.node}")


class NoConvergence(CmaError):
    def __init__(self, best_residual, message="Newton iteration did not converge"):
        self.best_residual = float(best_residual)
        super().__init__(f"{message} (best residual {self.best_residual:.3e})")


class ZeroMass(CmaError, ValueError):
    pass


class DegenerateBase(CmaError, ValueError):
    pass


class InvalidFamily(CmaError, ValueError):
    pass


class EmptyDictionary(CmaError, ValueError):
    pass


class HypothesisViolated(CmaError):
    def __init__(self, pairs):
        self.pairs = [(float(s), float(r)) for s, r in pairs]
        super().__init__(f"decay hypothesis fails at {len(self.pairs)} (s, r) pairs, first {self.pairs[:3]}")


class NotVanishing(CmaError):
    def __init__(self, s, value):
        self.s = float(s)
        self.value = float(value)
        super().__init__(f"F({self.s:g}) = {self.value:.3e} > 0 beyond the vanishing threshold")


class CorruptCheckpoint(CmaError):
    pass


class UnsupportedFormat(CmaError):
    pass


class ConfigError(CmaError, ValueError):
    pass
