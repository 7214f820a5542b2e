"""Exception types shared across the package."""


class P1GibbsError(Exception):
    pass


class EmptySpace(P1GibbsError):
    """Requested section space has dimension zero."""


class DivergentIntegral(P1GibbsError):
    pass


class NotPositiveDefinite(P1GibbsError):
    pass


class SingularState(P1GibbsError):
    """Evaluation matrix of a chain became numerically singular."""


class NonFiniteDensityEverywhere(P1GibbsError):
    pass


class NoConvergence(P1GibbsError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = list(trace) if trace is not None else []


class NotKlt(P1GibbsError):
    pass


class NonPositiveDensity(P1GibbsError):
    pass


class ConfigError(P1GibbsError):
    def __init__(self, msg, field=None, line=None):
        loc = []
        if field:
            loc.append(f"field {field}")
        if line is not None:
            loc.append(f"line {line}")
        super().__init__(f"{msg} ({', '.join(loc)})" if loc else msg)
        self.field = field
        self.line = line


class GridMismatch(P1GibbsError):
    pass
