"""Exception hierarchy.  ``exit_code`` is what the CLI returns for each family."""


class ParidError(Exception):
    exit_code = 1


class InvalidInput(ParidError, ValueError):
    exit_code = 2


class NumericalFailure(ParidError):
    exit_code = 3


class SingularConfiguration(NumericalFailure):
    def __init__(self, msg, cond=None, time=None):
        super().__init__(msg)
        self.cond = cond
        self.time = time


class NoConvergence(NumericalFailure):
    pass


class RankDeficient(NumericalFailure):
    pass


class RankUnstable(NumericalFailure):
    pass


class NeverFeasible(NumericalFailure):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


class InfeasibleSample(NumericalFailure):
    pass


class NoFeasiblePoint(NumericalFailure):
    pass


class StepFailure(NumericalFailure):
    def __init__(self, msg, time=None):
        super().__init__(msg)
        self.time = time


class SingularMass(NumericalFailure):
    pass
