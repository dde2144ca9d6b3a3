"""Exception hierarchy. The CLI maps these onto exit codes."""


class LocInvError(Exception):
    exit_code = 1


class InputError(LocInvError, ValueError):
    """Bad data, shape, or contract violation supplied by the caller."""

    exit_code = 3


class NumericalError(LocInvError, FloatingPointError):
    """A non-finite value appeared during optimization or sampling."""

    exit_code = 4

    def __init__(self, message, *, stage=None, t=None, iteration=None, loss=None):
        self.stage = stage
        self.t = t
        self.iteration = iteration
        self.loss = loss
        where = ", ".join(f"{k}={v}" for k, v in
                          (("stage", stage), ("t", t), ("iter", iteration), ("loss", loss))
                          if v is not None)
        super().__init__(f"{message} [{where}]" if where else message)
