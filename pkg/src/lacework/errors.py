"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class TrainingDivergence(RuntimeError):
    """A non-finite value appeared during optimization.

    ``where`` names the op or training phase that produced it.
    """

    def __init__(self, where: str, detail: str = ""):
        self.where = where
        msg = f"non-finite value in {where}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class BufferEmpty(RuntimeError):
    """A replay store was sampled before being warm-started."""
