"""Exception hierarchy.

Every error carries the name of the module that raised it so CLI messages
can say where an invariant broke.
"""


class VifError(Exception):
    module = "vif"
    exit_code = 2

    def __init__(self, message, module=None):
        if module is not None:
            self.module = module
        super().__init__(f"[{self.module}] {message}")


class UsageError(VifError):
    exit_code = 1


class DimensionError(VifError):
    module = "tensor-autodiff"


class ContractError(VifError):
    pass


class InvariantError(VifError):
    pass


class LayoutError(VifError):
    pass


class VocabError(VifError):
    module = "backbone"


class PlanError(VifError):
    module = "flow-inject"


class ConfigError(VifError):
    pass


class GenerationError(VifError):
    module = "synth-tasks"


class FormatError(VifError):
    def __init__(self, message, offset=None, module=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message, module=module)


class NumericError(VifError):
    exit_code = 3


class DomainError(NumericError):
    module = "tensor-autodiff"
