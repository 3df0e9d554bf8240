from nearstore.exceptions import NearStoreError


class ShapeError(NearStoreError, ValueError):
    """
    operand dimensions do not line up
    """


class NumericDomainError(NearStoreError, ArithmeticError):
    """
    a non-finite value entered or left a kernel
    """


class ContractViolation(NearStoreError):
    """
    caller broke a documented precondition, e.g. softmax with valid_len = 0
    """
