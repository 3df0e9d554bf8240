from nearstore.exceptions import NearStoreError


class SpecError(NearStoreError, ValueError):
    """
    a model spec or placement request with non-positive counts
    """


class CapacityError(NearStoreError):
    """
    an extent or a device ran out of preallocated space
    """


class ProtocolError(NearStoreError):
    """
    the writeback protocol was broken, e.g. a spill was missed
    """


class StripNotFound(NearStoreError, LookupError):
    pass


class DirectIOError(NearStoreError):
    """
    a device write that is not 512 byte aligned in offset and size
    """
