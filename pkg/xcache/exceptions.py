from nearstore.exceptions import NearStoreError


class XCacheRangeError(NearStoreError, IndexError):
    """
    token index outside the cached prefix
    """


class XCacheConflict(NearStoreError):
    """
    a cached row was rewritten with different values
    """
