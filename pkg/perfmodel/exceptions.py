from nearstore.exceptions import NearStoreError


class DomainError(NearStoreError, ValueError):
    """
    argument outside the domain of a closed form
    """


class PresetNotFound(NearStoreError, KeyError):
    pass
