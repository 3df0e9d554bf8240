class NearStoreError(Exception):
    """
    base for every error raised by the nearstore apps
    """
