from django.dispatch import Signal
import logging

logger = logging.getLogger("django")

# sent for every write a backend is asked to issue, before alignment is enforced
# kwargs: device_id, offset, size, reason ("prefill", "entry" or "spill")
storage_write = Signal()

# sent once per spill, kwargs: rows, nbytes, epoch
kv_spilled = Signal()


class AlignmentAudit:
    """
    collects every device write while connected, used as a context manager
    """

    def __init__(self, block: int = 512):
        self.block = block
        self.writes = []

    def __call__(self, sender, device_id, offset, size, reason, **kwargs):
        self.writes.append((device_id, offset, size, reason))

    def __enter__(self):
        storage_write.connect(self, weak=False, dispatch_uid=id(self))
        return self

    def __exit__(self, *exc):
        storage_write.disconnect(dispatch_uid=id(self))
        return False

    @property
    def violations(self) -> list:
        return [w for w in self.writes if w[1] % self.block or w[2] % self.block]

    def sizes(self, reason: str) -> list:
        return [size for _, _, size, why in self.writes if why == reason]


def log_spill(sender, rows, nbytes, epoch, **kwargs):
    logger.debug(f"spill epoch {epoch}: {rows} rows, {nbytes} bytes issued")


kv_spilled.connect(log_spill, dispatch_uid='kv_store.log_spill')
