"""
Device backends for the emulated CSDs. One byte space per device, all writes
go through `StorageBackend.write` so alignment is checked and announced in a
single place.
"""
import logging
import os
from pathlib import Path

from django.conf import settings

from .exceptions import CapacityError, DirectIOError
from .signals import storage_write

logger = logging.getLogger("django")


class StorageBackend:
    kind = None

    def __init__(self, enforce_alignment: bool = None):
        self.block = settings.DIRECT_IO_BLOCK_BYTES
        self.enforce_alignment = settings.KV_ENFORCE_DIRECT_IO if enforce_alignment is None else enforce_alignment
        self.device_bytes = []

    def allocate(self, device_bytes: list) -> None:
        self.device_bytes = list(device_bytes)
        self._allocate()

    def write(self, device_id: int, offset: int, payload: bytes, reason: str = 'entry') -> None:
        size = len(payload)
        storage_write.send(sender=self.__class__, device_id=device_id, offset=offset, size=size, reason=reason)
        if self.enforce_alignment and (offset % self.block or size % self.block):
            raise DirectIOError(
                f"unaligned {reason} write on device {device_id}: offset {offset}, size {size}")
        self._check_bounds(device_id, offset, size)
        self._write(device_id, offset, payload)

    def read(self, device_id: int, offset: int, size: int) -> bytes:
        self._check_bounds(device_id, offset, size)
        return self._read(device_id, offset, size)

    def close(self) -> None:
        pass

    def _check_bounds(self, device_id: int, offset: int, size: int) -> None:
        if not 0 <= device_id < len(self.device_bytes):
            raise CapacityError(f"device {device_id} was never allocated")
        if offset < 0 or offset + size > self.device_bytes[device_id]:
            raise CapacityError(
                f"access [{offset}, {offset + size}) outside the {self.device_bytes[device_id]} bytes of device {device_id}")

    def _allocate(self) -> None:
        raise NotImplementedError

    def _write(self, device_id: int, offset: int, payload: bytes) -> None:
        raise NotImplementedError

    def _read(self, device_id: int, offset: int, size: int) -> bytes:
        raise NotImplementedError


class MemoryBackend(StorageBackend):
    kind = 'memory'

    def _allocate(self) -> None:
        self.devices = [bytearray(size) for size in self.device_bytes]

    def _write(self, device_id, offset, payload):
        self.devices[device_id][offset:offset + len(payload)] = payload

    def _read(self, device_id, offset, size):
        return bytes(self.devices[device_id][offset:offset + size])


class FileBackend(StorageBackend):
    """
    one sparse, preallocated file per emulated CSD
    """
    kind = 'file'

    def __init__(self, directory=None, pattern: str = None, enforce_alignment: bool = None):
        super().__init__(enforce_alignment)
        self.directory = Path(directory or settings.KV_DEVICE_DIR)
        self.pattern = pattern or settings.KV_DEVICE_PATH_PATTERN
        self.descriptors = []

    def path(self, device_id: int) -> Path:
        return self.directory / self.pattern.format(device_id=device_id)

    def _allocate(self) -> None:
        self.close()
        self.directory.mkdir(parents=True, exist_ok=True)
        for device_id, size in enumerate(self.device_bytes):
            fd = os.open(self.path(device_id), os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
            os.ftruncate(fd, size)
            self.descriptors.append(fd)
        logger.info(f"allocated {len(self.descriptors)} device files under {self.directory}")

    def _write(self, device_id, offset, payload):
        os.pwrite(self.descriptors[device_id], payload, offset)

    def _read(self, device_id, offset, size):
        return os.pread(self.descriptors[device_id], size, offset)

    def close(self) -> None:
        for fd in self.descriptors:
            os.close(fd)
        self.descriptors = []


BACKENDS = {
    MemoryBackend.kind: MemoryBackend,
    FileBackend.kind: FileBackend,
}


def make_backend(kind: str = None) -> StorageBackend:
    kind = kind or settings.KV_BACKEND
    try:
        return BACKENDS[kind]()
    except KeyError:
        raise ValueError(f"unknown KV backend {kind!r}, expected one of {sorted(BACKENDS)}")
