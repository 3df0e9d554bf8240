"""
Model dimensions and the placement of KV strips on devices.

A strip is the KV sequence of one (layer, batch element, head). Each strip
owns a K region followed by a V region on a single device, each sized for
s + n token rows and rounded up to the direct I/O block.
"""
import logging
from dataclasses import asdict, dataclass, field

from django.conf import settings

from .backends import StorageBackend, make_backend
from .exceptions import CapacityError, SpecError, StripNotFound

logger = logging.getLogger("django")


def round_up(value: int, multiple: int) -> int:
    return -(-value // multiple) * multiple


@dataclass(frozen=True)
class ModelSpec:
    layers: int
    heads: int
    head_dim: int
    batch: int
    prompt_len: int
    max_output: int
    elem_bytes: int = 2

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value < 1:
                raise SpecError(f"{name} must be a positive integer, got {value!r}")
        if self.elem_bytes != 2:
            raise SpecError(f"only binary16 elements are supported, got {self.elem_bytes} bytes")

    @property
    def hidden(self) -> int:
        return self.heads * self.head_dim

    @property
    def context(self) -> int:
        return self.prompt_len + self.max_output

    @property
    def row_bytes(self) -> int:
        return self.head_dim * self.elem_bytes

    @property
    def strips_per_layer(self) -> int:
        return self.batch * self.heads

    @property
    def strips(self) -> int:
        return self.layers * self.strips_per_layer

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class KvExtent:
    device_id: int
    byte_offset: int
    capacity_tokens: int
    row_bytes: int
    used_tokens: int = 0
    # host copy of the last partially filled sector, rewritten by the next append
    tail: bytes = field(default=b'', repr=False)

    @property
    def byte_length(self) -> int:
        return self.capacity_tokens * self.row_bytes

    @property
    def reserved_bytes(self) -> int:
        return round_up(self.byte_length, settings.DIRECT_IO_BLOCK_BYTES)


@dataclass
class ShardMap:
    spec: ModelSpec
    num_csds: int
    assignment: dict
    device_bytes: list
    backend: StorageBackend = field(repr=False, default=None)
    ledger: object = field(repr=False, default=None)

    def strip(self, layer: int, batch_idx: int, head_idx: int) -> tuple:
        try:
            return self.assignment[(layer, batch_idx, head_idx)]
        except KeyError:
            raise StripNotFound(f"no strip for layer {layer}, batch {batch_idx}, head {head_idx}")

    def strips_per_device(self) -> list:
        counts = [0] * self.num_csds
        for k_extent, _ in self.assignment.values():
            counts[k_extent.device_id] += 1
        return counts

    def close(self) -> None:
        if self.backend is not None:
            self.backend.close()


def plan_shards(spec: ModelSpec, num_csds: int, backend: StorageBackend = None, ledger=None,
                capacity_bytes: int = None) -> ShardMap:
    """
    Round-robin the strips over the devices, batch index fastest, then head,
    then layer, and preallocate every extent. Allocation on a device is
    sequential so extents never overlap.
    """
    if not isinstance(num_csds, int) or num_csds < 1:
        raise SpecError(f"num_csds must be at least 1, got {num_csds!r}")
    capacity = settings.KV_DEVICE_CAPACITY_BYTES if capacity_bytes is None else capacity_bytes
    cursor = [0] * num_csds
    assignment = {}
    index = 0
    for layer in range(spec.layers):
        for head in range(spec.heads):
            for batch in range(spec.batch):
                device = index % num_csds
                index += 1
                extents = []
                for _ in ('k', 'v'):
                    extent = KvExtent(device_id=device, byte_offset=cursor[device],
                                      capacity_tokens=spec.context, row_bytes=spec.row_bytes)
                    cursor[device] += extent.reserved_bytes
                    extents.append(extent)
                if cursor[device] > capacity:
                    raise CapacityError(
                        f"device {device} needs more than its {capacity} bytes for layer {layer}")
                assignment[(layer, batch, head)] = tuple(extents)
    backend = backend or make_backend()
    backend.allocate(cursor)
    logger.info(f"planned {len(assignment)} strips over {num_csds} CSDs, "
                f"{max(cursor)} bytes on the fullest device")
    return ShardMap(spec=spec, num_csds=num_csds, assignment=assignment, device_bytes=cursor,
                    backend=backend, ledger=ledger)
