"""
byte counters for every link a run moves data over
"""
from dataclasses import asdict, dataclass, fields


@dataclass
class LinkBytes:
    host_interconnect_read: int = 0
    host_interconnect_write: int = 0
    csd_internal_read: int = 0
    csd_internal_write: int = 0
    # host -> storage bulk writes of staged entries, off the critical path
    spill_write: int = 0
    host_mem_traffic: int = 0

    def add(self, link: str, nbytes: int) -> None:
        setattr(self, link, getattr(self, link) + nbytes)

    def scaled(self, factor: int) -> "LinkBytes":
        return LinkBytes(**{name: value * factor for name, value in self.as_dict().items()})

    def host_interconnect(self) -> int:
        return self.host_interconnect_read + self.host_interconnect_write

    def as_dict(self) -> dict:
        return asdict(self)

    def __add__(self, other: "LinkBytes") -> "LinkBytes":
        return LinkBytes(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})


LINKS = tuple(f.name for f in fields(LinkBytes))


class TrafficLedger:
    """
    Single owner per run. Counters only ever grow; `snapshot` hands out copies
    for reporting. Per-device CSD counters are kept next to the per-iteration
    link totals.
    """

    def __init__(self, num_csds: int = 1):
        self.num_csds = num_csds
        self.iteration = 0
        self.iterations = {0: LinkBytes()}
        self.csd_internal_read = [0] * num_csds
        self.csd_internal_write = [0] * num_csds
        self.storage_write_bytes = [0] * num_csds
        self.storage_writes = 0
        self.spills = 0

    def begin_iteration(self, iteration: int) -> None:
        if iteration < self.iteration:
            raise ValueError(f"iteration {iteration} is behind the ledger at {self.iteration}")
        self.iteration = iteration
        self.iterations.setdefault(iteration, LinkBytes())

    def credit(self, link: str, nbytes: int, device_id: int = None) -> None:
        if link not in LINKS:
            raise KeyError(f"unknown link {link}")
        if nbytes < 0:
            raise ValueError(f"negative byte count {nbytes} for {link}")
        self.iterations[self.iteration].add(link, nbytes)
        if device_id is not None:
            if link == 'csd_internal_read':
                self.csd_internal_read[device_id] += nbytes
            elif link == 'csd_internal_write':
                self.csd_internal_write[device_id] += nbytes

    def record_storage_write(self, device_id: int, nbytes: int) -> None:
        # padded bytes actually issued to a device, payload goes through credit
        self.storage_write_bytes[device_id] += nbytes
        self.storage_writes += 1

    def record_spill(self) -> None:
        self.spills += 1

    def at(self, iteration: int) -> LinkBytes:
        return LinkBytes(**self.iterations.get(iteration, LinkBytes()).as_dict())

    @property
    def totals(self) -> LinkBytes:
        total = LinkBytes()
        for counters in self.iterations.values():
            total = total + counters
        return total

    def decode_totals(self) -> LinkBytes:
        total = LinkBytes()
        for iteration, counters in self.iterations.items():
            if iteration > 0:
                total = total + counters
        return total

    def snapshot(self) -> dict:
        return {
            'totals': self.totals.as_dict(),
            'iterations': {i: c.as_dict() for i, c in sorted(self.iterations.items())},
            'csd_internal_read': list(self.csd_internal_read),
            'csd_internal_write': list(self.csd_internal_write),
            'storage_write_bytes': list(self.storage_write_bytes),
            'storage_writes': self.storage_writes,
            'spills': self.spills,
        }
