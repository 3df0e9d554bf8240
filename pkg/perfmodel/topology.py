from dataclasses import asdict, dataclass, replace

RATE_FIELDS = (
    'bw_host_interconnect',
    'bw_csd_internal',
    'bw_ssd_read',
    'bw_ssd_write',
    'bw_weight_link',
    'bw_host_memory',
    't_host_compute',
    't_accel_compute',
    't_cpu_compute',
)


@dataclass(frozen=True)
class Topology:
    """
    Bandwidths in bytes/s, throughputs in FLOP/s. `weight_residency` is the
    fraction of the weights read from the SSDs instead of host memory,
    `kv_residency` is "storage" or "memory".
    """
    num_csds: int
    bw_host_interconnect: float
    bw_csd_internal: float
    bw_ssd_read: float
    bw_ssd_write: float
    t_host_compute: float
    t_accel_compute: float
    host_mem_budget: float
    bw_weight_link: float
    bw_host_memory: float
    t_cpu_compute: float
    weight_residency: float = 0.0
    kv_residency: str = 'storage'
    name: str = 'custom'
    description: str = ''

    def __post_init__(self):
        for name in RATE_FIELDS:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_csds < 1:
            raise ValueError(f"num_csds must be at least 1, got {self.num_csds}")
        if not 0.0 <= self.weight_residency <= 1.0:
            raise ValueError(f"weight_residency must lie in [0, 1], got {self.weight_residency}")

    def with_overrides(self, **changes) -> "Topology":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return asdict(self)
