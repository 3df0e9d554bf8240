from dataclasses import dataclass

from django.conf import settings
from django.db import models

from kv_store.layout import ModelSpec
from numerics.exceptions import ContractViolation


class Scheme(models.TextChoices):
    BASELINE_MEM = 'baseline_mem', 'KV cache in host memory'
    ANS = 'ans', 'attention near storage'
    ANS_WB = 'ans_wb', 'attention near storage, delayed writeback'
    ANS_WB_X = 'ans_wb_x', 'attention near storage, delayed writeback, X-cache'
    # timing model only: a KV prefix in host memory with CPU attention over it
    KV_IN_HOST = 'kv_in_host', 'KV prefix in host memory, CPU attention'


FUNCTIONAL_SCHEMES = (Scheme.BASELINE_MEM, Scheme.ANS, Scheme.ANS_WB, Scheme.ANS_WB_X)
WRITEBACK_SCHEMES = (Scheme.ANS_WB, Scheme.ANS_WB_X, Scheme.KV_IN_HOST)
NEAR_STORAGE_SCHEMES = (Scheme.ANS,) + WRITEBACK_SCHEMES


@dataclass(frozen=True)
class RunConfig:
    spec: ModelSpec
    scheme: str = Scheme.BASELINE_MEM
    num_csds: int = 1
    spill_interval: int = None
    host_budget_bytes: int = 0
    seed: int = 0
    # Topology for the timing pass, default preset when None
    topology: object = None
    backend: str = None

    def __post_init__(self):
        if self.scheme not in FUNCTIONAL_SCHEMES:
            raise ContractViolation(f"scheme {self.scheme!r} has no functional path")
        object.__setattr__(self, 'scheme', Scheme(self.scheme))
        if self.spill_interval is None:
            object.__setattr__(self, 'spill_interval', settings.DEFAULT_SPILL_INTERVAL)
        if self.spill_interval < 1:
            raise ContractViolation(f"spill interval must be at least 1, got {self.spill_interval}")
        if self.num_csds < 1:
            raise ContractViolation(f"need at least one CSD, got {self.num_csds}")
        if self.host_budget_bytes < 0:
            raise ContractViolation(f"host budget must be nonnegative, got {self.host_budget_bytes}")
