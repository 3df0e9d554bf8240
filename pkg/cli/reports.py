"""
CSV rendering. Columns are fixed and floats carry CSV_SIGNIFICANT_DIGITS
significant digits, so the same config and seed give the same bytes.
"""
import csv
import io
from dataclasses import asdict, dataclass, fields

from django.conf import settings

from perfmodel.timing import COMPONENTS

MATCH = 'match'
MISMATCH = 'mismatch'
NOT_APPLICABLE = 'n/a'


@dataclass
class ReportRow:
    scheme: str
    layers: int
    heads: int
    head_dim: int
    batch: int
    prompt_len: int
    max_output: int
    num_csds: int
    spill_interval: int
    host_budget_bytes: int
    weight_residency: float
    topology: str
    xcache_tokens: int
    tokens_per_second: float
    prefill_seconds: float
    decode_seconds: float
    kv_io: float
    weight_io: float
    compute: float
    writeback: float
    host_interconnect_read: int
    host_interconnect_write: int
    csd_internal_read: int
    csd_internal_write: int
    spill_write: int
    host_mem_traffic: int
    verdict: str

    def as_dict(self) -> dict:
        return asdict(self)

    def overrides(self) -> dict:
        """
        the sweep axis values this row was produced at
        """
        return {
            'batch': self.batch,
            'prompt_len': self.prompt_len,
            'max_output': self.max_output,
            'num_csds': self.num_csds,
            'host_budget_bytes': self.host_budget_bytes,
            'weight_residency': self.weight_residency,
        }


HEADER = tuple(f.name for f in fields(ReportRow))
ITERATION_HEADER = ('scheme', 'phase', 'iteration', 'seconds', 'bottleneck') + COMPONENTS


def format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.{settings.CSV_SIGNIFICANT_DIGITS}g}"
    return str(value)


def render_csv(header: tuple, rows: list) -> str:
    """
    rows are ReportRows or plain dicts keyed by the header
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        values = row.as_dict() if isinstance(row, ReportRow) else row
        writer.writerow([format_cell(values[column]) for column in header])
    return buffer.getvalue()
