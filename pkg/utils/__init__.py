from .artifact_registry import load_manifest, record_stage, stage_status
from .io import read_orderbooks, read_profiles, read_transactions, read_blocks, write_csv, write_json
from .parallel import run_parallel

__all__ = [
    'load_manifest', 'record_stage', 'stage_status',
    'read_orderbooks', 'read_profiles', 'read_transactions', 'read_blocks', 'write_csv', 'write_json',
    'run_parallel',
]
