from functools import wraps

from services.errors import ValidationError
from utils.artifact_registry import stage_status


def upstream_required(*stages: str):
    """Refuse to run a subcommand unless the named upstream stages are fresh for this config"""
    def decorator(func):
        @wraps(func)
        def wrapper(args, cfg, *rest, **kwargs):
            for stage in stages:
                status = stage_status(cfg, stage)
                if status == "missing":
                    raise ValidationError(f"Upstream stage '{stage}' has no artifacts in {cfg.out}; run it first")
                if status == "stale":
                    raise ValidationError(
                        f"Upstream stage '{stage}' in {cfg.out} was produced with another config; rerun it"
                    )
            return func(args, cfg, *rest, **kwargs)
        return wrapper
    return decorator
