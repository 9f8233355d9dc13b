from .artifacts import upstream_required

__all__ = ['upstream_required']
