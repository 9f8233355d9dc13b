from .marketdata import marketdata_service
from .volatility import volatility_service
from .latency import latency_service
from .bounds import bounds_service
from .simulator import simulator_service

__all__ = ['marketdata_service', 'volatility_service', 'latency_service', 'bounds_service', 'simulator_service']
