from .common import BenchConfig
from .lowlevel import bench_distance, bench_latency
from .random_access import bench_random_access
from .stencil import bench_stencil

__all__ = ["BenchConfig", "bench_latency", "bench_distance", "bench_random_access",
           "bench_stencil"]
