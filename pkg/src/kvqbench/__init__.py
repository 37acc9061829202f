"""Workbench for threshold-grouped KV-cache quantization.

Subsystems:
- trace: KV model, synthetic generation, binary trace format
- profiler: offline threshold extraction and the online top-k oracle
- quant: three-group decomposition, group shift, 4/5-bit quantization
- encoding: fused dense nibble stream + 8-bit COO outlier entries
- mmu: paged dense/sparse memory simulator with burst accounting
- perf: analytical latency/throughput/memory model for batched generation
- baselines, metrics: oracle quantizers and error reports
- cli: the `kvqbench` command-line front end
"""
from __future__ import annotations

__version__ = "0.1.0"
