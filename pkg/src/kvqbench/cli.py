"""Command-line workbench driver.

Subcommands:
  gen-trace   synthesize a KV trace file
  profile     extract threshold quads from a trace
  eval        score grouped quantization against the baselines
  simulate    analytical generation sweep plus a paged-cache replay
  roundtrip   property suite: partition, error bounds, codec, cache fidelity
  dump-token  inspect one token of a trace

Configuration resolves in three layers: built-in defaults, then a YAML
config file (--config), then explicit flags. The resolved mapping is
written next to the outputs and its digest is stamped into every report,
so equal digests guarantee byte-equal reports. Exit codes: 0 success,
1 property-check failure, 2 config error, 3 I/O or format error.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import yaml

from . import report
from .encoding import EncodedToken, decode, encode
from .errors import (
    EXIT_CHECK_FAILURE,
    EXIT_IO_ERROR,
    EXIT_OK,
    ConfigError,
    DegenerateDistributionError,
    FormatError,
    WorkbenchError,
)
from .metrics import evaluate_trace
from .mmu import DENSE_TABLE, SPARSE_TABLE, Mmu, StreamKey
from .perf import AcceleratorConfig, EngineCoeffs, ModelShape, sweep
from .profiler import extract_quad, load_profile, profile, save_profile
from .quant import (
    GroupLabel,
    decompose,
    dequantize_token,
    is_inner,
    is_middle,
    is_outer,
    quantize_token,
    roundtrip_bound,
)
from .trace import (
    GroupConfig,
    KvKind,
    KvVector,
    SyntheticSpec,
    canonical_fp16,
    generate_synthetic_trace,
    load_trace,
    save_trace,
)


# ---------------------------------------------------------------------------
# Config plumbing
# ---------------------------------------------------------------------------


def _resolve_config(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults <- config file <- flags; unknown file keys fail closed."""
    resolved = dict(defaults)
    path = getattr(args, "config", None)
    if path:
        text = Path(path).read_text(encoding="utf-8")
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise FormatError(f"config file {path} is not valid YAML: {exc}")
        if not isinstance(loaded, dict):
            raise FormatError(f"config file {path} must hold a mapping")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        resolved.update(loaded)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            resolved[key] = value
    return resolved


def _require(cfg: dict, key: str) -> None:
    if cfg.get(key) in (None, ""):
        raise ConfigError(f"'{key}' is required (flag --{key.replace('_', '-')})")


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(cfg: dict, out: Path, name: str) -> str:
    # The output directory locates the record; it is not part of the run's
    # semantics, so identical runs into different directories share a digest.
    semantic = {k: v for k, v in cfg.items() if k != "out"}
    return report.dump_resolved_config(semantic, out / f"{name}.config.yaml")


def _int_list(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated int list: {text!r}")


def _str_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _parse_kind(value: str | KvKind) -> KvKind:
    if isinstance(value, KvKind):
        return value
    try:
        return KvKind(value)
    except ValueError:
        raise ConfigError(f"kind must be 'key' or 'value', got {value!r}")


def _group_config(cfg: dict) -> GroupConfig:
    outer = float(cfg["ratio_outer"])
    inner = float(cfg["ratio_inner"])
    middle = cfg.get("ratio_middle")
    if middle is None:
        middle = 1.0 - outer - inner
    return GroupConfig(
        ratio_outer=outer, ratio_middle=float(middle), ratio_inner=inner
    )


# ---------------------------------------------------------------------------
# gen-trace
# ---------------------------------------------------------------------------

GEN_TRACE_DEFAULTS: dict = {
    "layers": 4,
    "kv_heads": 8,
    "head_dim": 64,
    "tokens": 256,
    "seed": 0,
    "base_std": 1.0,
    "value_scale": 1.0,
    "outlier_channels": [],
    "outlier_multiplier": 8.0,
    "exception_rate": 0.0,
    "model_name": "synthetic",
    "trace_file": "trace.okvt",
    "out": ".",
}


def cmd_gen_trace(args: argparse.Namespace) -> int:
    cfg = _resolve_config(GEN_TRACE_DEFAULTS, args)
    cfg["outlier_channels"] = [int(c) for c in cfg["outlier_channels"]]
    out = _out_dir(cfg)
    spec = SyntheticSpec(
        num_layers=cfg["layers"],
        num_kv_heads=cfg["kv_heads"],
        head_dim=cfg["head_dim"],
        num_tokens=cfg["tokens"],
        base_std=cfg["base_std"],
        value_scale=cfg["value_scale"],
        outlier_channels=tuple(cfg["outlier_channels"]),
        outlier_multiplier=cfg["outlier_multiplier"],
        exception_rate=cfg["exception_rate"],
        model_name=cfg["model_name"],
    )
    trace = generate_synthetic_trace(spec, seed=cfg["seed"])
    trace_path = Path(cfg["trace_file"])
    if not trace_path.is_absolute():
        trace_path = out / trace_path
    save_trace(trace, str(trace_path))
    digest = _write_config(cfg, out, "gen-trace")
    print(
        f"wrote {trace_path}: {spec.num_layers} layers x "
        f"{spec.num_tokens} tokens x {spec.num_kv_heads * spec.head_dim} elements"
    )
    print(f"trace digest {trace.content_digest()}")
    print(f"config {digest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# profile
# ---------------------------------------------------------------------------

PROFILE_DEFAULTS: dict = {
    "trace": None,
    "runs": 100,
    "ratio_outer": 0.04,
    "ratio_inner": 0.06,
    "ratio_middle": None,
    "profile_file": "profile.yaml",
    "out": ".",
}


def cmd_profile(args: argparse.Namespace) -> int:
    cfg = _resolve_config(PROFILE_DEFAULTS, args)
    _require(cfg, "trace")
    out = _out_dir(cfg)
    trace = load_trace(cfg["trace"])
    prof = profile(trace, _group_config(cfg), runs=cfg["runs"])
    profile_path = Path(cfg["profile_file"])
    if not profile_path.is_absolute():
        profile_path = out / profile_path
    save_profile(prof, profile_path)
    digest = _write_config(cfg, out, "profile")
    print(
        f"wrote {profile_path}: {len(prof.quads)} cells from "
        f"{prof.provenance.num_runs} runs"
    )
    print(f"source trace {prof.provenance.source_trace_digest}")
    print(f"config {digest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

EVAL_DEFAULTS: dict = {
    "trace": None,
    "profile": None,
    "keep_fraction": None,
    "encode_check_stride": 16,
    "allow_digest_mismatch": False,
    "out": ".",
}


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve_config(EVAL_DEFAULTS, args)
    _require(cfg, "trace")
    _require(cfg, "profile")
    out = _out_dir(cfg)
    trace = load_trace(cfg["trace"])
    prof = load_profile(cfg["profile"])
    if prof.provenance.source_trace_digest != trace.content_digest():
        if not cfg["allow_digest_mismatch"]:
            raise ConfigError(
                "profile was built from a different trace "
                f"({prof.provenance.source_trace_digest} != "
                f"{trace.content_digest()}); pass --allow-digest-mismatch "
                "to evaluate anyway"
            )
    rep = evaluate_trace(
        trace,
        prof,
        keep_fraction=cfg["keep_fraction"],
        encode_check_stride=cfg["encode_check_stride"],
    )
    digest = _write_config(cfg, out, "eval")
    paths = report.write_eval_report(rep, out, digest)
    for path in paths:
        print(f"wrote {path}")
    for method in ("oaken", "uniform4", "topk_mixed"):
        cells = [c for c in rep.cells if c.method == method]
        mean_mse = float(np.mean([c.mse for c in cells]))
        bits = float(np.mean([c.effective_bits for c in cells]))
        print(f"{method}: mean mse {mean_mse:.3e} at {bits:.3f} bits/element")
    print(f"config {digest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

SIMULATE_DEFAULTS: dict = {
    "bandwidth": 480e9,
    "cores": 64,
    "macs_per_core": 128,
    "frequency": 2.0e9,
    "capacity": float(64 * 1024**3),
    "quantize_rate": 2.12e10,
    "dequantize_rate": 1.3e13,
    "weight_bytes": 14e9,
    "layers": 32,
    "kv_heads": 32,
    "head_dim": 128,
    "modes": ["fp16", "oaken", "weight4"],
    "batches": [1, 4, 16, 64],
    "seq_input": 1024,
    "seq_output": 1024,
    "outlier_rate": 0.10,
    "pipelined": True,
    "replay_requests": 2,
    "replay_layers": 2,
    "replay_tokens": 128,
    "page_bytes": 4096,
    "pages_per_core": 2048,
    "mmu_cores": 1,
    "out": ".",
}


def _replay_cache_schedule(cfg: dict) -> list:
    """Write/read a deterministic token schedule and return per-core stats.

    Token payload sizes mirror the workload's vector length and outlier
    rate; contents are a fixed byte pattern so read-back can be verified
    bit for bit.
    """
    vector_len = cfg["kv_heads"] * cfg["head_dim"]
    if vector_len % 64 != 0:
        raise ConfigError(
            f"replay needs kv_heads*head_dim divisible by 64, got {vector_len}"
        )
    dense_size = vector_len // 2 + 12
    num_segments = vector_len // 64
    entries = int(round(cfg["outlier_rate"] * vector_len))
    base, rem = divmod(entries, num_segments)
    if base + (1 if rem else 0) > 64:
        raise ConfigError("outlier_rate too high for the sparse segments")
    counts = tuple(base + 1 if s < rem else base for s in range(num_segments))

    mmu = Mmu(
        num_cores=cfg["mmu_cores"],
        pages_per_core=cfg["pages_per_core"],
        page_bytes=cfg["page_bytes"],
    )
    pattern = np.arange(max(dense_size, entries), dtype=np.int64)
    written: dict[StreamKey, tuple[bytearray, bytearray]] = {}
    for request in range(cfg["replay_requests"]):
        for layer in range(cfg["replay_layers"]):
            for kind in (KvKind.KEY, KvKind.VALUE):
                key = StreamKey(request=request, layer=layer, kind=kind)
                store = written.setdefault(key, (bytearray(), bytearray()))
                for token in range(cfg["replay_tokens"]):
                    salt = (request * 131 + layer * 17 + token * 7) % 251
                    dense = ((pattern[:dense_size] + salt) % 256).astype(
                        np.uint8
                    ).tobytes()
                    sparse = ((pattern[:entries] + salt + 1) % 256).astype(
                        np.uint8
                    ).tobytes()
                    mmu.write_token(key, dense, sparse, counts)
                    store[0].extend(dense)
                    store[1].extend(sparse)
    for key, (dense_all, sparse_all) in written.items():
        if mmu.read_sequence(key, DENSE_TABLE) != bytes(dense_all):
            raise WorkbenchError(f"dense read-back mismatch for {key}")
        if mmu.read_sequence(key, SPARSE_TABLE) != bytes(sparse_all):
            raise WorkbenchError(f"sparse read-back mismatch for {key}")
    return [mmu.stats(core) for core in range(cfg["mmu_cores"])]


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(SIMULATE_DEFAULTS, args)
    cfg["modes"] = [str(m) for m in cfg["modes"]]
    cfg["batches"] = [int(b) for b in cfg["batches"]]
    out = _out_dir(cfg)
    accel = AcceleratorConfig(
        memory_bandwidth=cfg["bandwidth"],
        num_cores=cfg["cores"],
        macs_per_core=cfg["macs_per_core"],
        frequency_hz=cfg["frequency"],
        capacity_bytes=cfg["capacity"],
    )
    model = ModelShape(
        weight_bytes=cfg["weight_bytes"],
        num_layers=cfg["layers"],
        num_kv_heads=cfg["kv_heads"],
        head_dim=cfg["head_dim"],
    )
    engine = EngineCoeffs(
        quantize_rate=cfg["quantize_rate"],
        dequantize_rate=cfg["dequantize_rate"],
    )
    rows = sweep(
        accel,
        model,
        engine,
        modes=tuple(cfg["modes"]),
        batches=tuple(cfg["batches"]),
        seq_input=cfg["seq_input"],
        seq_output=cfg["seq_output"],
        outlier_rate=cfg["outlier_rate"],
        pipelined=cfg["pipelined"],
    )
    digest = _write_config(cfg, out, "simulate")
    paths = report.write_sweep_report(rows, out, digest)
    stats = _replay_cache_schedule(cfg)
    paths.extend(report.write_mmu_report(stats, out, digest))
    for path in paths:
        print(f"wrote {path}")
    oom_rows = sum(r.oom_flag for r in rows)
    print(f"sweep: {len(rows)} rows, {oom_rows} out of memory")
    for core, s in enumerate(stats):
        print(
            f"cache core {core}: write burst efficiency "
            f"{s.write_burst_efficiency:.3f}, read {s.read_burst_efficiency:.3f}, "
            f"fragmentation {s.fragmentation:.3f}"
        )
    print(f"config {digest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# roundtrip
# ---------------------------------------------------------------------------

ROUNDTRIP_DEFAULTS: dict = {
    "tokens": 2000,
    "vector_len": 256,
    "seed": 0,
    "inject_fault": False,
    "out": ".",
}


@dataclasses.dataclass
class PropertyResult:
    name: str
    checked: int = 0
    violations: list[str] = dataclasses.field(default_factory=list)


def _inject_fault(sparse_bytes: bytes) -> bytes:
    """Testing aid: flip the lowest index bit of the first outlier entry."""
    if not sparse_bytes:
        return sparse_bytes
    return bytes([sparse_bytes[0] ^ 0x04]) + sparse_bytes[1:]


def _codec_identity(q, token_bytes: tuple[bytes, bytes, tuple[int, ...]]) -> str:
    """Empty string when the codec round-trip is faithful, else a reason.

    Decoding reconstructs middle-side labels from residual signs, so sides
    may legally flip on exact-zero residuals; everything else must match:
    codes, scale bounds, the three group masks, and outlier signs, plus
    byte-identical re-encoding.
    """
    dense_b, sparse_b, counts = token_bytes
    try:
        token = EncodedToken.from_streams(dense_b, sparse_b, counts)
        q2 = decode(token)
        e2 = encode(q2)
    except (FormatError, ConfigError) as exc:
        return f"decode rejected stream: {exc}"
    if not np.array_equal(q2.codes, q.codes):
        return "dense codes differ"
    for kind in q.scales:
        if (q.scales[kind].min, q.scales[kind].max) != (
            q2.scales[kind].min,
            q2.scales[kind].max,
        ):
            return f"{kind.value} scale bounds differ"
    for name, mask_fn in (
        ("outer", is_outer),
        ("middle", is_middle),
        ("inner", is_inner),
    ):
        if not np.array_equal(mask_fn(q.labels), mask_fn(q2.labels)):
            return f"{name} membership differs"
    outliers = is_outer(q.labels) | is_inner(q.labels)
    if not np.array_equal(q.signs[outliers], q2.signs[outliers]):
        return "outlier signs differ"
    if (e2.dense.to_bytes(), e2.sparse_bytes()) != (dense_b, sparse_b):
        return "re-encoded bytes differ"
    return ""


def run_roundtrip_suite(
    num_tokens: int,
    vector_len: int,
    seed: int,
    inject_fault: bool = False,
) -> list[PropertyResult]:
    """Fuzz the full pipeline; returns one result per property."""
    if vector_len < 64 or vector_len % 64 != 0:
        raise ConfigError("vector_len must be a positive multiple of 64")
    if num_tokens < 1:
        raise ConfigError("need at least one token")
    config = GroupConfig()
    partition = PropertyResult("partition")
    bounds = PropertyResult("roundtrip-bound")
    codec = PropertyResult("codec-bijection")
    fidelity = PropertyResult("cache-fidelity")

    total_bytes = num_tokens * (vector_len // 2 + 12 + vector_len)
    mmu = Mmu(num_cores=1, pages_per_core=total_bytes // 4096 + 16)
    key = StreamKey(request=0, layer=0, kind=KvKind.KEY)
    stored: list[tuple[int, bytes, bytes]] = []

    for i in range(num_tokens):
        token_seed = seed + i
        rng = np.random.default_rng(token_seed)
        x = rng.standard_normal(vector_len) * 10.0 ** rng.uniform(-2.0, 2.0)
        spikes = rng.random(vector_len) < 0.02
        x[spikes] *= 8.0
        values = canonical_fp16(x)
        try:
            quad = extract_quad(values, config)
        except DegenerateDistributionError:
            continue  # not a property violation; vanishingly rare here
        x64 = values.astype(np.float64)
        labels = decompose(values, quad)

        partition.checked += 1
        outer_lo = x64 < quad.t_lo_outer
        outer_hi = x64 > quad.t_hi_outer
        inner = (x64 >= quad.t_lo_inner) & (x64 <= quad.t_hi_inner)
        expect_inner = inner & ~outer_lo & ~outer_hi
        if not (
            np.array_equal(labels == GroupLabel.OUTER_LOW, outer_lo)
            and np.array_equal(labels == GroupLabel.OUTER_HIGH, outer_hi)
            and np.array_equal(is_inner(labels), expect_inner)
            and np.array_equal(
                is_middle(labels), ~(outer_lo | outer_hi | expect_inner)
            )
        ):
            partition.violations.append(f"token {i} (seed {token_seed})")

        vec = KvVector(values=values, layer=0, kind=KvKind.KEY, token_index=i)
        q = quantize_token(vec, quad, config)
        err = np.abs(dequantize_token(q, quad) - x64)
        bounds.checked += 1
        excess = err - roundtrip_bound(q)
        if np.any(excess > 0):
            worst = int(np.argmax(excess))
            bounds.violations.append(
                f"token {i} (seed {token_seed}): element {worst} off by "
                f"{excess[worst]:.3e}"
            )

        e = encode(q, config)
        dense_b = e.dense.to_bytes()
        sparse_b = e.sparse_bytes()
        if inject_fault and i == 0:
            sparse_b = _inject_fault(sparse_b)
        codec.checked += 1
        reason = _codec_identity(q, (dense_b, sparse_b, e.sparse_counts))
        if reason:
            codec.violations.append(f"token {i} (seed {token_seed}): {reason}")

        mmu.write_token(key, dense_b, sparse_b, e.sparse_counts)
        stored.append((i, dense_b, sparse_b))

    dense_all = mmu.read_sequence(key, DENSE_TABLE)
    sparse_all = mmu.read_sequence(key, SPARSE_TABLE)
    dense_sizes = mmu.dense_token_sizes(key)
    sparse_sizes = mmu.sparse_token_sizes(key)
    d_off = s_off = 0
    for slot, (i, dense_b, sparse_b) in enumerate(stored):
        fidelity.checked += 1
        got_dense = dense_all[d_off : d_off + dense_sizes[slot]]
        got_sparse = sparse_all[s_off : s_off + sparse_sizes[slot]]
        d_off += dense_sizes[slot]
        s_off += sparse_sizes[slot]
        if got_dense != dense_b or got_sparse != sparse_b:
            fidelity.violations.append(f"token {i} (seed {seed + i})")

    return [partition, bounds, codec, fidelity]


def cmd_roundtrip(args: argparse.Namespace) -> int:
    cfg = _resolve_config(ROUNDTRIP_DEFAULTS, args)
    out = _out_dir(cfg)
    results = run_roundtrip_suite(
        num_tokens=cfg["tokens"],
        vector_len=cfg["vector_len"],
        seed=cfg["seed"],
        inject_fault=cfg["inject_fault"],
    )
    digest = _write_config(cfg, out, "roundtrip")
    failed = False
    for res in results:
        status = "ok" if not res.violations else "FAIL"
        print(
            f"{res.name}: {res.checked} checked, "
            f"{len(res.violations)} violations [{status}]"
        )
        for line in res.violations[:10]:
            print(f"  {line}")
        if len(res.violations) > 10:
            print(f"  ... and {len(res.violations) - 10} more")
        failed = failed or bool(res.violations)
    print(f"config {digest}")
    return EXIT_CHECK_FAILURE if failed else EXIT_OK


# ---------------------------------------------------------------------------
# dump-token
# ---------------------------------------------------------------------------

DUMP_TOKEN_DEFAULTS: dict = {
    "trace": None,
    "layer": 0,
    "kind": "key",
    "token": 0,
    "profile": None,
    "out": None,
}


def cmd_dump_token(args: argparse.Namespace) -> int:
    cfg = _resolve_config(DUMP_TOKEN_DEFAULTS, args)
    _require(cfg, "trace")
    trace = load_trace(cfg["trace"])
    kind = _parse_kind(cfg["kind"])
    vec = trace.vector(cfg["layer"], kind, cfg["token"])
    x = vec.values.astype(np.float64)
    lines = [
        f"token {cfg['token']} of layer {cfg['layer']} ({kind.value}) "
        f"in {cfg['trace']}",
        f"  length {len(x)}  min {x.min():.6g}  max {x.max():.6g}  "
        f"mean {x.mean():.6g}  std {x.std():.6g}",
    ]
    if cfg["profile"]:
        prof = load_profile(cfg["profile"])
        quad = prof.quad(cfg["layer"], kind)
        lines.append(
            f"  thresholds: outer ({quad.t_lo_outer:.6g}, {quad.t_hi_outer:.6g})"
            f"  inner ({quad.t_lo_inner:.6g}, {quad.t_hi_inner:.6g})"
        )
        labels = decompose(vec, quad)
        counts = {
            name: int(np.sum(labels == label))
            for name, label in (
                ("outer-low", GroupLabel.OUTER_LOW),
                ("middle-low", GroupLabel.MIDDLE_LOW),
                ("inner", GroupLabel.INNER),
                ("middle-high", GroupLabel.MIDDLE_HIGH),
                ("outer-high", GroupLabel.OUTER_HIGH),
            )
        }
        lines.append(
            "  groups: "
            + "  ".join(f"{name} {count}" for name, count in counts.items())
        )
        q = quantize_token(vec, quad)
        e = encode(q)
        lines.append(
            f"  encoded: {e.total_bits()} bits total "
            f"({e.effective_bits():.3f} bits/element), "
            f"{q.num_outliers()} outlier entries"
        )
        lines.append(f"  dense[:16] {e.dense.to_bytes()[:16].hex()}")
        lines.append(f"  sparse[:16] {e.sparse_bytes()[:16].hex()}")
    text = "\n".join(lines)
    print(text)
    if cfg["out"]:
        out = _out_dir(cfg)
        (out / "dump-token.txt").write_text(text + "\n", encoding="utf-8")
        digest = _write_config(cfg, out, "dump-token")
        print(f"config {digest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvqbench",
        description="grouped KV-cache quantization workbench",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="YAML config file (flags override it)")
        p.add_argument("--out", help="output directory (default: current)")

    p = sub.add_parser("gen-trace", help="synthesize a KV trace file")
    add_common(p)
    p.add_argument("--layers", type=int)
    p.add_argument("--kv-heads", type=int, dest="kv_heads")
    p.add_argument("--head-dim", type=int, dest="head_dim")
    p.add_argument("--tokens", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--base-std", type=float, dest="base_std")
    p.add_argument("--value-scale", type=float, dest="value_scale")
    p.add_argument(
        "--outlier-channels",
        type=_int_list,
        dest="outlier_channels",
        help="comma-separated channel indices with magnified magnitudes",
    )
    p.add_argument("--outlier-multiplier", type=float, dest="outlier_multiplier")
    p.add_argument("--exception-rate", type=float, dest="exception_rate")
    p.add_argument("--model-name", dest="model_name")
    p.add_argument("--trace-file", dest="trace_file")
    p.set_defaults(func=cmd_gen_trace)

    p = sub.add_parser("profile", help="extract threshold quads from a trace")
    add_common(p)
    p.add_argument("--trace")
    p.add_argument("--runs", type=int)
    p.add_argument("--ratio-outer", type=float, dest="ratio_outer")
    p.add_argument("--ratio-inner", type=float, dest="ratio_inner")
    p.add_argument("--ratio-middle", type=float, dest="ratio_middle")
    p.add_argument("--profile-file", dest="profile_file")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("eval", help="score quantization against baselines")
    add_common(p)
    p.add_argument("--trace")
    p.add_argument("--profile")
    p.add_argument("--keep-fraction", type=float, dest="keep_fraction")
    p.add_argument(
        "--encode-check-stride", type=int, dest="encode_check_stride"
    )
    p.add_argument(
        "--allow-digest-mismatch",
        action=argparse.BooleanOptionalAction,
        dest="allow_digest_mismatch",
        default=None,
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "simulate", help="generation sweep plus paged-cache replay"
    )
    add_common(p)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--cores", type=int)
    p.add_argument("--macs-per-core", type=int, dest="macs_per_core")
    p.add_argument("--frequency", type=float)
    p.add_argument("--capacity", type=float)
    p.add_argument("--quantize-rate", type=float, dest="quantize_rate")
    p.add_argument("--dequantize-rate", type=float, dest="dequantize_rate")
    p.add_argument("--weight-bytes", type=float, dest="weight_bytes")
    p.add_argument("--layers", type=int)
    p.add_argument("--kv-heads", type=int, dest="kv_heads")
    p.add_argument("--head-dim", type=int, dest="head_dim")
    p.add_argument("--modes", type=_str_list)
    p.add_argument("--batches", type=_int_list)
    p.add_argument("--seq-input", type=int, dest="seq_input")
    p.add_argument("--seq-output", type=int, dest="seq_output")
    p.add_argument("--outlier-rate", type=float, dest="outlier_rate")
    p.add_argument(
        "--pipelined",
        action=argparse.BooleanOptionalAction,
        default=None,
    )
    p.add_argument("--replay-requests", type=int, dest="replay_requests")
    p.add_argument("--replay-layers", type=int, dest="replay_layers")
    p.add_argument("--replay-tokens", type=int, dest="replay_tokens")
    p.add_argument("--page-bytes", type=int, dest="page_bytes")
    p.add_argument("--pages-per-core", type=int, dest="pages_per_core")
    p.add_argument("--mmu-cores", type=int, dest="mmu_cores")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("roundtrip", help="run the property-check suite")
    add_common(p)
    p.add_argument("--tokens", type=int)
    p.add_argument("--vector-len", type=int, dest="vector_len")
    p.add_argument("--seed", type=int)
    p.add_argument(
        "--inject-fault",
        action=argparse.BooleanOptionalAction,
        dest="inject_fault",
        default=None,
        help="testing aid: corrupt one sparse index before the codec check",
    )
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("dump-token", help="inspect one token of a trace")
    add_common(p)
    p.add_argument("--trace")
    p.add_argument("--layer", type=int)
    p.add_argument("--kind", choices=["key", "value"])
    p.add_argument("--token", type=int)
    p.add_argument("--profile")
    p.set_defaults(func=cmd_dump_token)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except WorkbenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO_ERROR
    except IsADirectoryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO_ERROR


if __name__ == "__main__":
    sys.exit(main())
