"""JSON configuration: loading, dotted-path overrides and validation.

The file has one section per module (``carbon_ledger``, ``hardware_model``,
``workload``, ``spec_decode``, ``sim_engine``, ``scheduler``, ``analysis``,
``cli``). GPU and application entries use the column names of the GPU
specification and dataset tables they were copied from. Times are seconds,
energies kWh and carbon grams throughout.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

from .carbon import DEFAULT_IDLE_FRACTION, GpuSpec, GridProfile, LifetimeAssumption, years_to_seconds
from .hardware import ModelSpec
from .sim import UTILIZATION_MODELS, NetworkLink, ServingConfig, Variant
from .specdecode import DraftWindow
from .workload import PERCENTILES, ApplicationProfile


# which per-GPU time the embodied share is charged on
EMBODIED_TIME_BASES = ("request", "busy")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def default_config() -> dict:
    text = resources.files("carbonserve").joinpath("data/default_config.json").read_text()
    return json.loads(text)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict:
    """Read a config file (or the bundled default) and apply ``key.path=value`` overrides.

    Sections missing from the file fall back to the bundled defaults.
    """
    cfg = default_config()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"not valid JSON ({exc})") from None
        for section, body in user.items():
            cfg[section] = body
    for item in overrides or ():
        apply_override(cfg, item)
    return cfg


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(item, "override must look like section.key=value")
    key, raw = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) < 2 or parts[0] not in cfg:
        raise ConfigError(key.strip(), "no such key")
    node: Any = cfg
    for i, part in enumerate(parts[:-1]):
        if isinstance(node, list):
            node = node[int(part)]
        else:
            if part not in node:
                raise ConfigError(".".join(parts[: i + 1]), "no such key")
            node = node[part]
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = _parse_value(raw)
    else:
        node[last] = _parse_value(raw)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _get(node: dict, key: str, path: str):
    try:
        return node[key]
    except (KeyError, TypeError):
        raise ConfigError(f"{path}.{key}" if path else key, "missing required key") from None


def _num(node: dict, key: str, path: str) -> float:
    value = _get(node, key, path)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}.{key}", f"expected a number, got {value!r}")
    return float(value)


@dataclass
class Settings:
    """Validated, typed view of a configuration dict."""

    raw: dict
    gpus: dict[str, GpuSpec]
    models: dict[str, ModelSpec]
    apps: dict[str, ApplicationProfile]
    grids: dict[str, GridProfile]
    grid: GridProfile
    lifetimes: dict[str, LifetimeAssumption]
    link: NetworkLink
    configs: list[ServingConfig]
    size: str
    duration: float
    arrival: str
    qps_grid: list[float]
    seed: int
    scheduler: dict = field(default_factory=dict)
    analysis: dict = field(default_factory=dict)
    output_dir: str = "carbonserve-out"
    jobs: int = 1
    utilization: str = "roofline"
    embodied_time: str = "request"

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def config(self, config_id: str) -> ServingConfig:
        for c in self.configs:
            if c.id == config_id:
                return c
        raise ConfigError("sim_engine.configs", f"no configuration with id {config_id!r}")

    def app(self, name: str) -> ApplicationProfile:
        try:
            return self.apps[name]
        except KeyError:
            raise ConfigError("workload.applications", f"no application named {name!r}") from None

    def with_grid(self, grid: GridProfile) -> Settings:
        return replace(self, grid=grid)

    def with_link(self, link: NetworkLink) -> Settings:
        return replace(self, link=link)


def _parse_gpus(section: dict) -> dict[str, GpuSpec]:
    calib = section.get("calibration_lookup", {})
    out = {}
    for i, row in enumerate(_get(section, "gpus", "carbon_ledger")):
        path = f"carbon_ledger.gpus[{i}]"
        name = str(_get(row, "GPU Model", path))
        cal = calib.get(name, {})
        max_power = _num(row, "Max Power (W)", path)
        idle = row.get("Idle Power (W)")
        if idle is None:
            idle = cal.get("idle_fraction", DEFAULT_IDLE_FRACTION) * max_power
        try:
            out[name] = GpuSpec(
                name=name,
                vram=_num(row, "VRAM (GB)", path),
                mem_bandwidth=_num(row, "Memory Bandwidth (GB/s)", path),
                chip_area=_num(row, "Chip Area (mm^2)", path),
                max_power=max_power,
                idle_power=float(idle),
                fp16_throughput=_num(row, "FP16 TFLOPs", path),
                embodied_carbon=_num(row, "Embodied Carbon (kgCO2)", path),
                release_year=int(_get(row, "Year", path)),
                compute_efficiency=float(cal.get("compute_efficiency", 0.6)),
                memory_efficiency=float(cal.get("memory_efficiency", 0.8)),
                step_overhead=float(cal.get("step_overhead_s", 0.0)),
            )
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None
    return out


def _parse_apps(section: dict) -> dict[str, ApplicationProfile]:
    out = {}
    for i, row in enumerate(_get(section, "applications", "workload")):
        path = f"workload.applications[{i}]"
        name = str(_get(row, "Dataset", path))
        sizes = {}
        for p in PERCENTILES:
            key = f"{p} Req. Size"
            if key in row:
                pair = row[key]
                if not (isinstance(pair, list) and len(pair) == 2):
                    raise ConfigError(f"{path}.{key}", "expected [input_tokens, output_tokens]")
                sizes[p] = (int(pair[0]), int(pair[1]))
        try:
            out[name] = ApplicationProfile(name, _num(row, "TTFT SLO", path), _num(row, "TPOT SLO", path), sizes)
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None
    return out


def build_settings(cfg: dict) -> Settings:
    cfg = copy.deepcopy(cfg)
    cl = _get(cfg, "carbon_ledger", "")
    hw = cfg.get("hardware_model", {})
    cl_view = dict(cl, calibration_lookup=hw.get("calibration", {}))
    gpus = _parse_gpus(cl_view)

    models = {}
    for i, row in enumerate(hw.get("models", [])):
        path = f"hardware_model.models[{i}]"
        try:
            m = ModelSpec(str(_get(row, "name", path)), _num(row, "params", path), int(_num(row, "layers", path)),
                          int(_num(row, "hidden_dim", path)), int(row.get("bytes_per_param", 2)),
                          int(row.get("vocab_size", 32000)))
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None
        models[m.name] = m

    grids = {}
    for i, row in enumerate(cl.get("grids", [])):
        path = f"carbon_ledger.grids[{i}]"
        g = GridProfile(str(_get(row, "region", path)), _num(row, "carbon_intensity", path))
        grids[g.region] = g
    grid_ref = cl.get("grid", "CISO")
    if isinstance(grid_ref, dict):
        grid = GridProfile(str(grid_ref.get("region", "custom")), _num(grid_ref, "carbon_intensity", "carbon_ledger.grid"))
    elif grid_ref in grids:
        grid = grids[grid_ref]
    else:
        raise ConfigError("carbon_ledger.grid", f"unknown region {grid_ref!r}")

    lt_cfg = cl.get("lifetimes", {})
    default_years = float(lt_cfg.get("default_years", 7))
    per_gpu = lt_cfg.get("per_gpu_years", {})
    for name in per_gpu:
        if name not in gpus:
            raise ConfigError(f"carbon_ledger.lifetimes.per_gpu_years.{name}", "unknown GPU")
    lifetimes = {name: LifetimeAssumption(name, years_to_seconds(float(per_gpu.get(name, default_years))))
                 for name in gpus}

    apps = _parse_apps(_get(cfg, "workload", ""))
    wl = cfg["workload"]
    size = wl.get("size", "P50")
    if size not in PERCENTILES:
        raise ConfigError("workload.size", f"expected one of {PERCENTILES}")

    sd = cfg.get("spec_decode", {})
    k = int(sd.get("k", 4))
    bpp = int(sd.get("bytes_per_prob", 2))
    rates = sd.get("acceptance_rates", {})

    se = _get(cfg, "sim_engine", "")
    link_cfg = se.get("link", {})
    link = NetworkLink(float(link_cfg.get("bandwidth_bps", 16e9)), float(link_cfg.get("base_latency_s", 0.0)),
                       float(link_cfg.get("energy_per_byte_j", 0.0)))
    max_batch = int(se.get("max_batch", 16))
    overlap = bool(se.get("overlap", True))
    utilization = se.get("utilization", "roofline")
    if utilization not in UTILIZATION_MODELS:
        raise ConfigError("sim_engine.utilization", f"expected one of {UTILIZATION_MODELS}, got {utilization!r}")
    embodied_time = cl.get("embodied_time", "request")
    if embodied_time not in EMBODIED_TIME_BASES:
        raise ConfigError("carbon_ledger.embodied_time", f"expected one of {EMBODIED_TIME_BASES}, got {embodied_time!r}")

    configs = []
    seen = set()
    for i, row in enumerate(_get(se, "configs", "sim_engine")):
        path = f"sim_engine.configs[{i}]"
        cid = str(_get(row, "id", path))
        if cid in seen:
            raise ConfigError(f"{path}.id", f"duplicate configuration id {cid!r}")
        seen.add(cid)

        def gpu(key, required):
            ref = row.get(key)
            if ref is None:
                if required:
                    raise ConfigError(f"{path}.{key}", f"configuration {cid!r} is missing {key}")
                return None
            if ref not in gpus:
                raise ConfigError(f"{path}.{key}", f"configuration {cid!r} references unknown GPU {ref!r}")
            return gpus[ref]

        def model(key, required):
            ref = row.get(key)
            if ref is None:
                if required:
                    raise ConfigError(f"{path}.{key}", f"configuration {cid!r} is missing {key}")
                return None
            if ref not in models:
                raise ConfigError(f"{path}.{key}", f"configuration {cid!r} references unknown model {ref!r}")
            return models[ref]

        try:
            variant = Variant(_get(row, "variant", path))
        except ValueError:
            raise ConfigError(f"{path}.variant", f"unknown variant {row.get('variant')!r}") from None
        draft = model("draft_model", variant.speculative)
        window = None
        if draft is not None:
            rate = row.get("acceptance_rate", rates.get(draft.name))
            if rate is None:
                raise ConfigError(f"spec_decode.acceptance_rates.{draft.name}", f"no acceptance rate for {cid!r}")
            window = DraftWindow(int(row.get("k", k)), float(rate))
        new_gpu, old_gpu = gpu("new_gpu", True), gpu("old_gpu", variant.disaggregated)
        target = model("target_model", True)
        try:
            configs.append(ServingConfig(
                id=cid, variant=variant, new_gpu=new_gpu, target_model=target,
                old_gpu=old_gpu, draft_model=draft, draft_window=window,
                max_batch=int(row.get("max_batch", max_batch)), bytes_per_prob=int(row.get("bytes_per_prob", bpp)),
                overlap=bool(row.get("overlap", overlap)),
            ))
        except ValueError as exc:
            raise ConfigError(path, str(exc)) from None

    sched = dict(cfg.get("scheduler", {}))
    if sched.get("default_config") and sched["default_config"] not in seen:
        raise ConfigError("scheduler.default_config", f"unknown configuration {sched['default_config']!r}")
    cli = cfg.get("cli", {})
    qps_grid = [float(q) for q in cli.get("qps_grid", [1.0])]
    if not qps_grid or any(q <= 0 for q in qps_grid):
        raise ConfigError("cli.qps_grid", "must be a non-empty list of positive rates")

    return Settings(
        raw=cfg, gpus=gpus, models=models, apps=apps, grids=grids, grid=grid, lifetimes=lifetimes, link=link,
        configs=configs, size=size, duration=float(wl.get("duration_s", 120)), arrival=wl.get("arrival", "poisson"),
        qps_grid=qps_grid, seed=int(cli.get("seed", 0)), scheduler=sched, analysis=dict(cfg.get("analysis", {})),
        output_dir=str(cli.get("output_dir", "carbonserve-out")), jobs=int(cli.get("jobs", 1)),
        utilization=utilization, embodied_time=embodied_time,
    )


def load_settings(path: str | Path | None = None, overrides: list[str] | None = None) -> Settings:
    return build_settings(load_config(path, overrides))
