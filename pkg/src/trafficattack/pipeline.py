"""Stage-to-disk experiment pipeline.

Every stage reads its inputs from a work directory and writes its outputs
plus a JSON manifest there, so target-side and adversary-side stages can run
as separate processes. Layout::

    config.json                      resolved RunConfig (written by gen-data)
    data/flows.csv, data/sensors.csv
    targets/<model_id>.npz           target model bundles
    oracle/<model_id>.npz            oracle logs
    substitutes/<model_id>.npz       substitute bundles (tagged with target id)
    attacks/<model_id>__<method>.npz adversarial signals + pre/post forecasts
    reports/<model_id>__<method>.*   AttackReport json/csv/hist
    reports/table.txt, table.csv     comparison table
    manifests/<stage>__<tag>.json    one per stage run

Per-stage seeds are ``(seed + crc32(stage_name)) mod 2**32``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dataset as ds
from .attack import AttackConfig, run_attack
from .errors import ConfigurationError, DependencyError, FormatError
from .evaluation import (
    TABLE_COLUMNS,
    build_report,
    comparison_rows,
    emit_report,
    format_table,
    load_report,
)
from .model_zoo import (
    GraphGRUModel,
    HAModel,
    ModelBundle,
    TrainConfig,
    build_adjacency,
    fit_lr,
    load_model,
    save_model,
    train_model,
)
from .oracle import LocalEndpoint, OracleLog, collect
from .substitute import SubstituteTrainConfig, adversary_bounds, fidelity, train_substitute

TARGET_KINDS = ("gru-adaptive", "gru-fixed", "lr", "ha")
METHODS = ("fgsm", "bim")


def derive_seed(seed: int, stage: str) -> int:
    return (int(seed) + zlib.crc32(stage.encode())) % 2 ** 32


@dataclass
class RunConfig:
    seed: int = 0
    # data (synthetic unless flows_csv is set)
    sensors: int = 10
    days: int = 28
    noise_scale: float = 0.1
    noise_persistence: float = 0.0
    flows_csv: str | None = None
    sensors_csv: str | None = None
    # windows and splits
    fractions: tuple[float, float, float] = (0.70, 0.20, 0.10)
    chronological: bool = False
    ha_periods: int = 4
    ha_min_periods: int = 4
    # targets
    adjacency_squared: bool = False
    adjacency_threshold: float | None = None
    target_hidden: int = 32
    target_lr: float = 0.005
    target_batch_size: int = 24
    target_epochs: int = 20
    # substitute
    substitute_lr: float = 0.005
    substitute_batch_size: int = 24
    substitute_epochs: int = 50
    substitute_channels: int = 32
    substitute_blocks: int = 3
    # attack
    epsilon: float = 0.2
    alpha: float = 0.05
    iterations: int = 10
    clip_min: float | None = None
    clip_max: float | None = None
    use_oracle_targets: bool = False
    max_queries: int | None = None
    bins: int = 40

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if self.ha_min_periods < 1 or self.ha_min_periods > self.ha_periods:
            raise ConfigurationError("need 1 <= ha_min_periods <= ha_periods")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fractions"] = list(self.fractions)
        return d

    def attack_config(self, method: str) -> AttackConfig:
        lo = -np.inf if self.clip_min is None else self.clip_min
        hi = np.inf if self.clip_max is None else self.clip_max
        return AttackConfig(method, self.epsilon, self.alpha, self.iterations, lo, hi)


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class Workspace:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def config_path(self) -> Path:
        return self.root / "config.json"

    @property
    def flows(self) -> Path:
        return self.root / "data" / "flows.csv"

    @property
    def sensors(self) -> Path:
        return self.root / "data" / "sensors.csv"

    def target(self, model_id: str) -> Path:
        return self.root / "targets" / f"{model_id}.npz"

    def oracle_log(self, model_id: str) -> Path:
        return self.root / "oracle" / f"{model_id}.npz"

    def substitute(self, model_id: str) -> Path:
        return self.root / "substitutes" / f"{model_id}.npz"

    def attack(self, model_id: str, method: str) -> Path:
        return self.root / "attacks" / f"{model_id}__{method}.npz"

    def report_prefix(self, model_id: str, method: str) -> Path:
        return self.root / "reports" / f"{model_id}__{method}"

    def manifest(self, stage: str, tag: str = "") -> Path:
        name = f"{stage}__{tag}" if tag else stage
        return self.root / "manifests" / f"{name}.json"

    def rel(self, path: Path) -> str:
        try:
            return str(Path(path).relative_to(self.root))
        except ValueError:
            return str(path)

    def require(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise DependencyError(f"missing {self.rel(path)}; run `{stage}` first")
        return path

    def load_config(self) -> RunConfig:
        if not self.config_path.exists():
            raise DependencyError("missing config.json; run `gen-data` first")
        return RunConfig.from_dict(json.loads(self.config_path.read_text()))

    def save_config(self, cfg: RunConfig) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.config_path.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")


@dataclass
class Manifest:
    stage: str
    tag: str
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def hash(self) -> str:
        body = {"stage": self.stage, "tag": self.tag, "config": self.config,
                "seed": self.seed, "inputs": self.inputs}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    def write(self, ws: Workspace, outputs: list[Path]) -> Path:
        self.outputs = {ws.rel(p): _digest(p) for p in outputs}
        path = ws.manifest(self.stage, self.tag)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = asdict(self) | {"hash": self.hash}
        path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")
        return path


def _start(ws: Workspace, stage: str, tag: str, cfg: RunConfig, inputs: list[Path],
           seed: int | None = None, config: dict | None = None) -> Manifest:
    return Manifest(stage, tag, cfg.to_dict() if config is None else config, seed,
                    {ws.rel(p): _digest(p) for p in inputs})


# -- data ------------------------------------------------------------------------


def gen_data(ws: Workspace, cfg: RunConfig) -> list[Path]:
    seed = derive_seed(cfg.seed, "gen-data")
    series, network = ds.generate_synthetic(cfg.sensors, cfg.days, seed, noise_scale=cfg.noise_scale,
                                            noise_persistence=cfg.noise_persistence)
    ws.save_config(cfg)
    ds.write_csv(series, network, ws.flows, ws.sensors)
    man = _start(ws, "gen-data", "", cfg, [], seed)
    outputs = [ws.flows, ws.sensors, ws.config_path]
    man.write(ws, outputs)
    return outputs


def import_data(ws: Workspace, cfg: RunConfig, flows: Path, sensors: Path) -> list[Path]:
    series, network = ds.load_csv(flows, sensors)
    ws.save_config(cfg)
    ds.write_csv(series, network, ws.flows, ws.sensors)
    man = _start(ws, "gen-data", "", cfg, [], None)
    outputs = [ws.flows, ws.sensors, ws.config_path]
    man.write(ws, outputs)
    return outputs


@dataclass
class Splits:
    series: ds.FlowSeries
    network: ds.SensorNetwork
    windows: ds.WindowedDataset
    oracle: ds.WindowedDataset
    attack: ds.WindowedDataset
    holdout: ds.WindowedDataset


def load_splits(ws: Workspace, cfg: RunConfig) -> Splits:
    """Windows with enough calendar history for the historical average, split three ways."""
    ws.require(ws.flows, "gen-data")
    series, network = ds.load_csv(ws.flows, ws.sensors)
    windows = ds.make_windows(series)
    windows = ds.drop_warmup(windows, series.start_time, cfg.ha_min_periods * ds.WEEK_HOURS)
    if len(windows) == 0:
        raise ConfigurationError(
            f"no window has {cfg.ha_min_periods} weeks of history; lower ha_min_periods or use more days")
    oracle, attack, holdout = ds.split(windows, cfg.fractions, derive_seed(cfg.seed, "split"),
                                       cfg.chronological)
    return Splits(series, network, windows, oracle, attack, holdout)


# -- target side -------------------------------------------------------------------


def build_target(kind: str, splits: Splits, cfg: RunConfig) -> ModelBundle:
    """Train one target on every window outside the attack split."""
    seed = derive_seed(cfg.seed, f"train-target:{kind}")
    train = ds.WindowedDataset(
        np.concatenate([splits.oracle.inputs, splits.holdout.inputs]),
        np.concatenate([splits.oracle.targets, splits.holdout.targets]),
        np.concatenate([splits.oracle.sample_times, splits.holdout.sample_times]),
    )
    if kind == "ha":
        model = HAModel(splits.series, k_periods=cfg.ha_periods, min_periods=cfg.ha_min_periods, model_id="ha")
        return ModelBundle(model, None)
    norm = ds.fit_normalizer(train.inputs)
    z_train = ds.WindowedDataset(norm.apply(train.inputs), norm.apply(train.targets), train.sample_times)
    if kind == "lr":
        return ModelBundle(fit_lr(z_train, model_id="lr"), norm)
    if kind in ("gru-fixed", "gru-adaptive"):
        variant = kind.split("-")[1]
        adj = build_adjacency(splits.network, squared=cfg.adjacency_squared,
                              threshold=cfg.adjacency_threshold).weights
        model = GraphGRUModel(splits.network.positions.shape[0], cfg.target_hidden, variant=variant,
                              adjacency=adj if variant == "fixed" else None, seed=seed, model_id=kind)
        train_model(model, z_train.inputs, z_train.targets,
                    TrainConfig(cfg.target_lr, cfg.target_batch_size, cfg.target_epochs, seed))
        return ModelBundle(model, norm)
    raise ConfigurationError(f"unknown target kind {kind!r}; choose from {TARGET_KINDS}")


def train_target(ws: Workspace, kind: str, cfg: RunConfig | None = None) -> Path:
    cfg = cfg or ws.load_config()
    man = _start(ws, "train-target", kind, cfg, [ws.require(ws.flows, "gen-data")],
                 derive_seed(cfg.seed, f"train-target:{kind}"))
    bundle = build_target(kind, load_splits(ws, cfg), cfg)
    path = save_model(ws.target(kind), bundle, extra={"manifest_hash": man.hash})
    man.write(ws, [path])
    return path


def local_endpoint(ws: Workspace, model_id: str, cfg: RunConfig) -> LocalEndpoint:
    bundle = load_model(ws.require(ws.target(model_id), f"train-target --kind {model_id}"))
    return LocalEndpoint(bundle, max_queries=cfg.max_queries)


# -- adversary side ------------------------------------------------------------------


def collect_stage(ws: Workspace, model_id: str, cfg: RunConfig | None = None, endpoint=None) -> Path:
    cfg = cfg or ws.load_config()
    endpoint = endpoint or local_endpoint(ws, model_id, cfg)
    splits = load_splits(ws, cfg)
    man = _start(ws, "collect", model_id, cfg, [ws.flows])
    path = ws.oracle_log(model_id)
    collect(endpoint, splits.oracle.inputs, splits.oracle.sample_times, path=path,
            extra={"manifest_hash": man.hash})
    man.extra = {"records": len(splits.oracle), "queries": endpoint.query_count}
    man.write(ws, [path])
    return path


def substitute_config(cfg: RunConfig, model_id: str) -> SubstituteTrainConfig:
    return SubstituteTrainConfig(cfg.substitute_lr, "adam", cfg.substitute_batch_size, cfg.substitute_epochs,
                                 derive_seed(cfg.seed, f"train-substitute:{model_id}"),
                                 cfg.substitute_channels, cfg.substitute_blocks)


def train_substitute_stage(ws: Workspace, model_id: str, cfg: RunConfig | None = None, endpoint=None) -> Path:
    cfg = cfg or ws.load_config()
    log_path = ws.require(ws.oracle_log(model_id), f"collect --target {model_id}")
    sub_cfg = substitute_config(cfg, model_id)
    man = _start(ws, "train-substitute", model_id, cfg, [log_path], sub_cfg.seed)
    log = OracleLog.load(log_path)
    bundle, result = train_substitute(log, sub_cfg, model_id=f"substitute-{model_id}")
    path = save_model(ws.substitute(model_id), bundle,
                      extra={"manifest_hash": man.hash, "target_id": log.model_id})
    extra = {"loss_curve": result.loss_curve}
    if endpoint is not None or ws.target(model_id).exists():
        endpoint = endpoint or local_endpoint(ws, model_id, cfg)
        holdout = load_splits(ws, cfg).holdout
        extra["holdout_fidelity_rmse"] = fidelity(bundle, endpoint, holdout.inputs, holdout.sample_times)
    man.extra = extra
    man.write(ws, [path])
    return path


ATTACK_FORMAT = "trafficattack-attack"


def attack_stage(ws: Workspace, model_id: str, method: str, cfg: RunConfig | None = None,
                 endpoint=None) -> Path:
    cfg = cfg or ws.load_config()
    config = cfg.attack_config(method)  # bad flags are usage errors, whatever is on disk
    sub_path = ws.require(ws.substitute(model_id), f"train-substitute --target {model_id}")
    log_path = ws.require(ws.oracle_log(model_id), f"collect --target {model_id}")
    man = _start(ws, "attack", f"{model_id}__{method}", cfg, [sub_path, log_path, ws.flows])
    endpoint = endpoint or local_endpoint(ws, model_id, cfg)
    sub = load_model(sub_path)
    splits = load_splits(ws, cfg)
    if cfg.clip_min is None or cfg.clip_max is None:
        lo, hi = adversary_bounds(sub.normalizer, OracleLog.load(log_path).inputs)
        config = config.with_bounds(lo if cfg.clip_min is None else cfg.clip_min,
                                    hi if cfg.clip_max is None else cfg.clip_max)
    out = run_attack(endpoint, sub, splits.attack.inputs, splits.attack.targets, config,
                     splits.attack.sample_times, use_oracle_targets=cfg.use_oracle_targets)
    meta = {"format": ATTACK_FORMAT, "version": 1, "model_id": model_id, "method": method,
            "config": config.to_dict(), "normalizer": [sub.normalizer.mu, sub.normalizer.sigma],
            "manifest_hash": man.hash}
    path = ws.attack(model_id, method)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)),
                 original=out.original_raw, adversarial=out.adversarial_raw,
                 pre_predictions=out.pre_predictions, post_predictions=out.post_predictions,
                 ground_truth=splits.attack.targets, times=splits.attack.sample_times,
                 linf_normalized=out.batch.linf, l2_normalized=out.batch.l2)
    man.write(ws, [path])
    return path


def load_attack(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["meta"]))
            arrays = {k: z[k] for k in z.files if k != "meta"}
    except Exception as exc:
        raise FormatError(f"{path}: not a readable attack file ({exc})") from exc
    if meta.get("format") != ATTACK_FORMAT:
        raise FormatError(f"{path}: not an attack file")
    return meta, arrays


def evaluate_stage(ws: Workspace, model_id: str, method: str, cfg: RunConfig | None = None) -> Path:
    cfg = cfg or ws.load_config()
    att_path = ws.require(ws.attack(model_id, method), f"attack --target {model_id} --method {method}")
    man = _start(ws, "evaluate", f"{model_id}__{method}", cfg, [att_path], config={"bins": cfg.bins})
    meta, a = load_attack(att_path)
    report = build_report(model_id, method, a["ground_truth"], a["pre_predictions"], a["post_predictions"],
                          a["original"], a["adversarial"], meta["config"])
    report.manifest_hash = man.hash
    paths = emit_report(report, ws.report_prefix(model_id, method), bins=cfg.bins)
    man.write(ws, paths)
    return paths[0]


def report_stage(ws: Workspace, l2_scale: float = 1.0) -> tuple[Path, Path]:
    reports_dir = ws.root / "reports"
    paths = sorted(reports_dir.glob("*__*.json")) if reports_dir.exists() else []
    if not paths:
        raise DependencyError("no reports found; run `evaluate` first")
    man = Manifest("report", "", {"l2_scale": l2_scale}, None, {ws.rel(p): _digest(p) for p in paths})
    rows = comparison_rows([load_report(p) for p in paths], l2_scale)
    txt = reports_dir / "table.txt"
    txt.write_text(format_table(rows))
    csv_path = reports_dir / "table.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for row in rows:
            w.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])
    man.write(ws, [txt, csv_path])
    return txt, csv_path


def run_all(ws: Workspace, cfg: RunConfig, targets=TARGET_KINDS, methods=METHODS,
            generate: bool = True) -> list[Path]:
    """Every stage in order, in one process (each stage still goes through disk)."""
    if generate:
        gen_data(ws, cfg)
    reports = []
    for kind in targets:
        train_target(ws, kind, cfg)
        collect_stage(ws, kind, cfg)
        train_substitute_stage(ws, kind, cfg)
        for method in methods:
            attack_stage(ws, kind, method, cfg)
            reports.append(evaluate_stage(ws, kind, method, cfg))
    report_stage(ws)
    return reports
