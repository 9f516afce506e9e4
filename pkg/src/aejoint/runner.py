"""Config-driven experiment orchestration.

A run lives in one output directory::

    corpus/{clean,noise}/manifest.jsonl   synthetic or indexed corpora
    mixtures/<split>.jsonl                evaluation mixture listing
    checkpoints/<strategy>/seed<k>.pt     frozen models per (strategy, seed)
    logs/<strategy>/seed<k>.jsonl         per-batch and per-epoch training records
    results/grid.json                     metric grid with per-seed values and provenance
    results/results.txt                   aligned table

Every artifact starts with a header that carries the config hash.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from .corpus import (
    Manifest,
    MixturePlanSpec,
    build_mixture_set,
    class_names,
    eval_set_id,
    ingest_corpus,
    load_clips,
    synth_task_corpora,
)
from .enhancer import UNetConfig, build_unet
from .errors import AEJointError, ConfigError, DataError, InvalidConfig, TrainingDivergence
from .strategies import (
    AE_SEED_OFFSET,
    STRATEGIES,
    USES_ENHANCER,
    StrategyConfig,
    TaskData,
    evaluate,
    run_strategy,
)
from .tasks import ASR_ALPHABET, TaskModelConfig, build_task_model, get_task

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
FORMAT_VERSION = 1
OUTPUT_ROOT_ENV = "AEJOINT_OUTPUT_ROOT"
DEFAULT_SEEDS = (0, 1, 2)
MISSING = "−"

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3, 4


class MissingCheckpoint(DataError):
    def __init__(self, path):
        super().__init__(f"no checkpoint at {path}; run `train` for this strategy and seed first")
        self.path = Path(path)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, TrainingDivergence):
        return EXIT_DIVERGENCE
    if isinstance(exc, (ConfigError, InvalidConfig)):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    return EXIT_FAILURE


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------

@dataclass
class CorpusRef:
    """Where the clean and interference corpora come from.

    ``synthetic`` renders them from ``seed``; ``manifest`` reads existing
    manifest files; ``ingest`` indexes WAV trees under ``clean`` and ``noise``.
    """

    source: str = "synthetic"
    seed: int = 0
    sizes: dict = field(default_factory=lambda: {"train": 20, "dev": 0, "test": 20})
    noise_sizes: dict = field(default_factory=lambda: {"train": 60, "dev": 0, "test": 30})
    n_classes: Optional[int] = None
    clean: Optional[str] = None
    noise: Optional[str] = None
    labeling: str = "directory"

    def __post_init__(self):
        if self.source not in ("synthetic", "manifest", "ingest"):
            raise ConfigError(f"unknown corpus source {self.source!r}")
        if self.source != "synthetic" and not (self.clean and self.noise):
            raise ConfigError(f"corpus source {self.source!r} needs both `clean` and `noise` paths")


@dataclass
class ExperimentConfig:
    task: str = "scr"
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    output_dir: str = "runs/default"
    corpus: CorpusRef = field(default_factory=CorpusRef)
    # train_snr_range / eval_snrs; unset keys follow the task convention
    mixture: dict = field(default_factory=dict)
    # StrategyConfig fields shared by every strategy, then per-strategy patches
    training: dict = field(default_factory=dict)
    strategy_overrides: dict = field(default_factory=dict)
    enhancer: dict = field(default_factory=dict)
    task_model: dict = field(default_factory=dict)
    eval_split: str = "test"
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {self.schema_version} is not supported "
                              f"(expected {SCHEMA_VERSION})")
        if isinstance(self.corpus, dict):
            self.corpus = _build(CorpusRef, self.corpus, "corpus")
        try:
            self.task = get_task(self.task).name
        except InvalidConfig as exc:
            raise ConfigError(str(exc)) from None
        if isinstance(self.strategies, str):
            self.strategies = [self.strategies]
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        for s in list(self.strategies) + list(self.strategy_overrides):
            if s not in STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}; expected one of {', '.join(STRATEGIES)}")
        if isinstance(self.seeds, int):
            self.seeds = [self.seeds]
        if not self.seeds or not all(isinstance(k, int) for k in self.seeds):
            raise ConfigError("seeds must be a non-empty list of integers")
        if self.eval_split not in ("dev", "test"):
            raise ConfigError("eval_split must be dev or test")
        unknown = set(self.mixture) - {"train_snr_range", "eval_snrs"}
        if unknown:
            raise ConfigError(f"unknown mixture keys: {sorted(unknown)}")
        # fail early on bad model or training settings
        self.unet_config()
        self.task_model_config()
        for s in self.strategies:
            self.strategy_config(s, self.seeds[0])

    # -- derived objects ---------------------------------------------------
    def strategy_config(self, strategy: str, seed: int) -> StrategyConfig:
        kw = {**self.training, **self.strategy_overrides.get(strategy, {})}
        if "snr_train_range" in kw:
            raise ConfigError("set the training SNR range under mixture.train_snr_range")
        kw.update(strategy=strategy, task=self.task, seed=seed, snr_train_range=self.plan(seed).train_snr_range)
        return _build(StrategyConfig, kw, f"training ({strategy})")

    def strategy_configs(self, seed: int) -> list[StrategyConfig]:
        return [self.strategy_config(s, seed) for s in self.strategies]

    def unet_config(self) -> UNetConfig:
        return _build(UNetConfig, self.enhancer, "enhancer")

    def task_model_config(self) -> TaskModelConfig:
        return _build(TaskModelConfig, self.task_model, "task_model")

    def plan(self, seed: int) -> MixturePlanSpec:
        base = MixturePlanSpec.for_task(self.task, seed)
        return MixturePlanSpec(
            tuple(self.mixture.get("train_snr_range", base.train_snr_range)),
            tuple(self.mixture.get("eval_snrs", base.eval_snrs)),
            seed,
            speech_is_interference=base.speech_is_interference,
        )

    def eval_plan(self) -> MixturePlanSpec:
        """Evaluation mixtures are fixed by the corpus seed so every training seed sees the same test set."""
        return self.plan(self.corpus.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        """Digest of everything that shapes a single (strategy, seed) result.

        The output location and the seed and strategy selections are left out,
        so training one seed at a time and evaluating them together agree.
        """
        d = self.to_dict()
        for key in ("output_dir", "seeds", "strategies"):
            d.pop(key)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(values).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError, AEJointError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path=None, **overrides) -> ExperimentConfig:
    """Read a YAML config (or start from defaults) and apply command-line overrides.

    Recognised overrides: ``task``, ``seed``, ``strategy``, ``output_dir``.
    """
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    raw = copy.deepcopy(raw)
    if overrides.get("task") is not None:
        raw["task"] = overrides["task"]
    if overrides.get("seed") is not None:
        raw["seeds"] = [int(overrides["seed"])]
    if overrides.get("strategy") is not None:
        raw["strategies"] = [overrides["strategy"]]
    if overrides.get("output_dir") is not None:
        raw["output_dir"] = str(overrides["output_dir"])
    return _build(ExperimentConfig, raw, "config")


def resolve_output_dir(cfg: ExperimentConfig) -> Path:
    """Relative output directories hang off ``$AEJOINT_OUTPUT_ROOT`` when it is set."""
    out = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable ({exc})") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def select_device(name: str = "cpu") -> torch.device:
    if name == "cpu":
        return torch.device("cpu")
    if name == "accelerator":
        if torch.cuda.is_available():
            return torch.device("cuda")
        mps = getattr(torch.backends, "mps", None)
        if mps is not None and mps.is_available():
            return torch.device("mps")
        raise ConfigError("--device accelerator requested but no accelerator is available")
    raise ConfigError(f"unknown device {name!r}")


def _header(cfg: ExperimentConfig, kind: str, **extra) -> dict:
    return {"format_version": FORMAT_VERSION, "kind": kind, "config_hash": cfg.config_hash(), **extra}


def _write_json(path: Path, obj) -> Path:
    # insertion order is kept so the header comes first; every dict is built in a fixed order
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def _corpus_paths(out: Path) -> tuple[Path, Path]:
    return out / "corpus" / "clean" / "manifest.jsonl", out / "corpus" / "noise" / "manifest.jsonl"


def synth(cfg: ExperimentConfig, out: Path) -> tuple[Manifest, Manifest]:
    """Materialise both corpora under ``out/corpus`` and stamp their manifests."""
    ref = cfg.corpus
    clean_path, noise_path = _corpus_paths(out)
    if ref.source == "synthetic":
        clean, noise = synth_task_corpora(cfg.task, ref.sizes, ref.noise_sizes, ref.seed, out / "corpus",
                                          ref.n_classes)
    elif ref.source == "manifest":
        clean, noise = Manifest.read(ref.clean), Manifest.read(ref.noise)
    else:
        labeling = "transcript" if cfg.task == "asr" else ref.labeling
        clean = ingest_corpus(ref.clean, labeling)
        noise = ingest_corpus(ref.noise, "directory")
    if not len(clean) or not len(noise):
        raise DataError("clean and noise corpora must both be non-empty")
    header = _header(cfg, "manifest", corpus=_corpus_spec(cfg))
    clean.write(clean_path, header)
    noise.write(noise_path, header)
    return Manifest.read(clean_path), Manifest.read(noise_path)


def _corpus_spec(cfg: ExperimentConfig) -> dict:
    return {"task": cfg.task, **asdict(cfg.corpus)}


def _manifest_header(path: Path) -> dict:
    with path.open(encoding="utf-8") as fh:
        first = fh.readline()
    try:
        return json.loads(first).get("header") or {}
    except (json.JSONDecodeError, AttributeError):
        return {}


def load_corpora(cfg: ExperimentConfig, out: Path) -> tuple[Manifest, Manifest]:
    """Corpora for this run, (re)building them when missing or made from different corpus settings."""
    clean_path, noise_path = _corpus_paths(out)
    if not (clean_path.exists() and noise_path.exists()):
        return synth(cfg, out)
    if _manifest_header(clean_path).get("corpus") != _corpus_spec(cfg):
        log.warning("corpus under %s was built from other corpus settings; rebuilding", out / "corpus")
        return synth(cfg, out)
    return Manifest.read(clean_path), Manifest.read(noise_path)


def label_space(cfg: ExperimentConfig, clean: Manifest) -> list:
    if cfg.task == "asr":
        return list(ASR_ALPHABET)
    if cfg.corpus.source == "synthetic":
        return class_names(cfg.task, cfg.corpus.n_classes)
    return sorted({str(label) for label in clean.labels()})


def mix(cfg: ExperimentConfig, out: Path) -> Path:
    """Write the evaluation mixture listing (pairing, crop draw and SNR tag per item)."""
    clean, noise = load_corpora(cfg, out)
    plan = cfg.eval_plan()
    split = cfg.eval_split
    eid = eval_set_id(clean, noise, plan, split)
    path = out / "mixtures" / f"{split}.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"header": _header(cfg, "mixtures", split=split, eval_set_id=eid,
                                              plan=asdict(plan))}, sort_keys=True)]
    for s in build_mixture_set(clean, noise, plan, split):
        lines.append(json.dumps({"item": s.item_id, "noise": s.meta["noise_id"], "snr_db": s.grid_snr_db,
                                 "label": s.label}, sort_keys=True, ensure_ascii=False))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def checkpoint_path(out: Path, strategy: str, seed: int) -> Path:
    return out / "checkpoints" / strategy / f"seed{seed}.pt"


def log_path(out: Path, strategy: str, seed: int) -> Path:
    return out / "logs" / strategy / f"seed{seed}.jsonl"


def state_id(state: dict) -> str:
    """Content hash over every tensor of a nested state dict."""
    h = hashlib.sha256()
    for part in ("cat", "ae"):
        for name, tensor in sorted((state.get(part) or {}).items()):
            h.update(f"{part}.{name}".encode())
            h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def train(cfg: ExperimentConfig, out: Path, strategy: str, seed: int,
          device: torch.device = torch.device("cpu")) -> Path:
    """Train one (strategy, seed) and write its checkpoint and log."""
    clean, noise = load_corpora(cfg, out)
    labels = label_space(cfg, clean)
    scfg = cfg.strategy_config(strategy, seed)
    ucfg, tcfg = cfg.unet_config(), cfg.task_model_config()
    data = TaskData(cfg.task, labels, load_clips(clean, "train"), load_clips(noise, "train"), cfg.plan(seed))
    models = {"cat": build_task_model(cfg.task, labels, tcfg, seed=seed).to(device)}
    if scfg.uses_enhancer:
        models["ae"] = build_unet(ucfg, seed=seed + AE_SEED_OFFSET).to(device)

    lpath = log_path(out, strategy, seed)
    lpath.parent.mkdir(parents=True, exist_ok=True)
    with lpath.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": _header(cfg, "training_log", strategy=strategy, seed=seed)},
                            sort_keys=True) + "\n")

        def sink(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

        result = run_strategy(scfg, data, ucfg, tcfg, models=models, log_sink=sink)

    state = {"cat": {k: v.cpu() for k, v in result.cat.state_dict().items()},
             "ae": {k: v.cpu() for k, v in result.ae.state_dict().items()} if result.ae is not None else None}
    payload = {
        **_header(cfg, "checkpoint"),
        "strategy": strategy,
        "seed": seed,
        "task": cfg.task,
        "label_space": labels,
        "configs": {"strategy": scfg.to_dict(), "enhancer": asdict(ucfg), "task_model": asdict(tcfg)},
        "state": state,
        "checkpoint_id": state_id(state),
    }
    path = checkpoint_path(out, strategy, seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    log.info("saved %s (%s)", path, payload["checkpoint_id"])
    return path


def load_checkpoint(path, device: torch.device = torch.device("cpu")):
    """Rebuild frozen models from a checkpoint. Returns ``(payload, cat, ae_or_None)``."""
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise DataError(f"cannot read checkpoint {path} ({exc})") from None
    if payload.get("format_version") != FORMAT_VERSION or payload.get("kind") != "checkpoint":
        raise DataError(f"{path} is not a checkpoint of format {FORMAT_VERSION}")
    if state_id(payload["state"]) != payload["checkpoint_id"]:
        raise DataError(f"{path}: stored tensors do not match checkpoint id {payload['checkpoint_id']}")
    configs = payload["configs"]
    cat = build_task_model(payload["task"], payload["label_space"], TaskModelConfig(**configs["task_model"]))
    cat.load_state_dict(payload["state"]["cat"])
    cat.to(device).eval()
    ae = None
    if payload["state"]["ae"] is not None:
        ae = build_unet(UNetConfig(**configs["enhancer"]))
        ae.load_state_dict(payload["state"]["ae"])
        ae.to(device).eval()
    for model in (cat, ae):
        if model is not None:
            for p in model.parameters():
                p.requires_grad_(False)
    return payload, cat, ae


# --------------------------------------------------------------------------
# Results grid
# --------------------------------------------------------------------------

def snr_column(snr: float) -> str:
    return f"{snr:g} dB"


@dataclass
class ResultsGrid:
    """Strategy x (Inf, eval SNRs, average) table of percent metric values."""

    task: str
    metric: str
    seeds: list
    snrs: list
    rows: dict = field(default_factory=dict)  # strategy -> column -> value or None
    per_seed: dict = field(default_factory=dict)  # strategy -> column -> [value per seed]
    provenance: dict = field(default_factory=dict)  # strategy -> column -> {checkpoints, eval_set}
    failures: list = field(default_factory=list)
    config_hash: str = ""
    eval_set_id: str = ""

    @property
    def columns(self) -> list[str]:
        return ["Inf"] + [snr_column(s) for s in self.snrs] + ["average"]

    @property
    def lower_is_better(self) -> bool:
        return self.metric == "wer"

    def set_row(self, strategy: str, values: dict):
        """``values`` maps column -> per-seed list (or None when a seed failed)."""
        row, seeds = {}, {}
        for col in self.columns[:-1]:
            vals = values.get(col)
            if col == "Inf" and strategy != "baseline":
                vals = None
            seeds[col] = vals
            row[col] = float(np.mean(vals)) if vals and all(v is not None for v in vals) else None
        finite = [row[snr_column(s)] for s in self.snrs]
        row["average"] = float(np.mean(finite)) if finite and all(v is not None for v in finite) else None
        self.rows[strategy] = row
        self.per_seed[strategy] = seeds

    def average_consistent(self, tol: float = 1e-9) -> bool:
        for row in self.rows.values():
            finite = [row[snr_column(s)] for s in self.snrs]
            if row["average"] is None:
                continue
            if abs(row["average"] - sum(finite) / len(finite)) > tol:
                return False
        return True

    def to_json(self) -> dict:
        return {
            "header": {"format_version": FORMAT_VERSION, "kind": "results_grid", "config_hash": self.config_hash},
            "task": self.task,
            "metric": self.metric,
            "seeds": list(self.seeds),
            "snrs": list(self.snrs),
            "columns": self.columns,
            "rows": self.rows,
            "per_seed": self.per_seed,
            "provenance": self.provenance,
            "failures": self.failures,
            "eval_set_id": self.eval_set_id,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ResultsGrid":
        return cls(d["task"], d["metric"], d["seeds"], d["snrs"], d["rows"], d["per_seed"], d["provenance"],
                   d.get("failures", []), d["header"]["config_hash"], d.get("eval_set_id", ""))

    def render(self) -> str:
        metric = {"accuracy": "accuracy %", "uar": "UAR %", "wer": "WER % (lower is better)"}[self.metric]
        seeds = ", ".join(str(k) for k in self.seeds)
        lines = [
            f"# config {self.config_hash}",
            f"# task {self.task}, metric {metric}",
            f"# mean over {len(self.seeds)} seed(s) [{seeds}]; the seed count is a run convention",
        ]
        if self.eval_set_id:
            lines.append(f"# eval set {self.eval_set_id}")
        table = [["Methods"] + self.columns]
        for strategy, row in self.rows.items():
            table.append([strategy] + [MISSING if row[c] is None else f"{row[c]:.2f}" for c in self.columns])
        widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
        for r in table:
            cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
            lines.append("  ".join(cells).rstrip())
        for f in self.failures:
            lines.append(f"# failed: {f['strategy']} seed {f['seed']}: {f['error']}")
        return "\n".join(lines) + "\n"


def grid_path(out: Path) -> Path:
    return out / "results" / "grid.json"


def _pct(value: float) -> float:
    return round(100.0 * value, 10)


def evaluate_checkpoints(cfg: ExperimentConfig, out: Path, skip: Sequence[tuple] = (),
                         failures: Sequence[dict] = (), device: torch.device = torch.device("cpu")) -> ResultsGrid:
    """Score every (strategy, seed) checkpoint on the fixed-SNR eval sets and persist the grid.

    Pairs in ``skip`` (failed training runs) become missing cells; any other
    missing checkpoint is an error.
    """
    clean, noise = load_corpora(cfg, out)
    task = get_task(cfg.task)
    plan = cfg.eval_plan()
    split = cfg.eval_split
    eid = eval_set_id(clean, noise, plan, split)
    listing = out / "mixtures" / f"{split}.jsonl"
    if listing.exists():
        head = json.loads(listing.read_text(encoding="utf-8").splitlines()[0])["header"]
        if head.get("eval_set_id") != eid:
            raise DataError(f"{listing} was built for eval set {head.get('eval_set_id')}, corpora give {eid}")
    clean_clips = load_clips(clean, split)
    if not clean_clips:
        raise DataError(f"corpus has no {split} clips")
    mixtures = list(build_mixture_set(clean_clips, load_clips(noise, split), plan, split))
    by_snr = {s: [m for m in mixtures if m.grid_snr_db == s] for s in plan.eval_snrs}

    grid = ResultsGrid(cfg.task, task.metric, list(cfg.seeds), list(plan.eval_snrs),
                       failures=list(failures), config_hash=cfg.config_hash(), eval_set_id=eid)
    skip = set(skip)
    for strategy in cfg.strategies:
        values: dict = {c: [] for c in grid.columns[:-1]}
        ids = []
        for seed in cfg.seeds:
            if (strategy, seed) in skip:
                values = {c: None for c in values}
                ids.append(None)
                continue
            payload, cat, ae = load_checkpoint(checkpoint_path(out, strategy, seed), device)
            if payload["config_hash"] != cfg.config_hash():
                raise DataError(f"{checkpoint_path(out, strategy, seed)} was trained under config "
                                f"{payload['config_hash']}, current config is {cfg.config_hash()}")
            ids.append(payload["checkpoint_id"])
            labels = payload["label_space"]
            front = ae if strategy in USES_ENHANCER else None
            if strategy == "baseline" and values["Inf"] is not None:
                values["Inf"].append(_pct(evaluate(cat, clean_clips, task, labels, front)))
            for snr in plan.eval_snrs:
                col = snr_column(snr)
                if values[col] is not None:
                    values[col].append(_pct(evaluate(cat, by_snr[snr], task, labels, front)))
            log.info("evaluated %s seed %d", strategy, seed)
        grid.set_row(strategy, values)
        grid.provenance[strategy] = {
            c: {"checkpoints": ids, "eval_set": f"{eid}/{'clean' if c == 'Inf' else c}"}
            for c in grid.columns[:-1]
        }
    _write_json(grid_path(out), grid.to_json())
    return grid


def report(out: Path) -> Path:
    """Render ``results/grid.json`` to ``results/results.txt``."""
    gpath = grid_path(out)
    if not gpath.exists():
        raise DataError(f"no results grid at {gpath}; run `eval` first")
    grid = ResultsGrid.from_json(json.loads(gpath.read_text(encoding="utf-8")))
    path = out / "results" / "results.txt"
    path.write_text(grid.render(), encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# Full pipeline
# --------------------------------------------------------------------------

@dataclass
class RunOutcome:
    grid: ResultsGrid
    output_dir: Path
    exit_code: int


def run_experiment(cfg: ExperimentConfig, device: str = "cpu") -> RunOutcome:
    """synth, mix, train every (strategy, seed), evaluate, report.

    A failing (strategy, seed) is recorded and its cells are left missing; the
    remaining strategies still run. The exit code reflects the most severe
    failure (divergence first, then config, then data).
    """
    dev = select_device(device)
    out = resolve_output_dir(cfg)
    synth(cfg, out)
    mix(cfg, out)
    failures, skip = [], []
    for strategy in cfg.strategies:
        for seed in cfg.seeds:
            try:
                train(cfg, out, strategy, seed, dev)
            except AEJointError as exc:
                log.error("%s seed %d failed: %s", strategy, seed, exc)
                failures.append({"strategy": strategy, "seed": seed, "error": type(exc).__name__,
                                 "message": str(exc), "exit_code": exit_code_for(exc)})
                skip.append((strategy, seed))
    grid = evaluate_checkpoints(cfg, out, skip, failures, dev)
    report(out)
    code = EXIT_OK
    for candidate in (EXIT_DIVERGENCE, EXIT_CONFIG, EXIT_DATA, EXIT_FAILURE):
        if any(f["exit_code"] == candidate for f in failures):
            code = candidate
            break
    return RunOutcome(grid, out, code)
