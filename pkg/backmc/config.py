"""
Experiment configuration: a JSON or YAML document with blocks

    model    dynamics and spot
    time     horizon and number of steps (or explicit observation dates)
    chain    builder (rmqa | ltsa) and its parameters
    payoffs  list of products to price
    run      path budget, seed and estimators

Every error names the dotted field path; syntax errors carry line/column.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from .exceptions import ConfigurationError, ValidationError
from .model import LVSegment, ModelKind, ModelSpec, TimeGrid, load_lv_csv, synthetic_lv_model
from .payoffs import PayoffKind, PayoffSpec
from .quantize import InitScheme, SolverKind

BUILDERS = ("rmqa", "ltsa")
ESTIMATORS = ("euler", "forward", "backward")
_MISSING = object()


@dataclass(frozen=True)
class ChainConfig:
    builder: str = "rmqa"
    N: int = 100
    solver: str = SolverKind.ANDERSON.value
    init: str = InitScheme.EULER_OP.value
    tol: float = 1e-5
    max_iter: int = 1000
    depth: int = 5
    width: float = 5.0


@dataclass(frozen=True)
class RunConfig:
    n_mc: int = 10000
    seed: int = 0
    estimators: Tuple[str, ...] = ("euler", "backward")
    threads: Optional[int] = None


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model: ModelSpec
    time_grid: TimeGrid
    chain: ChainConfig
    payoffs: Tuple[PayoffSpec, ...]
    run: RunConfig = field(default_factory=RunConfig)
    # Extra CEV volatilities swept with the same chain and payoff settings
    sweep: Tuple[ModelSpec, ...] = ()

    @property
    def models(self) -> Tuple[ModelSpec, ...]:
        return (self.model,) + self.sweep


class _Block:
    """Dict wrapper that reports the dotted path of any bad field."""

    def __init__(self, data: Any, path: str):
        if not isinstance(data, dict):
            raise ConfigurationError("expected a mapping", field=path or "<root>")
        self.data = data
        self.path = path
        self.used = set()

    def where(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, kind, default: Any = _MISSING) -> Any:
        self.used.add(key)
        if key not in self.data or self.data[key] is None:
            if default is _MISSING:
                raise ConfigurationError("missing required field", field=self.where(key))
            return default
        value = self.data[key]
        try:
            if kind is bool:
                if not isinstance(value, bool):
                    raise TypeError
                return value
            if kind is int and (isinstance(value, bool) or float(value) != int(value)):
                raise TypeError
            return kind(value)
        except (TypeError, ValueError):
            raise ConfigurationError(f"expected {kind.__name__}, got {value!r}", field=self.where(key)) from None

    def floats(self, key: str, default: Any = _MISSING) -> Tuple[float, ...]:
        self.used.add(key)
        value = self.data.get(key)
        if value is None:
            if default is _MISSING:
                raise ConfigurationError("missing required field", field=self.where(key))
            return default
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError("expected a list of numbers", field=self.where(key))
        try:
            return tuple(float(v) for v in value)
        except (TypeError, ValueError):
            raise ConfigurationError("expected a list of numbers", field=self.where(key)) from None

    def choice(self, key: str, options: Sequence[str], default: Any = _MISSING) -> str:
        value = self.get(key, str, default)
        if value not in options:
            raise ConfigurationError(f"must be one of {', '.join(options)}; got {value!r}", field=self.where(key))
        return value

    def child(self, key: str, required: bool = True) -> Optional["_Block"]:
        self.used.add(key)
        if key not in self.data:
            if required:
                raise ConfigurationError("missing required block", field=self.where(key))
            return None
        return _Block(self.data[key], self.where(key))

    def finish(self) -> None:
        unknown = sorted(set(self.data) - self.used)
        if unknown:
            raise ConfigurationError(f"unknown field(s): {', '.join(unknown)}", field=self.path or "<root>")


def _segments(block: _Block, base_dir: Path) -> List[LVSegment]:
    raw = block.data.get("segments")
    block.used.add("segments")
    if not isinstance(raw, list) or not raw:
        raise ConfigurationError("expected a non-empty list of segments", field=block.where("segments"))
    segments = []
    for i, item in enumerate(raw):
        seg = _Block(item, f"{block.where('segments')}[{i}]")
        end = seg.get("end_time", float)
        if "csv" in seg.data:
            csv_path = Path(seg.get("csv", str))
            x, eta = load_lv_csv(csv_path if csv_path.is_absolute() else base_dir / csv_path)
        else:
            x, eta = seg.floats("x"), seg.floats("eta")
        seg.finish()
        try:
            segments.append(LVSegment(end_time=end, x=x, eta=eta))
        except ValidationError as exc:
            raise ConfigurationError(str(exc), field=seg.path) from exc
    return segments


def _sigmas(block: _Block) -> Tuple[float, ...]:
    raw = block.data.get("sigma")
    if isinstance(raw, list):
        sigmas = block.floats("sigma")
        if not sigmas:
            raise ConfigurationError("expected at least one volatility", field=block.where("sigma"))
        return sigmas
    return (block.get("sigma", float),)


def _model(block: _Block, base_dir: Path) -> Tuple[ModelSpec, ...]:
    """One model, or one per volatility when a CEV ``sigma`` is a list."""
    kind = block.choice("kind", [k.value for k in ModelKind] + ["synthetic_lv"])
    try:
        if kind == "synthetic_lv":
            models = (synthetic_lv_model(x0=block.get("x0", float, 1.0), r=block.get("r", float, 0.0032)),)
        elif kind == ModelKind.CEV.value:
            x0, r = block.get("x0", float), block.get("r", float, 0.0)
            alpha = block.get("alpha", float, 1.0)
            models = tuple(ModelSpec.cev(x0=x0, r=r, sigma=s, alpha=alpha) for s in _sigmas(block))
        else:
            models = (ModelSpec.local_vol(
                x0=block.get("x0", float), r=block.get("r", float, 0.0), segments=_segments(block, base_dir)
            ),)
    except ValidationError as exc:
        raise ConfigurationError(str(exc), field=block.path) from exc
    block.finish()
    return models


def _time(block: _Block) -> TimeGrid:
    try:
        if "dates" in block.data:
            grid = TimeGrid(np.asarray(block.floats("dates")))
        else:
            grid = TimeGrid.uniform(block.get("T", float), block.get("n", int, 51))
    except ValidationError as exc:
        raise ConfigurationError(str(exc), field=block.path) from exc
    block.finish()
    return grid


def _chain(block: Optional[_Block]) -> ChainConfig:
    if block is None:
        return ChainConfig()
    defaults = ChainConfig()
    cfg = ChainConfig(
        builder=block.choice("builder", BUILDERS, defaults.builder),
        N=block.get("N", int, defaults.N),
        solver=block.choice("solver", [s.value for s in SolverKind], defaults.solver),
        init=block.choice("init", [s.value for s in InitScheme], defaults.init),
        tol=block.get("tol", float, defaults.tol),
        max_iter=block.get("max_iter", int, defaults.max_iter),
        depth=block.get("depth", int, defaults.depth),
        width=block.get("width", float, defaults.width),
    )
    minimum = 2 if cfg.builder == "rmqa" else 3
    if cfg.N < minimum:
        raise ConfigurationError(f"must be >= {minimum}", field=block.where("N"))
    if not cfg.tol > 0:
        raise ConfigurationError("must be positive", field=block.where("tol"))
    if cfg.max_iter < 1:
        raise ConfigurationError("must be >= 1", field=block.where("max_iter"))
    if cfg.depth < 0:
        raise ConfigurationError("must be >= 0", field=block.where("depth"))
    block.finish()
    return cfg


def _payoff(block: _Block, model: ModelSpec, horizon: float) -> PayoffSpec:
    kind = block.choice("kind", [k.value for k in PayoffKind])
    try:
        spec = PayoffSpec(
            kind=kind,
            maturity=block.get("maturity", float, horizon),
            rate=block.get("r", float, model.r),
            strike=block.get("K", float, None),
            barrier=block.get("B", float, None),
            bridge_correction=block.get("bridge_correction", bool, True),
            bridge_variance=block.choice("bridge_variance", ("variance", "literal"), "variance"),
            call_dates=block.floats("call_dates", ()),
            coupons=block.floats("coupons", ()),
            call_level=block.get("b", float, None),
            label=block.get("label", str, ""),
        )
    except ValidationError as exc:
        raise ConfigurationError(str(exc), field=block.path) from exc
    if abs(spec.maturity - horizon) > 1e-9:
        raise ConfigurationError(f"maturity {spec.maturity:g} differs from the time horizon {horizon:g}", field=block.where("maturity"))
    block.finish()
    return spec


def _run(block: Optional[_Block], builder: str) -> RunConfig:
    default_estimators = ("euler", "backward") if builder == "rmqa" else ("forward", "backward")
    if block is None:
        return RunConfig(estimators=default_estimators)
    estimators = block.data.get("estimators", list(default_estimators))
    block.used.add("estimators")
    if not isinstance(estimators, list) or not estimators or any(e not in ESTIMATORS for e in estimators):
        raise ConfigurationError(f"expected a list drawn from {', '.join(ESTIMATORS)}", field=block.where("estimators"))
    if builder == "ltsa" and "euler" in estimators:
        raise ConfigurationError("the Euler estimator needs an rmqa chain", field=block.where("estimators"))
    cfg = RunConfig(
        n_mc=block.get("n_mc", int, 10000),
        seed=block.get("seed", int, 0),
        estimators=tuple(estimators),
        threads=block.get("threads", int, None),
    )
    if cfg.n_mc < 1:
        raise ConfigurationError("must be >= 1", field=block.where("n_mc"))
    block.finish()
    return cfg


def parse_config(data: Any, base_dir: Union[str, Path] = ".") -> ExperimentConfig:
    root = _Block(data, "")
    name = root.get("name", str, "experiment")
    models = _model(root.child("model"), Path(base_dir))
    model = models[0]
    time_grid = _time(root.child("time"))
    chain = _chain(root.child("chain", required=False))
    raw_payoffs = root.data.get("payoffs")
    root.used.add("payoffs")
    if not isinstance(raw_payoffs, list) or not raw_payoffs:
        raise ConfigurationError("expected a non-empty list of payoffs", field="payoffs")
    payoffs = tuple(_payoff(_Block(p, f"payoffs[{i}]"), model, time_grid.T) for i, p in enumerate(raw_payoffs))
    run = _run(root.child("run", required=False), chain.builder)
    root.finish()
    return ExperimentConfig(
        name=name, model=model, time_grid=time_grid, chain=chain, payoffs=payoffs, run=run, sweep=models[1:]
    )


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate a JSON (or .yaml/.yml) experiment file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from exc
    if path.suffix.lower() in (".yaml", ".yml"):
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = mark.line + 1 if mark is not None else None
            column = mark.column + 1 if mark is not None else None
            raise ConfigurationError(f"invalid YAML: {getattr(exc, 'problem', exc)}", line=line, column=column) from exc
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"invalid JSON: {exc.msg}", line=exc.lineno, column=exc.colno) from exc
    return parse_config(data, base_dir=path.parent)


def config_summary(config: ExperimentConfig) -> Dict[str, Any]:
    return {
        "name": config.name,
        "model": config.model.kind.value,
        "models": len(config.models),
        "builder": config.chain.builder,
        "N": config.chain.N,
        "n": config.time_grid.n,
        "T": config.time_grid.T,
        "payoffs": len(config.payoffs),
        "n_mc": config.run.n_mc,
        "seed": config.run.seed,
    }
