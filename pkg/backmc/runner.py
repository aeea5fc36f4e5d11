"""
ExperimentRunner - plans a run from a config, then executes it.

Planning resolves the chain builder, the estimator list and the thread
budget; execution builds one chain per model (a CEV volatility sweep gives
several) and prices every payoff with every requested estimator.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

import pandas as pd

from .chain import ChainApproximation, reverse_transitions
from .config import ExperimentConfig
from .generator import ltsa_build, vanilla_price
from .model import ModelKind, ModelSpec
from .payoffs import PayoffKind
from .pricing import PriceEstimate, make_plan, price_backward, price_euler, price_forward
from .quantize import rmqa_build
from .settings import Settings

logger = logging.getLogger(__name__)

RESULT_COLUMNS = ["experiment", "model", "builder", "label", "estimator", "price", "std_error", "ci_low", "ci_high", "n_paths"]


def model_label(model: ModelSpec) -> str:
    if model.kind is ModelKind.CEV:
        return f"cev sigma={model.cev_sigma:g} alpha={model.cev_alpha:g}"
    return f"local_vol {len(model.lv_segments)} segment(s)"


@dataclass
class RunPlan:
    config: ExperimentConfig
    builder: str
    estimators: List[str]
    seed: int
    threads: int


@dataclass
class RunResult:
    plan: RunPlan
    chains: List[ChainApproximation] = field(default_factory=list)
    rows: List[dict] = field(default_factory=list)
    build_time: float = 0.0
    elapsed: float = 0.0

    @property
    def chain(self) -> ChainApproximation:
        return self.chains[0]

    @property
    def estimates(self) -> List[PriceEstimate]:
        return [row["estimate"] for row in self.rows]

    def frame(self, include_wall_time: bool = False) -> pd.DataFrame:
        records = [
            {"experiment": self.plan.config.name, "model": row["model"], "builder": self.plan.builder, **row["estimate"].to_row()}
            for row in self.rows
        ]
        columns = RESULT_COLUMNS + (["wall_time"] if include_wall_time else [])
        return pd.DataFrame(records, columns=columns)


class ExperimentRunner:
    def __init__(self, settings: Optional[Settings] = None, seed: Optional[int] = None):
        self.settings = settings or Settings()
        self.seed_override = seed

    def plan(self, config: ExperimentConfig) -> RunPlan:
        """Resolve seed, threads and estimators without doing any numerical work."""
        threads = self.settings.threads
        if config.run.threads is not None and not self.settings.explicit_threads:
            threads = config.run.threads
        seed = self.seed_override if self.seed_override is not None else config.run.seed
        return RunPlan(
            config=config,
            builder=config.chain.builder,
            estimators=list(config.run.estimators),
            seed=seed,
            threads=threads,
        )

    def build_chain(self, plan: RunPlan, model: Optional[ModelSpec] = None) -> ChainApproximation:
        config = plan.config
        model = model or config.model
        if plan.builder == "rmqa":
            chain = rmqa_build(
                model,
                config.time_grid,
                config.chain.N,
                solver=config.chain.solver,
                init=config.chain.init,
                tol=config.chain.tol,
                max_iter=config.chain.max_iter,
                depth=config.chain.depth,
            )
        else:
            chain = ltsa_build(
                model,
                config.time_grid.times,
                N=config.chain.N,
                width=config.chain.width,
                threads=plan.threads,
            )
        if "backward" in plan.estimators:
            chain = reverse_transitions(chain)
        return chain

    def _price(self, plan: RunPlan, model: ModelSpec, chain: ChainApproximation) -> List[PriceEstimate]:
        config = plan.config
        n_mc = config.run.n_mc
        estimates = []
        for spec in config.payoffs:
            for estimator in plan.estimators:
                if estimator == "euler":
                    estimate = price_euler(model, config.time_grid, spec, n_mc, plan.seed, threads=plan.threads)
                elif estimator == "forward":
                    estimate = price_forward(chain, spec, n_mc, plan.seed, model=model)
                else:
                    estimate = price_backward(
                        chain, spec, make_plan(chain, spec, n_mc), plan.seed, model=model, threads=plan.threads
                    )
                estimates.append(estimate)
                logger.info("%s %s: %.6g (%.2g)", estimate.label, estimator, estimate.price, estimate.std_error)
            if spec.kind in (PayoffKind.VANILLA_CALL, PayoffKind.VANILLA_PUT):
                kind = "call" if spec.kind is PayoffKind.VANILLA_CALL else "put"
                price = vanilla_price(chain, spec.strike, discount=spec.discount, kind=kind)
                estimates.append(PriceEstimate(price, 0.0, 0, "scalar", 0.0, spec.describe()))
        return estimates

    def execute(self, plan: RunPlan) -> RunResult:
        started = time.perf_counter()
        result = RunResult(plan=plan)
        for model in plan.config.models:
            built = time.perf_counter()
            chain = self.build_chain(plan, model)
            result.build_time += time.perf_counter() - built
            logger.info("%s: %s chain ready for %s", plan.config.name, plan.builder, model_label(model))
            result.chains.append(chain)
            label = model_label(model)
            result.rows.extend({"model": label, "estimate": e} for e in self._price(plan, model, chain))
        result.elapsed = time.perf_counter() - started
        return result

    def run(self, config: ExperimentConfig) -> RunResult:
        return self.execute(self.plan(config))
