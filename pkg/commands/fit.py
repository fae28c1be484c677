"""
HLSIRM - fit command

Runs the sampler on a dataset and writes the chain file plus a fit report
with acceptance rates and the health verdict.
"""
import argparse
import logging
import math
from typing import Dict, List

from commands.context import CHAIN_BIN, CHECKPOINT, DATASET_CSV, FIT_JSON, RunContext
from models.schemas import RunConfig
from services import data_service
from services.sampler import run_chain
import storage

logger = logging.getLogger(__name__)

NAME = "fit"
EXIT_UNHEALTHY = 2


def register(subparsers, parents) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(NAME, parents=parents, help="Fit the model by MCMC")
    parser.add_argument("--no-resume", dest="resume", action="store_false", default=None,
                        help="Ignore an existing checkpoint")
    parser.set_defaults(handler=run)
    return parser


def unhealthy_blocks(rates: Dict[str, float], low: float, high: float) -> List[str]:
    """Blocks whose defined post-burn-in rate falls outside [low, high]."""
    return sorted(
        block for block, rate in rates.items()
        if not math.isnan(rate) and not low <= rate <= high
    )


def run(config: RunConfig) -> int:
    ctx = RunContext(config)
    opts = config.fit
    dataset_path = ctx.input_path(opts.dataset, DATASET_CSV)
    data = data_service.load_dataset(dataset_path, rules=opts.recoding)

    chain = run_chain(
        data,
        config.hyperparameters,
        config.chain,
        seed=config.chain_seed(),
        threads=config.threads,
        checkpoint_path=ctx.path(CHECKPOINT),
        resume=opts.resume,
    )

    meta = ctx.meta(chain.data_fingerprint)
    storage.write_chain(ctx.path(CHAIN_BIN), chain, meta=meta)

    rates = chain.acceptance_log.rates(burn_in=False)
    failing = unhealthy_blocks(rates, opts.min_acceptance, opts.max_acceptance)
    storage.write_json(
        ctx.path(FIT_JSON),
        {
            "dataset": str(dataset_path),
            "n_samples": len(chain),
            "acceptance": {
                "burn_in": chain.acceptance_log.rates(burn_in=True),
                "sampling": rates,
            },
            "health": {
                "min_acceptance": opts.min_acceptance,
                "max_acceptance": opts.max_acceptance,
                "failing_blocks": failing,
                "ok": not failing,
            },
        },
        meta=meta,
    )

    if failing:
        logger.error(
            "Acceptance outside [%.3f, %.3f] for %s: %s",
            opts.min_acceptance, opts.max_acceptance, failing, {b: rates[b] for b in failing},
        )
        return EXIT_UNHEALTHY
    logger.info("Fit finished with %d samples; acceptance %s", len(chain), rates)
    return 0
