"""
HLSIRM - simulate command

Draws (or loads) a generating state and writes a synthetic dataset with
its truth dump.
"""
import argparse
import logging

from commands.context import DATASET_CSV, TRUTH_JSON, RunContext
from models.schemas import RunConfig, TruthDesign
from services import data_service
import storage
from utils.helpers import derive_seed

logger = logging.getLogger(__name__)

NAME = "simulate"


def register(subparsers, parents) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(NAME, parents=parents, help="Simulate a dataset from the model")
    parser.set_defaults(handler=run)
    return parser


def run(config: RunConfig) -> int:
    ctx = RunContext(config)
    opts = config.simulate
    hp = config.hyperparameters
    extra = {}

    if opts.truth:
        truth = storage.load_truth(opts.truth)
        logger.info("Simulating from truth file %s", opts.truth)
        dataset, state = data_service.simulate_dataset(
            truth,
            seed=derive_seed(config.seed, "responses"),
            phi=hp.phi,
            suppress_residuals=opts.suppress_residuals,
        )
    elif opts.design == TruthDesign.SEPARATED:
        truth = data_service.separated_truth(
            hp,
            opts.sizes(),
            opts.items,
            seed=derive_seed(config.seed, "truth"),
            group_magnitude=opts.group_magnitude,
            item_cones=opts.item_cones,
            cone_half_angle_deg=opts.cone_half_angle_deg,
        )
        dataset, state = data_service.simulate_dataset(
            truth,
            seed=derive_seed(config.seed, "responses"),
            phi=hp.phi,
            suppress_residuals=opts.suppress_residuals,
        )
        if opts.item_cones is not None:
            extra["item_cones"] = data_service.cone_labels(opts.items, opts.item_cones)
    else:
        dataset, state = data_service.simulate_dataset(
            hp,
            seed=config.seed,
            group_sizes=opts.sizes(),
            p=opts.items,
            suppress_residuals=opts.suppress_residuals,
        )

    fingerprint = data_service.dataset_fingerprint(dataset)
    banner = f"{ctx.banner}\n# K={dataset.K} N={dataset.N} p={dataset.p}"
    data_service.save_dataset(dataset, ctx.path(DATASET_CSV), banner=banner)
    storage.save_truth(
        ctx.path(TRUTH_JSON),
        state,
        meta=ctx.meta(fingerprint),
        group_ids=dataset.group_ids,
        item_ids=dataset.item_ids,
        **extra,
    )
    logger.info("Wrote %s and %s to %s", DATASET_CSV, TRUTH_JSON, ctx.out)
    return 0
