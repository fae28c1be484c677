"""
HLSIRM - analyze command

Post-processes a fitted chain: alignment, summaries and interaction map,
item clustering, posterior predictive checks, classification metrics and
convergence diagnostics.
"""
import argparse
import logging
from typing import Any, Dict, List

import numpy as np
import pandas as pd

from commands.context import (
    CHAIN_BIN,
    CLUSTERS_CSV,
    CLUSTERS_JSON,
    DATASET_CSV,
    DIAGNOSTICS_JSON,
    GROUP_ALIGNMENT_CSV,
    ITEM_PRODUCTS_CSV,
    MAP_CSV,
    METRICS_JSON,
    PPC_CSV,
    PPC_JSON,
    SUMMARY_JSON,
    RunContext,
)
from models.domain import AlignedChain, InteractionSummary, ResponseDataset
from models.schemas import RunConfig
from services import clustering, data_service, evaluate, postprocess
import storage
from utils.errors import ConfigurationError, UndefinedMetricError
from utils.helpers import derive_seed

logger = logging.getLogger(__name__)

NAME = "analyze"


def register(subparsers, parents) -> argparse.ArgumentParser:
    parser = subparsers.add_parser(NAME, parents=parents, help="Summarize, cluster and check a fitted chain")
    parser.set_defaults(handler=run)
    return parser


# ============== Sections ==============

def _labelled(summary, ids: List[str]) -> List[Dict[str, Any]]:
    return [
        {"id": entity, "mean": float(summary.mean[i]), "sd": float(summary.sd[i]),
         "lower": float(summary.lower[i]), "upper": float(summary.upper[i])}
        for i, entity in enumerate(ids)
    ]


def summary_document(aligned: AlignedChain, interaction: InteractionSummary, data: ResponseDataset) -> Dict[str, Any]:
    return {
        "n_samples": len(aligned),
        "align_on": aligned.align_on.value,
        "degenerate_alignments": int(sum(aligned.degenerate)),
        "alpha_tilde": _labelled(interaction.alpha_tilde, data.group_ids),
        "beta_tilde": _labelled(interaction.beta_tilde, data.item_ids),
        "group_intercepts": _labelled(aligned.summary["group_intercepts"], data.group_ids),
        "group_variances": _labelled(aligned.summary["group_variances"], data.group_ids),
        "item_intercepts": _labelled(aligned.summary["item_intercepts"], data.item_ids),
        "psi_z": aligned.summary["psi_z"].to_dict(),
        "psi_w": aligned.summary["psi_w"].to_dict(),
        "group_positions": aligned.summary["group_positions"].to_dict(),
        "item_positions": aligned.summary["item_positions"].to_dict(),
    }


def item_products_frame(interaction: InteractionSummary, item_ids: List[str]) -> pd.DataFrame:
    frame = pd.DataFrame(postprocess.item_inner_products(interaction), columns=item_ids)
    frame.insert(0, "item_id", item_ids)
    return frame


def cluster_rows(selection, item_ids: List[str]) -> List[Dict[str, Any]]:
    return [
        {"item_id": item_id, "k": result.k, "label": int(result.labels[j])}
        for result in selection.results
        for j, item_id in enumerate(item_ids)
    ]


def _write_clusters(ctx: RunContext, config: RunConfig, interaction: InteractionSummary, data: ResponseDataset, meta) -> None:
    opts = config.analyze
    admissible = [k for k in range(opts.k_min, opts.k_max + 1) if 2 <= k < data.p]
    if not admissible:
        logger.warning("No admissible cluster count in [%d, %d] for p=%d; skipping clustering", opts.k_min, opts.k_max, data.p)
        storage.write_csv(ctx.path(CLUSTERS_CSV), pd.DataFrame(columns=["item_id", "k", "label"]), banner=ctx.banner)
        storage.write_json(ctx.path(CLUSTERS_JSON), {"skipped": f"no admissible k for p={data.p}"}, meta=meta)
        return

    selection = clustering.select_k(
        interaction.item_positions,
        admissible,
        seed=derive_seed(config.seed, "clustering"),
        restarts=opts.kmeans_restarts,
        affinity_power=opts.affinity_power,
        tolerance=opts.silhouette_tolerance,
    )
    storage.write_csv(ctx.path(CLUSTERS_CSV), cluster_rows(selection, data.item_ids), banner=ctx.banner)
    storage.write_json(ctx.path(CLUSTERS_JSON), selection.to_dict(), meta=meta)

    chosen = selection.result(selection.recommended_k)
    storage.write_csv(
        ctx.path(GROUP_ALIGNMENT_CSV),
        clustering.group_cluster_alignment(
            interaction.group_positions, interaction.item_positions, chosen.labels, data.group_ids, data.item_ids
        ),
        banner=ctx.banner,
    )


def _write_metrics(ctx: RunContext, config: RunConfig, aligned: AlignedChain, data: ResponseDataset, meta) -> None:
    opts = config.analyze
    p_hat = evaluate.fitted_probabilities(
        aligned, data, mode=opts.fitted_mode, draws=opts.out_of_sample_draws, seed=derive_seed(config.seed, "fitted")
    )
    try:
        report = evaluate.classification_metrics(p_hat, data)
    except UndefinedMetricError as exc:
        logger.warning("Classification metrics skipped: %s", exc.message)
        storage.write_json(ctx.path(METRICS_JSON), {"skipped": exc.message, "fitted_mode": opts.fitted_mode.value}, meta=meta)
        return
    storage.write_json(ctx.path(METRICS_JSON), {**report.to_dict(), "fitted_mode": opts.fitted_mode.value}, meta=meta)


def _write_diagnostics(ctx: RunContext, aligned: AlignedChain, meta) -> None:
    try:
        report = evaluate.convergence_diagnostics(aligned)
    except UndefinedMetricError as exc:
        logger.warning("Convergence diagnostics skipped: %s", exc.message)
        storage.write_json(ctx.path(DIAGNOSTICS_JSON), {"skipped": exc.message}, meta=meta)
        return
    storage.write_json(ctx.path(DIAGNOSTICS_JSON), report.to_dict(), meta=meta)


# ============== Command ==============

def run(config: RunConfig) -> int:
    ctx = RunContext(config)
    opts = config.analyze

    data = data_service.load_dataset(ctx.input_path(opts.dataset, DATASET_CSV), rules=config.fit.recoding)
    if opts.covariates:
        data = data_service.attach_covariates(data, data_service.load_covariates(opts.covariates))
    chain = storage.read_chain(ctx.input_path(opts.chain, CHAIN_BIN))

    fingerprint = data_service.dataset_fingerprint(data)
    if chain.data_fingerprint != fingerprint:
        raise ConfigurationError(
            "chain was fitted on a different dataset",
            details={"chain": chain.data_fingerprint, "dataset": fingerprint},
        )
    meta = ctx.meta(fingerprint)

    aligned = postprocess.align_chain(chain, opts.reference_policy, opts.align_on)
    interaction = postprocess.interaction_adjusted(aligned)
    storage.write_json(ctx.path(SUMMARY_JSON), summary_document(aligned, interaction, data), meta=meta)
    storage.write_csv(ctx.path(MAP_CSV), postprocess.map_records(interaction, data), banner=ctx.banner)
    storage.write_csv(ctx.path(ITEM_PRODUCTS_CSV), item_products_frame(interaction, data.item_ids), banner=ctx.banner)

    _write_clusters(ctx, config, interaction, data, meta)

    ppc = evaluate.posterior_predictive(
        aligned, data, S=opts.ppc_replicates, mode=opts.ppc_mode, seed=derive_seed(config.seed, "ppc")
    )
    storage.write_csv(ctx.path(PPC_CSV), ppc.rows(data.item_ids, data.group_ids), banner=ctx.banner)
    storage.write_json(
        ctx.path(PPC_JSON),
        {
            "S": ppc.S,
            "mode": ppc.mode.value,
            "coverage": ppc.coverage_rate(),
            "intercept_coverage": dict(zip(data.group_ids, np.asarray(ppc.intercept_coverage).tolist())),
        },
        meta=meta,
    )

    _write_metrics(ctx, config, aligned, data, meta)
    _write_diagnostics(ctx, aligned, meta)
    logger.info("Analysis artifacts written to %s", ctx.out)
    return 0
