"""
HLSIRM - Run Context

Output locations and provenance shared by every subcommand.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from config import config_fingerprint, settings
from models.schemas import RunConfig
from utils.helpers import csv_banner

logger = logging.getLogger(__name__)

# Required artifacts
DATASET_CSV = "dataset.csv"
TRUTH_JSON = "truth.json"
CHAIN_BIN = "chain.bin"
MAP_CSV = "map.csv"
CLUSTERS_CSV = "clusters.csv"
SUMMARY_JSON = "summary.json"
PPC_CSV = "ppc.csv"
METRICS_JSON = "metrics.json"

# Supplementary artifacts
FIT_JSON = "fit.json"
CHECKPOINT = "checkpoint.pkl"
CLUSTERS_JSON = "clusters.json"
PPC_JSON = "ppc.json"
DIAGNOSTICS_JSON = "diagnostics.json"
ITEM_PRODUCTS_CSV = "item_products.csv"
GROUP_ALIGNMENT_CSV = "group_alignment.csv"
ERROR_DUMP_JSON = "error_dump.json"


@dataclass
class RunContext:
    config: RunConfig
    out: Path = field(init=False)
    config_fingerprint: str = field(init=False)

    def __post_init__(self):
        self.out = Path(self.config.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.config_fingerprint = config_fingerprint(self.config)

    def path(self, name: str) -> Path:
        return self.out / name

    def input_path(self, configured: Optional[str], default: str) -> Path:
        """A configured input file, or the artifact of an earlier subcommand."""
        return Path(configured) if configured else self.path(default)

    def meta(self, data_fingerprint: Optional[str] = None) -> Dict[str, Any]:
        return {
            "version": settings.APP_VERSION,
            "config_fingerprint": self.config_fingerprint,
            "data_fingerprint": data_fingerprint,
        }

    @property
    def banner(self) -> str:
        return csv_banner(settings.APP_VERSION, self.config_fingerprint)
