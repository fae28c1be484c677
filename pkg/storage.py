"""
HLSIRM - Storage

Chain files, checkpoints and run artifacts. Every writer produces the same
bytes for the same inputs.

Chain file layout:
  - magic line  ``HLSIRM-CHAIN 1``
  - one line of canonical JSON (header)
  - a fixed sequence of ``.npy`` arrays (numpy.save)
"""
import io
import json
import logging
import os
import pickle
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd

from models.domain import AcceptanceLog, ModelState, PosteriorChain
from models.schemas import ChainConfig, Hyperparameters, ProposalBlock
from utils.errors import DataFormatError
from utils.helpers import canonical_json, strip_banner

logger = logging.getLogger(__name__)

CHAIN_MAGIC = b"HLSIRM-CHAIN 1\n"
TRACE_BLOCKS = [b.value for b in ProposalBlock]

PathLike = Union[str, Path]


def _atomic_write(path: PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


# ============== Chain File ==============

def _stack(samples: List[ModelState], getter, shape) -> np.ndarray:
    if not samples:
        return np.zeros((0,) + tuple(shape))
    return np.stack([getter(s) for s in samples])


def write_chain(path: PathLike, chain: PosteriorChain, meta: Optional[Dict[str, Any]] = None) -> None:
    samples = chain.samples
    sizes = [int(n) for n in (samples[0].group_sizes if samples else chain.group_sizes)]
    K = len(sizes)
    p = len(chain.acceptance_log.proposed["item"])
    D = chain.hyperparameters.D
    N = sum(sizes)
    has_residuals = bool(samples) and samples[0].residuals is not None
    header = {
        "format": 1,
        "meta": meta or {},
        "config": chain.config.model_dump(mode="json"),
        "hyperparameters": chain.hyperparameters.model_dump(mode="json"),
        "data_fingerprint": chain.data_fingerprint,
        "n_samples": len(samples),
        "group_sizes": sizes,
        "p": p,
        "D": D,
        "has_residuals": has_residuals,
        "has_fitted": chain.fitted_probability_mean is not None,
        "acceptance": chain.acceptance_log.to_dict(),
    }

    arrays = [
        _stack(samples, lambda s: s.group_intercepts, (K,)),
        _stack(samples, lambda s: np.concatenate(s.individual_intercepts), (N,)),
        _stack(samples, lambda s: s.group_variances, (K,)),
        _stack(samples, lambda s: s.item_intercepts, (p,)),
        _stack(samples, lambda s: s.group_positions, (K, D)),
        _stack(samples, lambda s: np.concatenate(s.individual_positions), (N, D)),
        _stack(samples, lambda s: s.item_positions, (p, D)),
        _stack(samples, lambda s: s.psi_z, (D, D)),
        _stack(samples, lambda s: s.psi_w, (D, D)),
        np.asarray(chain.log_posterior_trace, dtype=float),
        np.asarray([e["iteration"] for e in chain.adaptation_trace], dtype=np.int64),
    ]
    for block in TRACE_BLOCKS:
        width = K if block != ProposalBlock.ITEM.value else p
        arrays.append(_stack_trace(chain.adaptation_trace, block, width))
    if header["has_fitted"]:
        arrays.append(np.concatenate(chain.fitted_probability_mean))
    if has_residuals:
        arrays.append(_stack(samples, lambda s: np.concatenate(s.residuals), (N, p)))

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(CHAIN_MAGIC)
        handle.write(canonical_json(header).encode("utf-8") + b"\n")
        for array in arrays:
            np.save(handle, np.ascontiguousarray(array), allow_pickle=False)
    logger.info("Wrote chain with %d samples to %s", len(samples), path)


def _stack_trace(trace: List[Dict[str, Any]], block: str, width: int) -> np.ndarray:
    if not trace:
        return np.zeros((0, width))
    return np.stack([np.asarray(entry[block], dtype=float) for entry in trace])


def _split(array: np.ndarray, sizes: List[int]) -> List[np.ndarray]:
    return np.split(array, np.cumsum(sizes)[:-1])


def read_chain(path: PathLike) -> PosteriorChain:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"chain file not found: {path}")
    with open(path, "rb") as handle:
        if handle.readline() != CHAIN_MAGIC:
            raise DataFormatError(f"{path} is not an HLSIRM chain file")
        header = json.loads(handle.readline().decode("utf-8"))

        def load() -> np.ndarray:
            return np.load(handle, allow_pickle=False)

        (g_int, i_int, g_var, b_int, g_pos, i_pos, w_pos, psi_z, psi_w, lp, trace_t) = [load() for _ in range(11)]
        trace_blocks = {block: load() for block in TRACE_BLOCKS}
        fitted = load() if header["has_fitted"] else None
        residuals = load() if header["has_residuals"] else None

    sizes = header["group_sizes"]
    samples = []
    for s in range(header["n_samples"]):
        samples.append(
            ModelState(
                group_intercepts=g_int[s],
                individual_intercepts=_split(i_int[s], sizes),
                group_variances=g_var[s],
                item_intercepts=b_int[s],
                group_positions=g_pos[s],
                individual_positions=_split(i_pos[s], sizes),
                item_positions=w_pos[s],
                psi_z=psi_z[s],
                psi_w=psi_w[s],
                residuals=None if residuals is None else _split(residuals[s], sizes),
            )
        )
    trace = [
        {"iteration": int(t), **{block: trace_blocks[block][idx] for block in TRACE_BLOCKS}}
        for idx, t in enumerate(trace_t)
    ]
    chain = PosteriorChain(
        samples=samples,
        acceptance_log=AcceptanceLog.from_dict(header["acceptance"]),
        adaptation_trace=trace,
        config=ChainConfig.model_validate(header["config"]),
        hyperparameters=Hyperparameters.model_validate(header["hyperparameters"]),
        data_fingerprint=header["data_fingerprint"],
        fitted_probability_mean=None if fitted is None else _split(fitted, sizes),
        log_posterior_trace=[float(v) for v in lp],
        group_sizes=list(sizes),
    )
    logger.info("Read chain with %d samples from %s", len(samples), path)
    return chain


def read_chain_header(path: PathLike) -> Dict[str, Any]:
    with open(path, "rb") as handle:
        if handle.readline() != CHAIN_MAGIC:
            raise DataFormatError(f"{path} is not an HLSIRM chain file")
        return json.loads(handle.readline().decode("utf-8"))


# ============== Checkpoints ==============

def save_checkpoint(path: PathLike, payload: Dict[str, Any]) -> None:
    """Pickle ``payload`` atomically (temp file, then rename)."""
    _atomic_write(path, pickle.dumps(payload, protocol=pickle.HIGHEST_PROTOCOL))


def load_checkpoint(path: PathLike) -> Dict[str, Any]:
    with open(path, "rb") as handle:
        return pickle.load(handle)


# ============== Artifacts ==============

def write_json(path: PathLike, payload: Dict[str, Any], meta: Optional[Dict[str, Any]] = None) -> None:
    document = dict(payload)
    if meta is not None:
        document["meta"] = meta
    _atomic_write(path, (canonical_json(document, indent=2) + "\n").encode("utf-8"))


def read_json(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"file not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def write_csv(path: PathLike, rows: Union[pd.DataFrame, List[Dict[str, Any]]], banner: Optional[str] = None) -> None:
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows)
    body = frame.to_csv(index=False, lineterminator="\n")
    _atomic_write(path, ((banner + "\n" if banner else "") + body).encode("utf-8"))


def read_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(io.StringIO(strip_banner(Path(path).read_text(encoding="utf-8"))))


def save_truth(path: PathLike, state: ModelState, meta: Optional[Dict[str, Any]] = None, **extra: Any) -> None:
    """Truth dump: the full generating ModelState plus any labels in ``extra``."""
    write_json(path, {"state": state.to_dict(), **extra}, meta=meta)


def load_truth(path: PathLike) -> ModelState:
    return ModelState.from_dict(read_json(path)["state"])
