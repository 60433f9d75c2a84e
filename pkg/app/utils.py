import hashlib
import json
from typing import Any, Dict, Optional

import numpy as np
import torch

from .config import Config
from .logger import get_logger

logger = get_logger(__name__)


def derive_seed(seed: int, *keys: Any) -> int:
    """Stable 63-bit seed from a root seed and any number of keys.

    Streams keyed this way are independent of scheduling: the same
    (seed, keys) always gives the same numbers, whatever thread draws them.
    """
    payload = json.dumps([int(seed), *[str(k) for k in keys]], separators=(",", ":"))
    digest = hashlib.sha256(payload.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def torch_stream(seed: int, *keys: Any) -> torch.Generator:
    generator = torch.Generator(device="cpu")
    generator.manual_seed(derive_seed(seed, *keys))
    return generator


def numpy_stream(seed: int, *keys: Any) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *keys))


def configure_runtime(num_threads: Optional[int] = None, deterministic: Optional[bool] = None):
    """Apply thread count and deterministic mode from Config (or overrides)"""
    threads = num_threads if num_threads is not None else Config.NUM_THREADS
    strict = deterministic if deterministic is not None else Config.DETERMINISTIC

    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(strict)
    logger.debug(f"⚙️ 运行环境: threads={threads}, deterministic={strict}")


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def reproducibility_stamp(config: Any, seed: int) -> Dict[str, Any]:
    """Config hash, seed and code version; no wall-clock fields so outputs stay bit-identical"""
    return {
        "app": Config.APP_NAME,
        "code_version": Config.APP_VERSION,
        "config_hash": config_hash(config),
        "seed": int(seed),
    }
