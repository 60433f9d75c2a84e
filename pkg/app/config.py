import os
from typing import Dict, List
from dotenv import load_dotenv

load_dotenv(verbose=True, override=True)


def _env_flag(name: str, default: str) -> bool:
    val = os.getenv(name, default).strip().lower()
    return val in {"1", "true", "yes", "on"}


class Config:
    """Centralized configuration management for AtomFlow"""

    # Application settings
    APP_NAME = "AtomFlow"
    APP_VERSION = "1.0.0"

    # Logging settings
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
    LOG_FILE = os.getenv("LOG_FILE", "runtime.log")
    LOG_ROTATION = os.getenv("LOG_ROTATION", "10 MB")
    LOG_RETENTION = os.getenv("LOG_RETENTION", "7 days")

    # Runtime settings
    NUM_THREADS = int(os.getenv("FLOW_NUM_THREADS", "4"))
    DETERMINISTIC = _env_flag("FLOW_DETERMINISTIC", "true")

    # File I/O retry settings
    IO_MAX_RETRIES = int(os.getenv("IO_MAX_RETRIES", "3"))
    IO_RETRY_BACKOFF = float(os.getenv("IO_RETRY_BACKOFF", "0.5"))

    # Format versions (major.minor); readers reject unknown majors
    DATASET_FORMAT_VERSION = "1.0"
    CHECKPOINT_FORMAT_VERSION = "1.0"
    REPORT_FORMAT_VERSION = "1.0"

    # Checkpoint layout
    CHECKPOINT_MANIFEST = "manifest.json"
    CHECKPOINT_BLOB = "tensors.bin"

    # Data model
    NUM_PROPERTIES = 19
    MAX_ATOMIC_NUMBER = 118

    # Model variant registry
    MODEL_VARIANTS = [
        {"variant": "tft", "name": "Trunk-based Flow Transformer", "builder": "TrunkFlowTransformer"},
        {"variant": "tfp", "name": "Trunk-based Flow Platoformer", "builder": "TrunkFlowPlatoformer"},
    ]

    @classmethod
    def get_variant(cls, variant: str) -> Dict[str, str]:
        """Look up a registered model variant"""
        for entry in cls.MODEL_VARIANTS:
            if entry["variant"] == variant:
                return entry
        raise KeyError(variant)

    @classmethod
    def variant_names(cls) -> List[str]:
        return [entry["variant"] for entry in cls.MODEL_VARIANTS]

    @classmethod
    def major_version(cls, version: str) -> int:
        """Major component of a `major.minor` format string"""
        return int(str(version).split(".")[0])
