from ..config import Config
from ..errors import UnsupportedVariant
from ..logger import get_logger
from ..schemas import TftConfig
from .base import BaseDenoiser
from .tfp import TrunkFlowPlatoformer
from .tft import TrunkFlowTransformer

logger = get_logger(__name__)

BUILDERS = {
    "TrunkFlowTransformer": TrunkFlowTransformer,
    "TrunkFlowPlatoformer": TrunkFlowPlatoformer,
}


def build_model(config: TftConfig) -> BaseDenoiser:
    """Instantiate the registered variant named in the config"""
    try:
        entry = Config.get_variant(config.variant)
    except KeyError:
        raise UnsupportedVariant(f"Unknown model variant {config.variant!r}; "
                                 f"expected one of {Config.variant_names()}") from None
    model = BUILDERS[entry["builder"]](config)
    logger.info(f"🧱 构建模型 {entry['name']}: {model.parameter_count():,} 个参数")
    return model
