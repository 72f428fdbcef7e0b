"""jobpower configuration package"""

from jobpower.config.run_config import RunConfig, load_run_config
from jobpower.config.settings import settings

__all__ = ["RunConfig", "load_run_config", "settings"]
