import logging
import os


class Settings:
    def __init__(self):
        self.out_dir = os.getenv("DEPTHCAST_OUT_DIR", "runs")
        self.log_level = os.getenv("DEPTHCAST_LOG_LEVEL", "INFO").upper()
        self.environment = os.getenv("DEPTHCAST_ENVIRONMENT", "development")
        seed = os.getenv("DEPTHCAST_SEED", "0")

        # Validate critical settings
        if not isinstance(logging.getLevelName(self.log_level), int):
            raise ValueError(f"DEPTHCAST_LOG_LEVEL must be a logging level name, got {self.log_level!r}")
        if not seed.isdigit():
            raise ValueError("DEPTHCAST_SEED must be a non-negative integer")
        self.seed = int(seed)
        if not self.out_dir:
            raise ValueError("DEPTHCAST_OUT_DIR must not be empty")

settings = Settings()
