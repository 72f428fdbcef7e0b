import os

from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class Settings:
    """Process-level settings read from the environment"""

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_FORMAT: str = os.getenv("LOG_FORMAT", "console")

    # Debug builds check every posterior sample for NaN/Inf
    DEBUG: bool = os.getenv("DEBUG", "false").lower() == "true"

    # Execution
    THREADS: int = int(os.getenv("JOBPOWER_THREADS", str(os.cpu_count() or 1)))
    OUTPUT_DIR: str = os.getenv("JOBPOWER_OUTPUT_DIR", "./output")
    SEED: int = int(os.getenv("JOBPOWER_SEED", "20150101"))

    @classmethod
    def validate(cls) -> None:
        """Validate settings"""
        from jobpower.utils.exceptions import ConfigurationError

        if cls.LOG_LEVEL.upper() not in ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]:
            raise ConfigurationError(f"Invalid LOG_LEVEL: {cls.LOG_LEVEL}")

        if cls.LOG_FORMAT not in ["json", "console"]:
            raise ConfigurationError(f"Invalid LOG_FORMAT: {cls.LOG_FORMAT}")

        if cls.THREADS < 1:
            raise ConfigurationError(f"Invalid JOBPOWER_THREADS: {cls.THREADS}")


# Create singleton instance
settings = Settings()

