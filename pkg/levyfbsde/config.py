"""
Configuration management for levyfbsde.
Handles environment variables and default settings.
"""
import logging
import os
from pathlib import Path

from dotenv import load_dotenv

# Load .env from project root (for local runs; CI sets real env vars)
load_dotenv(Path(__file__).resolve().parent.parent / '.env')


class Config:
    """Engine configuration"""

    # Parallelism
    THREADS = int(os.environ.get('LEVYFBSDE_THREADS', '1'))
    BATCH_SIZE = int(os.environ.get('LEVYFBSDE_BATCH_SIZE', '2048'))  # paths per vectorized batch
    BATCH_NODES = int(os.environ.get('LEVYFBSDE_BATCH_NODES', '2000000'))  # cap on paths x grid nodes per batch

    # Logging / output
    LOG_LEVEL = os.environ.get('LEVYFBSDE_LOG_LEVEL', 'INFO').upper()
    OUTPUT_DIR = os.environ.get('LEVYFBSDE_OUTPUT_DIR', 'runs')

    # Quadrature against nu
    QUAD_SPLIT = float(os.environ.get('LEVYFBSDE_QUAD_SPLIT', '1e-4'))  # delta_q
    QUAD_NODES = int(os.environ.get('LEVYFBSDE_QUAD_NODES', '24'))  # Gauss-Legendre nodes per radial panel
    QUAD_ANGLES = int(os.environ.get('LEVYFBSDE_QUAD_ANGLES', '64'))  # angular nodes for l=2

    # Monte Carlo policy
    NOSMALLJUMPS_CAP = float(os.environ.get('LEVYFBSDE_NOSMALLJUMPS_CAP', '1e-3'))
    MIN_POWER_PATHS = int(os.environ.get('LEVYFBSDE_MIN_POWER_PATHS', '1000'))  # below this, stats are "underpowered"
    CONDITION_LIMIT = float(os.environ.get('LEVYFBSDE_CONDITION_LIMIT', '1e8'))
    REPRO_PATHS = int(os.environ.get('LEVYFBSDE_REPRO_PATHS', '2000'))  # per-replica paths of the reproducibility run

    @staticmethod
    def get_threads(override=None):
        """Thread count: explicit override first, then LEVYFBSDE_THREADS"""
        if override:
            return max(1, int(override))
        return max(1, Config.THREADS)

    @staticmethod
    def configure_logging(level=None):
        """Install a single timestamped stream handler on the package logger"""
        pkg_logger = logging.getLogger('levyfbsde')
        if not pkg_logger.handlers:
            handler = logging.StreamHandler()
            handler.setFormatter(logging.Formatter('[%(asctime)s] %(levelname)s %(name)s: %(message)s'))
            pkg_logger.addHandler(handler)
        pkg_logger.setLevel(level or Config.LOG_LEVEL)
        return pkg_logger
