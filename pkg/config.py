"""
Configuration settings for the LOCC discrimination compiler
"""

import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    """Base configuration class"""
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')

    # Verification
    VERIFY_TOLERANCE = float(os.getenv('VERIFY_TOLERANCE', '1e-9'))

    # Shot sampling
    DEFAULT_SHOTS = int(os.getenv('DEFAULT_SHOTS', '100000'))
    DEFAULT_SEED = int(os.getenv('DEFAULT_SEED', '0'))
    SHOT_DISPATCH = os.getenv('SHOT_DISPATCH', 'local')  # local | celery
    SHOT_BATCH_SIZE = int(os.getenv('SHOT_BATCH_SIZE', '20000'))

    # Celery Configuration
    CELERY_BROKER_URL = os.getenv('REDIS_URL', 'redis://localhost:6379/0')
    CELERY_RESULT_BACKEND = os.getenv('REDIS_URL', 'redis://localhost:6379/0')
    CELERY_TASK_ALWAYS_EAGER = os.getenv('CELERY_TASK_ALWAYS_EAGER', 'false').lower() == 'true'
    CELERY_TASK_TIME_LIMIT = 30 * 60
    CELERY_TASK_SOFT_TIME_LIMIT = 25 * 60

    @classmethod
    def shot_batches(cls, shots: int, batch_size: int | None = None) -> list[tuple[int, int]]:
        """Split `shots` into half-open [start, stop) ranges"""
        size = max(1, batch_size or cls.SHOT_BATCH_SIZE)
        return [(start, min(start + size, shots)) for start in range(0, shots, size)]

class DevelopmentConfig(Config):
    """Development configuration"""

class ProductionConfig(Config):
    """Production configuration"""
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'WARNING')
    SHOT_DISPATCH = os.getenv('SHOT_DISPATCH', 'celery')

class TestingConfig(Config):
    """Testing configuration"""
    SHOT_DISPATCH = 'local'
    SHOT_BATCH_SIZE = 4096
    CELERY_BROKER_URL = 'memory://'
    CELERY_RESULT_BACKEND = 'cache+memory://'
    CELERY_TASK_ALWAYS_EAGER = True

# Configuration mapping
config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': DevelopmentConfig
}

def get_config(name: str | None = None) -> type[Config]:
    """Return the configuration class selected by `name` or LOCC_ENV"""
    key = name or os.getenv('LOCC_ENV', 'development')
    return config.get(key, config['default'])
