import os
from dotenv import load_dotenv

spseg_env = os.getenv('SPSEG_ENV', 'development')
load_dotenv(f'.env.{spseg_env}', override=True)


class Config:
    """Base config."""
    # Logging
    LOG_LEVEL = os.environ.get('SPSEG_LOG_LEVEL', 'INFO')
    LOG_DIR = os.environ.get('SPSEG_LOG_DIR', 'logs')

    # Run defaults
    DEFAULT_SEED = int(os.environ.get('SPSEG_DEFAULT_SEED', 0))
    OUTPUT_DIR = os.environ.get('SPSEG_OUTPUT_DIR', 'runs')

    # How often (in epochs) training reports progress at INFO level
    LOG_EVERY = int(os.environ.get('SPSEG_LOG_EVERY', 20))


class DevelopmentConfig(Config):
    """Development config."""
    DEBUG = True
    LOG_LEVEL = os.environ.get('SPSEG_LOG_LEVEL', 'DEBUG')


class TestingConfig(Config):
    """Testing config."""
    TESTING = True
    DEBUG = True
    LOG_DIR = None  # Keep test runs from writing log files
    LOG_EVERY = 0


class ProductionConfig(Config):
    """Production config."""
    DEBUG = False


# Configuration dictionary
config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'production': ProductionConfig,
}


def get_config():
    """Get the correct configuration based on environment."""
    env = os.environ.get('SPSEG_ENV', 'development')
    return config.get(env, DevelopmentConfig)()
