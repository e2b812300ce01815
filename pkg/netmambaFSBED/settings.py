"""
Settings for the netmambaFSBED project.

Only the pieces the pipeline commands need are configured here: the app, the
logging layout and the environment hooks for RunConfig. Model, feature and
post-processing parameters live in bioacoustic.config.RunConfig.
"""

from pathlib import Path
import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Commands never serve requests; the key only satisfies Django's startup checks.
SECRET_KEY = os.getenv('SECRET_KEY', 'fsbed-local-only')

DEBUG = bool(os.getenv('FSBED_DEBUG'))

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'bioacoustic',
]

# No models; tests run on SimpleTestCase.
DATABASES = {}

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_TZ = True


# RunConfig hooks
# Env vars with this prefix override config keys: FSBED_POSTPROC__NMS_IOU -> postproc.nms_iou
FSBED_ENV_PREFIX = 'FSBED_'
FSBED_CONFIG_FILE = os.getenv('FSBED_CONFIG_FILE')
FSBED_LOG_DIR = Path(os.getenv('FSBED_LOG_DIR', BASE_DIR / 'logging'))


LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
        'file': {
            'level': 'DEBUG',
            'class': 'bioacoustic.log.LazyFileHandler',
            'filename': FSBED_LOG_DIR / 'fsbed_debug.log',
            'formatter': 'plain',
        },
        'error_file': {
            'level': 'ERROR',
            'class': 'bioacoustic.log.LazyFileHandler',
            'filename': FSBED_LOG_DIR / 'fsbed_errors.log',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'bioacoustic': {
            'handlers': ['console', 'file', 'error_file'],
            'level': 'DEBUG' if DEBUG else 'INFO',
            'propagate': False,
        },
        'django': {
            'handlers': ['console'],
            'level': 'WARNING',
            'propagate': True,
        },
    },
}
