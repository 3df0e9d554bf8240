import os
"""
Django settings for the nearstore project.

Everything the apps need to know about the emulated hardware, the storage
tier and the performance model lives here. Values that depend on the host
running the experiments are read from the environment.

For the full list of Django settings and their values, see
https://docs.djangoproject.com/en/4.2/ref/settings/
"""

from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = str(os.environ.get('DJANGO_SECRET_KEY', 'nearstore-desk-only'))

DEBUG = str(os.environ.get('NEARSTORE_DEBUG', 'false')).lower() == 'true'

ALLOWED_HOSTS = []

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': str(os.environ.get('NEARSTORE_LOG_LEVEL', 'INFO')),
    },
}

# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    'rest_framework',
    'numerics',
    'kv_store',
    'xcache',
    'engine',
    'perfmodel.apps.PerfmodelConfig',
    'cli',
]

# nothing is persisted in a database, every run is rebuilt from its config and seed
DATABASES = {}

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Settings for the accelerator functional model
ACCEL_TILE = 32
ACCEL_SOFTMAX_UNITS = 4
# elements loaded per cycle into the softmax buffers, ACCEL_SOFTMAX_UNITS groups of ACCEL_TILE
ACCEL_SOFTMAX_CHUNK = ACCEL_SOFTMAX_UNITS * ACCEL_TILE
SOFTMAX_MASK_VALUE = -1e4

# Settings for the emulated CSD storage tier
KV_BACKEND = str(os.environ.get('KV_BACKEND', 'memory'))
KV_DEVICE_DIR = Path(os.environ.get('KV_DEVICE_DIR', BASE_DIR / 'devices'))
KV_DEVICE_PATH_PATTERN = 'csd{device_id}.img'
KV_DEVICE_CAPACITY_BYTES = int(os.environ.get('KV_DEVICE_CAPACITY_BYTES', 1 << 30))
DIRECT_IO_BLOCK_BYTES = 512
KV_ENFORCE_DIRECT_IO = True
# fault injection for the validate suites, shifts every spill write by this many bytes
KV_FAULT_SPILL_MISALIGN = 0

# Settings for the toy transformer
DEFAULT_SPILL_INTERVAL = 2
TOY_VOCAB_SIZE = 64
WEIGHT_INIT_RANGE = 0.1

# Settings for the performance model
PERF_PRESET_DIR = BASE_DIR / 'perfmodel' / 'preset_files'
PERF_DEFAULT_TOPOLOGY = str(os.environ.get('PERF_DEFAULT_TOPOLOGY', 'csd_server'))
# one table for every FLOP count the model uses, tests read it from here as well
PERF_FLOPS = {
    # multiply + add per GEMV element
    'gemv_per_element': 2,
    # max, subtract, exp, divide per softmax element
    'softmax_per_element': 4,
    # a transformer block holds W_Q, W_K, W_V, W_O (4 H^2) and the MLP (8 H^2)
    'weights_per_block': 12,
}
# number of candidate X-cache split points the scheduler evaluates over the context
PERF_XCACHE_SPLIT_STEPS = 256

CSV_SIGNIFICANT_DIGITS = 6

# celery broker and result
CELERY_BROKER_URL = os.environ.get("BROKER_URL", "redis://redis:6379/0")
CELERY_RESULT_BACKEND = os.environ.get("RESULT_BACKEND", "redis://redis:6379/0")
# sweeps run in-process unless a worker pool is configured
CELERY_TASK_ALWAYS_EAGER = str(os.environ.get('CELERY_TASK_ALWAYS_EAGER', 'true')).lower() == 'true'
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
