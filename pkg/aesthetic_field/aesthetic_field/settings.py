"""
Django settings for aesthetic_field project.

The project has no web surface: Django supplies configuration, logging,
management commands (the CLI) and the test runner.

For more information on this file, see
https://docs.djangoproject.com/en/5.2/topics/settings/
"""

import math
import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.environ.get('DJANGO_SECRET_KEY', "django-insecure-aesfield-local-only-0d7c1b9e4f")

DEBUG = os.environ.get('DJANGO_DEBUG', 'True').lower() == 'true'

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    "viewfinder",
]

# No models: commands and tests run without a database.
DATABASES = {}

# Internationalization
LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = False

USE_TZ = True

# Aesthetic field configuration

# Scene / field
AESFIELD_FEATURE_DIM = 32  # per-Gaussian embedding size
AESFIELD_TEACHER_GRID = (14, 14)  # teacher grid H_t x W_t
AESFIELD_TEACHER_CHANNELS = 8  # procedural teacher D_t

# Rasterizer
AESFIELD_TILE_SIZE = 16
AESFIELD_NEAR_PLANE = 0.01
AESFIELD_RENDER_CHUNK = 32  # splats per first compositing chunk, doubling after
AESFIELD_FORWARD_PRECISION = "float32"  # forward-only renders; gradients stay float64

# Cameras written by `gen --views`
AESFIELD_IMAGE_SIZE = (64, 64)  # width, height
AESFIELD_FOCAL_LENGTH = 56.0
AESFIELD_ORBIT_RADIUS = 3.0
AESFIELD_ORBIT_HEIGHT = 0.6

# Distillation
AESFIELD_DISTILL_ITERATIONS = 500
AESFIELD_DISTILL_STEP_SIZE = 1e-2
AESFIELD_DISTILL_WEIGHT_DECAY = 1e-4
AESFIELD_DISTILL_SCHEDULE = "constant"  # constant / cosine
AESFIELD_DISTILL_LOG_EVERY = 50

# Viewpoint search
AESFIELD_SEARCH_SAMPLES_PER_SEGMENT = 16
AESFIELD_SEARCH_NEIGHBORS = 8
AESFIELD_SEARCH_TOP_K = 2
AESFIELD_SEARCH_REFINE_STEPS = 25
AESFIELD_SEARCH_STEP_SIZE = 0.01
AESFIELD_SEARCH_SHIFT_FRACTION = 0.05  # of scene bbox diagonal
AESFIELD_SEARCH_JITTER = math.radians(5.0)
AESFIELD_SEARCH_DEDUP_FRACTION = 0.02  # of scene bbox diagonal
AESFIELD_SEARCH_ROTATION_WEIGHT_FRACTION = 0.1  # of diagonal, per radian

# Concurrency
# Worker threads for tile rendering and candidate scoring. Outputs are
# bit-identical for any value.
AESFIELD_THREADS = int(os.environ.get('AESFIELD_THREADS', '1'))
AESFIELD_TORCH_INTRAOP_THREADS = 1

# Logging configuration
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {asctime} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
        'file': {
            'class': 'logging.FileHandler',
            'filename': BASE_DIR / 'aesthetic_field.log',
            'formatter': 'verbose',
            'delay': True,
        },
    },
    'loggers': {
        'viewfinder': {
            'handlers': ['console', 'file'],
            'level': os.environ.get('AESFIELD_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}
