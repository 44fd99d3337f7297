"""
Django settings for the pwrf_lab project.

The project has no web surface: it exists to host the ``fusion`` app's
management commands and test suite. Library code lives in ``modules/``.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/4.1/ref/settings/
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# No sessions, no signing: the key only satisfies Django's startup checks.
SECRET_KEY = os.environ.get('PWRF_SECRET_KEY', 'pwrf-lab-offline')

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'fusion.apps.FusionConfig',
]

MIDDLEWARE = []


# Database
# Everything is file based (tensor dumps, CSV, JSON); no database is used.

DATABASES = {}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Logging
# https://docs.djangoproject.com/en/4.1/topics/logging/

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {
            'format': '{levelname} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'plain',
        },
    },
    'loggers': {
        'modules': {
            'handlers': ['console'],
            'level': os.environ.get('PWRF_LOG_LEVEL', 'WARNING'),
        },
        'fusion': {
            'handlers': ['console'],
            'level': os.environ.get('PWRF_LOG_LEVEL', 'WARNING'),
        },
    },
}


# Harness defaults

PWRF = {
    'OUTPUT_ROOT': Path(os.environ.get('PWRF_OUTPUT_ROOT', BASE_DIR)),
    'GRADCHECK_TOLERANCE': 1e-3,
    'LOG_LEVEL': os.environ.get('PWRF_LOG_LEVEL', 'WARNING'),
}
