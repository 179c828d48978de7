"""
Django settings for the iotframe project.

The framework itself (registry, bus, gateway, ...) is configured by the TOML
file pointed to by IOTFRAME_CONFIG; this module only carries the Django side
and the environment defaults used by the CLI.
"""

from pathlib import Path
import os

try:
    from dotenv import load_dotenv
except Exception:
    load_dotenv = None

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Load environment variables from .env if available
if load_dotenv:
    load_dotenv(BASE_DIR / '.env')


def _env_bool(name: str, default: bool) -> bool:
    v = os.getenv(name)
    if v is None:
        return default
    return v.strip().lower() in ('1', 'true', 'yes', 'y', 'on')


def _env_int(name: str, default: int) -> int:
    try:
        return int(os.getenv(name, str(default)))
    except (TypeError, ValueError):
        return default


# SECURITY WARNING: keep the secret key used in production secret!
SECRET_KEY = os.getenv('SECRET_KEY', 'django-insecure-iotframe-dev-only-3v!r2k#q9w')

DEBUG = _env_bool('DEBUG', True)

_allowed = os.getenv('ALLOWED_HOSTS')
ALLOWED_HOSTS = [h.strip() for h in _allowed.split(',')] if _allowed else ['*']


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    'rest_framework',
    'core',
    'adapters',
    'cli',
]

MIDDLEWARE = [
    'django.middleware.security.SecurityMiddleware',
    'django.middleware.common.CommonMiddleware',
]

ROOT_URLCONF = 'iotframe.urls'

TEMPLATES = []

WSGI_APPLICATION = 'iotframe.wsgi.application'
ASGI_APPLICATION = 'iotframe.asgi.application'

# The framework keeps no relational state; the database is only here because
# Django's test runner and contenttypes expect one.
DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}

REST_FRAMEWORK = {
    'DEFAULT_AUTHENTICATION_CLASSES': [],
    'DEFAULT_PERMISSION_CLASSES': [],
    'UNAUTHENTICATED_USER': None,
    'DEFAULT_RENDERER_CLASSES': ['rest_framework.renderers.JSONRenderer'],
    'DEFAULT_PARSER_CLASSES': ['rest_framework.parsers.JSONParser'],
    'EXCEPTION_HANDLER': 'adapters.status.exception_handler',
}

# Framework wiring
IOTFRAME_CONFIG = os.getenv('IOTFRAME_CONFIG', '')
IOTFRAME_URL = os.getenv('IOTFRAME_URL', 'http://127.0.0.1:8700').rstrip('/')
IOTFRAME_TOKEN = os.getenv('IOTFRAME_TOKEN', '')
IOTFRAME_AUTOSTART = _env_bool('IOTFRAME_AUTOSTART', False)
IOTFRAME_HTTP_TIMEOUT = _env_int('IOTFRAME_HTTP_TIMEOUT', 10)

LOG_LEVEL = (os.getenv('IOTFRAME_LOG_LEVEL') or 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'plain': {'format': '%(asctime)s %(levelname)s %(name)s %(message)s'},
    },
    'handlers': {
        'console': {'class': 'logging.StreamHandler', 'formatter': 'plain'},
    },
    'root': {'handlers': ['console'], 'level': LOG_LEVEL},
    'loggers': {
        'django': {'handlers': ['console'], 'level': 'WARNING', 'propagate': False},
        'pybreaker': {'handlers': ['console'], 'level': 'WARNING', 'propagate': False},
    },
}

LANGUAGE_CODE = 'en-us'

TIME_ZONE = os.getenv('TIME_ZONE', 'UTC')

USE_I18N = False

USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'
