"""
Django settings for the convexlab project.

The project runs headless: Django supplies the settings layer, the logging
configuration and the management-command CLI. There are no URLs, templates
or database models.
"""

import os
from pathlib import Path

import environ

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Environment variables
env = environ.Env(
    DJANGO_DEBUG=(bool, False),
    CONVEX_THREADS=(int, 4),
    CONVEX_SEED=(int, 20240917),
    CONVEX_CHECKPOINT_EVERY=(int, 50),
)

# Read .env file
environ.Env.read_env(os.path.join(BASE_DIR, ".env"))

SECRET_KEY = env("DJANGO_SECRET_KEY", default="convexlab-local-key")

DEBUG = env.bool("DJANGO_DEBUG", default=False)

ALLOWED_HOSTS: list = []

TIME_ZONE = "UTC"
USE_TZ = True

# Application definition
INSTALLED_APPS = [
    "apps.core",
    "apps.data",
    "apps.analytics",
    "apps.pipeline",
]

# No persistence: every artifact is a file under the run output directory.
DATABASES: dict = {}

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"

# Pipeline defaults
CONVEX_PROFILE = env("CONVEX_PROFILE", default="desk")
CONVEX_OUTPUT_DIR = env("CONVEX_OUTPUT_DIR", default=str(BASE_DIR / "runs" / "default"))
CONVEX_THREADS = env.int("CONVEX_THREADS", default=4)
CONVEX_SEED = env.int("CONVEX_SEED", default=20240917)
CONVEX_CHECKPOINT_EVERY = env.int("CONVEX_CHECKPOINT_EVERY", default=50)
CONVEX_LOG_LEVEL = env("CONVEX_LOG_LEVEL", default="INFO")

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "standard": {
            "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "standard",
        },
    },
    "loggers": {
        "apps": {
            "handlers": ["console"],
            "level": CONVEX_LOG_LEVEL,
            "propagate": False,
        },
    },
}
