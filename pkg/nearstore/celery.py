import os

from celery import Celery

os.environ.setdefault("DJANGO_SETTINGS_MODULE", "nearstore.settings")

app = Celery("nearstore")

# everything prefixed with CELERY in nearstore/settings.py configures celery, see https://docs.celeryq.dev/en/stable/userguide/configuration.html
app.config_from_object("django.conf:settings", namespace="CELERY")

# sweep point tasks live in cli/tasks.py
app.autodiscover_tasks()
