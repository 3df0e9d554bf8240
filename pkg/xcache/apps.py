from django.apps import AppConfig


class XcacheConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'xcache'
    verbose_name = 'host-resident activation cache'
