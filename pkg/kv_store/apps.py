from django.apps import AppConfig


class KvStoreConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'kv_store'
    verbose_name = 'sharded KV cache on emulated CSDs'

    def ready(self) -> None:
        """
        connect the spill logger
        """
        from . import signals  # noqa: F401
