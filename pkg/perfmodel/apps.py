from django.apps import AppConfig


class PerfmodelConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'perfmodel'
    verbose_name = 'traffic ledger and timing model'

    def ready(self) -> None:
        """
        load topology and workload presets from the YAML files in PERF_PRESET_DIR
        """
        from django.conf import settings
        from .presets import load_presets
        load_presets(settings.PERF_PRESET_DIR)
