import logging

from django.apps import AppConfig


class CoreConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'core'
    verbose_name = 'IoT framework core'

    def ready(self):
        try:
            from .runtime import get_framework
            from .schedulers import _should_start_loops, start_background_loops
            if _should_start_loops():
                start_background_loops(get_framework(), force=True)
        except Exception as exc:  # pragma: no cover - evita quebrar inicialização
            logging.getLogger(__name__).exception(
                'Falha ao iniciar os loops do framework: %s',
                exc,
            )
