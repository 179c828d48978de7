import logging
import time

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from adapters.bindings import BindingSet, HttpBinding, PubSubBinding
from cli.client import BIND_ERROR, usage_error
from core.conf import ConfigError, load_config
from core.errors import ContractViolation, FrameworkError
from core.runtime import Framework, install
from core.schedulers import start_background_loops, stop_background_loops

logger = logging.getLogger(__name__)


class Command(BaseCommand):
    help = "Sobe registro, barramento, monitor, auditor, gateway e os bindings HTTP e pub/sub."

    def add_arguments(self, parser):
        parser.add_argument('--config', default=None, help='Framework config file (default: IOTFRAME_CONFIG)')
        parser.add_argument('--http-port', type=int, default=None, help='Overrides [http].port')
        parser.add_argument('--pubsub-port', type=int, default=None, help='Overrides [pubsub].port')
        parser.add_argument('--no-pubsub', action='store_true', help='Serve only the HTTP binding')

    def handle(self, *args, **options):
        path = options['config'] if options['config'] is not None else settings.IOTFRAME_CONFIG
        overrides = {}
        if options['http_port'] is not None:
            overrides['http'] = {'port': options['http_port']}
        if options['pubsub_port'] is not None:
            overrides['pubsub'] = {'port': options['pubsub_port']}
        try:
            config = load_config(path).with_overrides(overrides)
        except ConfigError as exc:
            raise usage_error(str(exc))

        level = 'DEBUG' if options['verbosity'] >= 2 else config.logging.level
        logging.getLogger().setLevel(level)

        try:
            framework = Framework(config)
        except FrameworkError as exc:
            raise usage_error(f'{exc.kind.value}: {exc.detail}')
        except OSError as exc:
            raise usage_error(f'cannot open framework state: {exc}')
        previous = install(framework)
        bindings = BindingSet()
        bindings.add(HttpBinding(config.http.host, config.http.port, drain_timeout_ms=config.http.drain_timeout_ms))
        if not options['no_pubsub']:
            bindings.add(PubSubBinding(
                config.pubsub.host, config.pubsub.port, framework, config.pubsub.require_token, config.pubsub.queue_size,
            ))
        try:
            try:
                bindings.start_all()
            except ContractViolation as exc:
                raise CommandError(exc.detail, returncode=BIND_ERROR)
            start_background_loops(framework, force=True)
            for binding in bindings:
                host, port = binding.address
                self.stdout.write(f"{binding.protocol.value} em {host}:{port}")
            self.stdout.write(self.style.SUCCESS("Framework no ar. Ctrl+C para encerrar."))
            self.wait()
        finally:
            logger.info('cli: encerrando, drenando requisicoes em andamento')
            bindings.stop_all(config.http.drain_timeout_ms)
            stop_background_loops()
            framework.close()
            install(previous)
        self.stdout.write("Encerrado.")

    def wait(self):
        try:
            while True:
                time.sleep(0.5)
        except KeyboardInterrupt:
            pass
