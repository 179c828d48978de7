import json

from django.core.management.base import BaseCommand, CommandError

from cli.client import ASSERTION_FAILED, jsonform_document, usage_error
from core.conf import ConfigError, load_config
from core.errors import FrameworkError
from sim.runner import run_scenario
from sim.scenario import Scenario, load_scenario

SCHEMA_CAPABILITY = 'cli.scenario.schema'


class Command(BaseCommand):
    help = (
        "Executa um cenario simulado sem precisar de instancia rodando. "
        "Exemplo: manage.py scenario run sim/scenarios/latency.json --seed 7"
    )

    def add_arguments(self, parser):
        parser.add_argument('action', choices=['run', 'schema'])
        parser.add_argument('file', nargs='?', help='Scenario JSON file')
        parser.add_argument('--seed', type=int, default=None, help='Overrides clock.seed')
        parser.add_argument('--config', default=None, help='Framework config file merged under the scenario config')
        parser.add_argument('--json', action='store_true', dest='as_json', help='Print the report or the schema as a JsonForm document')

    def handle(self, *args, **options):
        if options['action'] == 'schema':
            schema = Scenario.model_json_schema()
            if options['as_json']:
                self.stdout.write(jsonform_document(schema, SCHEMA_CAPABILITY))
            else:
                self.stdout.write(json.dumps(schema, indent=2, sort_keys=True))
            return
        if not options['file']:
            raise usage_error('scenario run needs a scenario file')

        try:
            base = load_config(options['config'])
            scenario = load_scenario(options['file'])
            report = run_scenario(scenario, options['seed'], base)
        except ConfigError as exc:
            raise usage_error(str(exc))
        except FrameworkError as exc:
            raise usage_error(f'{exc.kind.value}: {exc.detail}')

        if options['as_json']:
            self.stdout.write(report.to_jsonform().decode('utf-8'))
        else:
            self.show(report)
        if not report.passed:
            raise CommandError(
                f"{len(report.failures)} assertion(s) failed in scenario {report.scenario}", returncode=ASSERTION_FAILED,
            )

    def show(self, report):
        summary = report.summary()
        self.stdout.write(
            f"scenario {report.scenario}  seed={report.seed}  clock={report.clock}  horizon={report.horizon_ms}ms"
        )
        outcomes = ', '.join(f'{name}={count}' for name, count in summary['outcomes'].items()) or '-'
        self.stdout.write(f"requests={summary['requests']}  audited={summary['audited_requests']}  outcomes: {outcomes}")
        for request in report.requests:
            self.stdout.write(
                f"  {request['request_id']:<24} {request['capability']:<32} {request['outcome']:<20} "
                f"{request['status']}  {request['latency_ms']}ms"
            )
        for check in report.assertions:
            mark = self.style.SUCCESS('PASS') if check['passed'] else self.style.ERROR('FAIL')
            self.stdout.write(f"{mark} {check['type']}: {check['detail']}")
