import json
from pathlib import Path

from cli.client import FrameworkCommand, usage_error


def read_document(path: str):
    try:
        return json.loads(Path(path).read_text(encoding='utf-8'))
    except OSError as exc:
        raise usage_error(f'{path}: cannot read ({exc.strerror or exc})')
    except json.JSONDecodeError as exc:
        raise usage_error(f'{path}:{exc.lineno}: {exc.msg}')


class Command(FrameworkCommand):
    help = "Registra um servico composto a partir de um arquivo JSON. Exemplo: manage.py compose weather_report.json"
    output_capability = 'cli.compose.result'

    def add_arguments(self, parser):
        parser.add_argument('spec', help='CompositeSpec JSON file')
        super().add_arguments(parser)

    def handle(self, *args, **options):
        spec = self.client(options).post_json('composites', read_document(options['spec']))['composite']
        if options['as_json']:
            self.emit_json(spec)
            return
        self.stdout.write(self.style.SUCCESS(
            f"Composite {spec['capability']} registered ({spec['mode']}: {', '.join(spec['members'])})."
        ))
