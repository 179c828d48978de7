from cli.client import FrameworkCommand

from .compose import read_document


class Command(FrameworkCommand):
    help = "Registra um mapeamento de divisao (coarse -> fines). Exemplo: manage.py split weather_split.json"
    output_capability = 'cli.split.result'

    def add_arguments(self, parser):
        parser.add_argument('mapping', help='SplitMapping JSON file')
        super().add_arguments(parser)

    def handle(self, *args, **options):
        mapping = self.client(options).post_json('splits', read_document(options['mapping']))['split']
        if options['as_json']:
            self.emit_json(mapping)
            return
        self.stdout.write(self.style.SUCCESS(
            f"Split {mapping['coarse']} registered ({mapping['mode']}: {', '.join(mapping['fines'])})."
        ))
