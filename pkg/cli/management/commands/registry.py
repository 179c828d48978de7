from cli.client import FrameworkCommand


class Command(FrameworkCommand):
    help = "Lista os servicos registrados. Exemplo: manage.py registry ls --capability weather.temperature.read"
    output_capability = 'cli.registry.listing'

    def add_arguments(self, parser):
        parser.add_argument('action', choices=['ls'])
        parser.add_argument('--capability', default=None, help='Only services for this capability')
        parser.add_argument('--all', action='store_true', help='Include suspended and non-functional services')
        super().add_arguments(parser)

    def handle(self, *args, **options):
        client = self.client(options)
        services = client.get_json(
            'registry', capability=options['capability'], all='1' if options['all'] else None,
        )['services']
        composites = client.get_json('composites')['composites']
        if options['capability']:
            composites = [spec for spec in composites if spec['capability'] == options['capability']]

        if options['as_json']:
            self.emit_json({'services': services, 'composites': composites})
            return

        if not services and not composites:
            self.stdout.write("No services registered.")
            return
        for entry in services:
            descriptor = entry['descriptor']
            flags = ' suspended' if entry.get('suspended') else ''
            self.stdout.write(
                f"{descriptor['service_id']}  {descriptor['capability']}  "
                f"{descriptor['class']}  cost={descriptor['cost_hint_ms']}ms{flags}"
            )
        for spec in composites:
            self.stdout.write(f"composite {spec['capability']}  {spec['mode']}  = {' + '.join(spec['members'])}")
