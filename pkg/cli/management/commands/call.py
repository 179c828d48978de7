import json

from cli.client import FrameworkCommand, usage_error
from codec.services import default_codec
from core.capabilities import as_capability
from core.clock import WallClock
from core.descriptors import WireFormat
from core.errors import FrameworkError
from core.ids import IdFactory
from core.values import CanonicalMessage, to_canonical


class Command(FrameworkCommand):
    help = "Envia uma requisicao ao gateway. Exemplo: manage.py call weather.temperature.read --format xml"

    def add_arguments(self, parser):
        parser.add_argument('capability')
        parser.add_argument('--format', choices=['json', 'xml'], default='json', help='Wire format sent and accepted')
        parser.add_argument('--deadline', type=int, default=None, help='Deadline in ms (x-deadline-ms)')
        parser.add_argument('--payload', default='{}', help='Request body as JSON')
        super().add_arguments(parser)

    def handle(self, *args, **options):
        try:
            capability = as_capability(options['capability'])
            body = to_canonical(json.loads(options['payload']))
        except FrameworkError as exc:
            raise usage_error(exc.detail)
        except ValueError as exc:
            raise usage_error(f'--payload is not valid JSON ({exc})')
        if options['deadline'] is not None and options['deadline'] < 1:
            raise usage_error('--deadline must be at least 1')

        fmt = WireFormat.JSON if options['as_json'] else WireFormat.parse(options['format'])
        message = CanonicalMessage(
            message_id=IdFactory().new('cli'),
            capability=capability,
            timestamp_ms=WallClock().now_ms(),
            body=body,
        )
        encoded = default_codec.encode(message, fmt)
        headers = {'Content-Type': encoded.content_type, 'Accept': encoded.content_type}
        if options['deadline'] is not None:
            headers['x-deadline-ms'] = str(options['deadline'])

        response = self.client(options).request('POST', f'svc/{capability.name}', data=encoded.data, headers=headers)
        self.stdout.write(response.content.decode('utf-8'))
