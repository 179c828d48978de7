import time

from cli.client import FrameworkCommand


class Command(FrameworkCommand):
    help = "Mostra os registros de auditoria. Exemplo: manage.py audit tail --follow"
    output_capability = 'cli.audit.record'

    def add_arguments(self, parser):
        parser.add_argument('action', choices=['tail'])
        parser.add_argument('--after', type=int, default=0, help='Only records with seq greater than this')
        parser.add_argument('--limit', type=int, default=100, help='Records per page')
        parser.add_argument('--follow', action='store_true', help='Keep polling for new records')
        parser.add_argument('--interval', type=int, default=1000, help='Polling interval in ms with --follow')
        super().add_arguments(parser)

    def handle(self, *args, **options):
        client = self.client(options)
        after = options['after']
        limit = max(1, options['limit'])
        try:
            while True:
                page = client.get_json('audit', after=after, limit=limit)
                for record in page['records']:
                    self.show(record, options['as_json'])
                after = page['last_seq']
                if len(page['records']) >= limit:
                    continue
                if not options['follow']:
                    return
                time.sleep(options['interval'] / 1000)
        except KeyboardInterrupt:
            return

    def show(self, record, as_json):
        if as_json:
            self.emit_json(record, message_id=record['transaction_id'])
            return
        self.stdout.write(
            f"{record['seq']:>6}  {record['transaction_id']}  {record['kind']}  {record['capability']}  "
            f"{record['final_outcome']}  {record['total_ms']}ms  hops={len(record['hops'])}"
        )
