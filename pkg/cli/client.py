"""HTTP client used by the operator commands.

Every command goes through the northbound HTTP endpoints of a running
instance; a failed call becomes a ``CommandError`` whose message starts with
the framework error kind.
"""
from __future__ import annotations

import logging
from typing import Any, Optional

import requests
from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from adapters.status import FAULT_HEADER, kind_for
from codec.services import default_codec
from core.clock import WallClock
from core.descriptors import WireFormat
from core.errors import ErrorKind
from core.values import CanonicalMessage, to_canonical

logger = logging.getLogger(__name__)

REQUEST_ERROR = 1
USAGE_ERROR = 2
BIND_ERROR = 3
ASSERTION_FAILED = 4


def request_error(kind: ErrorKind, detail: str) -> CommandError:
    return CommandError(f'{kind.value}: {detail}', returncode=REQUEST_ERROR)


def usage_error(detail: str) -> CommandError:
    return CommandError(detail, returncode=USAGE_ERROR)


def jsonform_document(data: Any, capability: str, message_id: Optional[str] = None) -> str:
    message = CanonicalMessage(
        message_id=message_id or capability,
        capability=capability,
        timestamp_ms=WallClock().now_ms(),
        body=to_canonical(data),
    )
    return default_codec.encode(message, WireFormat.JSON).data.decode('utf-8')


class FrameworkClient:
    def __init__(self, base_url: str, token: str = '', timeout_s: float = 10) -> None:
        self.base_url = base_url.rstrip('/')
        self.token = token
        self.timeout_s = timeout_s
        self.session = requests.Session()

    def __repr__(self) -> str:
        return f'<FrameworkClient {self.base_url}>'

    def request(self, method: str, path: str, **kwargs) -> requests.Response:
        headers = dict(kwargs.pop('headers', None) or {})
        if self.token:
            headers.setdefault('x-auth-token', self.token)
        url = f'{self.base_url}/{path.lstrip("/")}'
        try:
            response = self.session.request(method, url, headers=headers, timeout=self.timeout_s, **kwargs)
        except requests.Timeout:
            raise request_error(ErrorKind.TIMING_FAULT, f'{url} did not answer in {self.timeout_s}s') from None
        except requests.RequestException as exc:
            raise request_error(ErrorKind.CRASH_FAILURE, f'cannot reach {self.base_url} ({exc.__class__.__name__})') from None
        logger.debug('cli: %s %s -> %s', method, url, response.status_code)
        if response.status_code >= 400:
            raise self._failure(response)
        return response

    def _failure(self, response: requests.Response) -> CommandError:
        kind = kind_for(response.status_code, response.headers.get(FAULT_HEADER))
        try:
            error = response.json().get('error') or {}
        except ValueError:
            error = {}
        if not isinstance(error, dict):
            error = {'detail': str(error)}
        detail = error.get('detail') or response.reason or f'HTTP {response.status_code}'
        if error.get('transaction_id'):
            detail = f'{detail} [{error["transaction_id"]}]'
        return request_error(kind or ErrorKind.CONTRACT_VIOLATION, detail)

    def get_json(self, path: str, **params) -> Any:
        return self.request('GET', path, params={k: v for k, v in params.items() if v is not None}).json()

    def post_json(self, path: str, data: Any) -> Any:
        return self.request('POST', path, json=data).json()


class FrameworkCommand(BaseCommand):
    """Base for commands that talk to a running instance."""

    output_capability = 'cli.output'

    def add_arguments(self, parser):
        parser.add_argument('--url', default=None, help='Base URL of the instance (default: IOTFRAME_URL)')
        parser.add_argument('--token', default=None, help='Auth token (default: IOTFRAME_TOKEN)')
        parser.add_argument('--json', action='store_true', dest='as_json', help='Print a JsonForm document')

    def client(self, options) -> FrameworkClient:
        return FrameworkClient(
            options.get('url') or settings.IOTFRAME_URL,
            options.get('token') if options.get('token') is not None else settings.IOTFRAME_TOKEN,
            settings.IOTFRAME_HTTP_TIMEOUT,
        )

    def emit_json(self, data: Any, message_id: Optional[str] = None) -> None:
        self.stdout.write(jsonform_document(data, self.output_capability, message_id))
