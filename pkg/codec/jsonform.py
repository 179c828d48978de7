"""JsonForm: UTF-8 JSON envelope ``{"id","corr","cap","ts","headers","body"}``."""
from __future__ import annotations

import json
from typing import Any

from core.errors import ContractViolation
from core.values import CanonicalMessage, CanonicalValue, ValueKind, to_canonical

ENVELOPE_KEYS = ('id', 'corr', 'cap', 'ts', 'headers', 'body')


def _plain(value: CanonicalValue) -> Any:
    if value.kind is ValueKind.LIST:
        return [_plain(item) for item in value.value]
    if value.kind is ValueKind.MAP:
        # pairs are already sorted by key
        return {key: _plain(item) for key, item in value.value}
    return value.value


def encode_json(msg: CanonicalMessage) -> bytes:
    envelope = {
        'id': msg.message_id,
        'corr': msg.correlation_id,
        'cap': msg.capability.name,
        'ts': msg.timestamp_ms,
        'headers': dict(msg.headers),
        'body': _plain(msg.body),
    }
    try:
        text = json.dumps(envelope, ensure_ascii=False, allow_nan=False, separators=(',', ':'))
    except (ValueError, TypeError) as exc:
        raise ContractViolation(f'cannot encode JsonForm: {exc}') from None
    return text.encode('utf-8')


def _reject_constant(name: str) -> Any:
    raise ContractViolation(f'{name} is not allowed in JsonForm')


def _unique_object(pairs: list[tuple[str, Any]]) -> dict:
    result = {}
    for key, value in pairs:
        if key in result:
            raise ContractViolation(f'duplicate key {key!r}')
        result[key] = value
    return result


def decode_json(data: bytes) -> CanonicalMessage:
    try:
        text = data.decode('utf-8')
        raw = json.loads(text, parse_constant=_reject_constant, object_pairs_hook=_unique_object)
    except ContractViolation:
        raise
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise ContractViolation(f'malformed JsonForm: {exc.__class__.__name__}') from None
    if not isinstance(raw, dict):
        raise ContractViolation('JsonForm envelope must be an object')
    unknown = set(raw) - set(ENVELOPE_KEYS)
    if unknown:
        raise ContractViolation(f'unknown envelope keys: {", ".join(sorted(unknown))}')
    for key in ('id', 'cap', 'ts', 'body'):
        if key not in raw:
            raise ContractViolation(f'JsonForm envelope missing {key!r}')
    headers = raw.get('headers') or {}
    if not isinstance(headers, dict):
        raise ContractViolation('headers must be an object')
    message_id, corr, cap, ts = raw['id'], raw.get('corr'), raw['cap'], raw['ts']
    if not isinstance(message_id, str) or (corr is not None and not isinstance(corr, str)):
        raise ContractViolation('id and corr must be strings')
    if not isinstance(cap, str):
        raise ContractViolation('cap must be a string')
    try:
        return CanonicalMessage(
            message_id=message_id,
            capability=cap,
            timestamp_ms=ts,
            body=to_canonical(raw['body']),
            correlation_id=corr,
            headers=headers,
        )
    except RecursionError:
        raise ContractViolation('body nesting too deep') from None
