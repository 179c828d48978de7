"""XmlForm: typed XML rendering of a canonical message.

    <msg id="..." corr="..." cap="a.b.c" ts="17">
      <headers><h n="trace">abc</h></headers>
      <body t="map"><c t="int">21</c></body>
    </msg>

Leaves carry ``t`` in {null, bool, int, float, str}; containers carry
``t="list"`` (repeated ``<item>`` children) or ``t="map"`` (one child per key,
named by the escaped key). Strings XML cannot hold verbatim are base64 with
``enc="b64"``. No namespaces, DTDs or processing instructions, and no text
between elements (not even whitespace): the layout above is spread out for
reading only.
"""
from __future__ import annotations

import base64
import binascii
import re
import xml.etree.ElementTree as ET
from typing import Optional

from core.errors import ContractViolation
from core.values import (
    MAX_DEPTH,
    CanonicalMessage,
    CanonicalValue,
    ValueKind,
    boolean,
    floating,
    integer,
    list_of,
    map_of,
    null,
    string,
)

_NOT_XML_CHAR = re.compile('[^\t\n\x20-\ud7ff\ue000-\ufffd\U00010000-\U0010ffff]')
_ATTR_UNSAFE = re.compile('[\t\n\r]')
_INT_RE = re.compile(r'-?[0-9]{1,20}\Z')
_FLOAT_RE = re.compile(r'-?(?:[0-9]{1,400}(?:\.[0-9]{0,400})?|\.[0-9]{1,400})(?:[eE][+-]?[0-9]{1,4})?\Z')
_ESCAPE_RE = re.compile(r'_x([0-9A-F]{2})')
_ROOT_ATTRS = frozenset({'id', 'corr', 'cap', 'ts', 'enc'})


# --- key escaping ---------------------------------------------------------

def _plain_name_char(ch: str, first: bool) -> bool:
    if not ch.isascii():
        return False
    if first:
        return ch.isalpha() or ch == '_'
    return ch.isalnum() or ch in '_-.'


def escape_key(key: str) -> str:
    """Map key -> XML element name. Unsafe characters become ``_xHH`` per UTF-8 byte."""
    out = []
    for index, ch in enumerate(key):
        literal = _plain_name_char(ch, index == 0)
        if ch == '_' and key[index + 1:index + 2] == 'x':
            literal = False
        if literal:
            out.append(ch)
        else:
            out.extend(f'_x{byte:02X}' for byte in ch.encode('utf-8'))
    return ''.join(out)


def unescape_key(name: str) -> str:
    raw = bytearray()
    pos = 0
    try:
        for match in _ESCAPE_RE.finditer(name):
            raw += name[pos:match.start()].encode('ascii')
            raw.append(int(match.group(1), 16))
            pos = match.end()
        raw += name[pos:].encode('ascii')
        return raw.decode('utf-8')
    except UnicodeError:
        raise ContractViolation(f'invalid escaped element name {name!r}') from None


# --- encoding -------------------------------------------------------------

def _needs_b64(text: str, attribute: bool = False) -> bool:
    if '\r' in text or _NOT_XML_CHAR.search(text):
        return True
    return attribute and bool(_ATTR_UNSAFE.search(text))


def _b64(text: str) -> str:
    return base64.b64encode(text.encode('utf-8')).decode('ascii')


def _fill(element: ET.Element, value: CanonicalValue) -> None:
    kind = value.kind
    element.set('t', kind.value)
    if kind is ValueKind.NULL:
        return
    if kind is ValueKind.BOOL:
        element.text = 'true' if value.value else 'false'
    elif kind is ValueKind.INT:
        element.text = str(value.value)
    elif kind is ValueKind.FLOAT:
        element.text = repr(value.value)
    elif kind is ValueKind.STR:
        if _needs_b64(value.value):
            element.set('enc', 'b64')
            element.text = _b64(value.value)
        else:
            element.text = value.value
    elif kind is ValueKind.LIST:
        for item in value.value:
            _fill(ET.SubElement(element, 'item'), item)
    else:
        for key, item in value.value:
            _fill(ET.SubElement(element, escape_key(key)), item)


def encode_xml(msg: CanonicalMessage) -> bytes:
    root = ET.Element('msg')
    ids = [msg.message_id] + ([msg.correlation_id] if msg.correlation_id is not None else [])
    b64_ids = any(_needs_b64(value, attribute=True) for value in ids)
    root.set('id', _b64(msg.message_id) if b64_ids else msg.message_id)
    if msg.correlation_id is not None:
        root.set('corr', _b64(msg.correlation_id) if b64_ids else msg.correlation_id)
    root.set('cap', msg.capability.name)
    root.set('ts', str(msg.timestamp_ms))
    if b64_ids:
        root.set('enc', 'b64')
    headers = ET.SubElement(root, 'headers')
    for name, value in msg.headers:
        header = ET.SubElement(headers, 'h')
        if _needs_b64(name, attribute=True) or _needs_b64(value):
            header.set('n', _b64(name))
            header.set('enc', 'b64')
            header.text = _b64(value)
        else:
            header.set('n', name)
            header.text = value
    _fill(ET.SubElement(root, 'body'), msg.body)
    return ET.tostring(root, encoding='unicode').encode('utf-8')


# --- decoding -------------------------------------------------------------

def _unb64(text: Optional[str]) -> str:
    try:
        return base64.b64decode((text or '').encode('ascii'), validate=True).decode('utf-8')
    except (binascii.Error, UnicodeError, ValueError):
        raise ContractViolation('invalid base64 text') from None


def _no_children(element: ET.Element) -> None:
    if len(element):
        raise ContractViolation(f'leaf element <{element.tag}> must not have children')


def _no_stray_text(element: ET.Element) -> None:
    """Containers hold only child elements: no text of their own and none between children."""
    if element.text:
        raise ContractViolation(f'<{element.tag}> must not contain text')
    for child in element:
        if child.tail:
            raise ContractViolation(f'unexpected text after <{child.tag}>')


def _check_names(root: ET.Element) -> None:
    for element in root.iter():
        if element.tag.startswith('{') or any(name.startswith('{') for name in element.attrib):
            raise ContractViolation('XmlForm does not allow namespaces')


def _read(element: ET.Element, depth: int = 1) -> CanonicalValue:
    if depth > MAX_DEPTH:
        raise ContractViolation(f'value nesting deeper than {MAX_DEPTH}')
    tag_kind = element.get('t')
    try:
        kind = ValueKind(tag_kind)
    except ValueError:
        raise ContractViolation(f'unknown type tag {tag_kind!r} on <{element.tag}>') from None
    extra = set(element.attrib) - {'t', 'enc'}
    if extra or (element.get('enc') is not None and kind is not ValueKind.STR):
        raise ContractViolation(f'unexpected attributes on <{element.tag}>')
    text = element.text or ''

    if kind is ValueKind.LIST:
        _no_stray_text(element)
        items = []
        for child in element:
            if child.tag != 'item':
                raise ContractViolation(f'list children must be <item>, got <{child.tag}>')
            items.append(_read(child, depth + 1))
        return list_of(items)
    if kind is ValueKind.MAP:
        _no_stray_text(element)
        pairs = []
        for child in element:
            key = unescape_key(child.tag)
            if escape_key(key) != child.tag:
                raise ContractViolation(f'element name <{child.tag}> is not the escaped form of its key')
            pairs.append((key, _read(child, depth + 1)))
        return map_of(pairs)

    _no_children(element)
    if kind is ValueKind.NULL:
        if text:
            raise ContractViolation('null element must be empty')
        return null()
    if kind is ValueKind.BOOL:
        if text not in ('true', 'false'):
            raise ContractViolation(f'invalid bool text {text!r}')
        return boolean(text == 'true')
    if kind is ValueKind.INT:
        if not _INT_RE.match(text):
            raise ContractViolation(f'invalid int text {text!r}')
        return integer(int(text))
    if kind is ValueKind.FLOAT:
        if not _FLOAT_RE.match(text):
            raise ContractViolation(f'invalid float text {text!r}')
        return floating(float(text))
    encoding = element.get('enc')
    if encoding is None:
        return string(text)
    if encoding != 'b64':
        raise ContractViolation(f'unknown string encoding {encoding!r}')
    return string(_unb64(text))


def _read_headers(element: Optional[ET.Element]) -> list[tuple[str, str]]:
    if element is None:
        return []
    if element.attrib:
        raise ContractViolation('<headers> takes no attributes')
    _no_stray_text(element)
    headers = []
    for header in element:
        if header.tag != 'h' or len(header) or header.get('n') is None:
            raise ContractViolation('headers must be <h n="..."> elements')
        if header.get('enc') == 'b64':
            headers.append((_unb64(header.get('n')), _unb64(header.text)))
        elif header.get('enc') is None:
            headers.append((header.get('n'), header.text or ''))
        else:
            raise ContractViolation('unknown header encoding')
    return headers


def decode_xml(data: bytes) -> CanonicalMessage:
    if b'<?' in data or b'<!' in data:
        raise ContractViolation('XmlForm does not allow declarations, DTDs or comments')
    try:
        root = ET.fromstring(data.decode('utf-8'))
    except ET.ParseError as exc:
        raise ContractViolation(f'malformed XmlForm: {exc}') from None
    except (UnicodeDecodeError, ValueError, RecursionError) as exc:
        raise ContractViolation(f'malformed XmlForm: {exc.__class__.__name__}') from None

    if root.tag != 'msg':
        raise ContractViolation(f'root element must be <msg>, got <{root.tag}>')
    unknown = set(root.attrib) - _ROOT_ATTRS
    if unknown:
        raise ContractViolation(f'unknown <msg> attributes: {", ".join(sorted(unknown))}')
    _check_names(root)
    _no_stray_text(root)
    children = list(root)
    tags = [child.tag for child in children]
    if tags not in (['headers', 'body'], ['body']):
        raise ContractViolation('<msg> must contain optional <headers> followed by <body>')

    message_id, corr = root.get('id'), root.get('corr')
    cap, ts = root.get('cap'), root.get('ts')
    if message_id is None or cap is None or ts is None:
        raise ContractViolation('<msg> needs id, cap and ts attributes')
    if root.get('enc') == 'b64':
        message_id = _unb64(message_id)
        corr = _unb64(corr) if corr is not None else None
    elif root.get('enc') is not None:
        raise ContractViolation('unknown <msg> encoding')
    if not _INT_RE.match(ts):
        raise ContractViolation(f'invalid ts {ts!r}')

    headers = _read_headers(children[0] if len(children) == 2 else None)
    return CanonicalMessage(
        message_id=message_id,
        capability=cap,
        timestamp_ms=int(ts),
        body=_read(children[-1]),
        correlation_id=corr,
        headers=headers,
    )
