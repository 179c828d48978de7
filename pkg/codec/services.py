from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from core.capabilities import Capability, as_capability
from core.descriptors import WireFormat
from core.errors import ContractViolation
from core.values import CanonicalMessage

from .jsonform import decode_json, encode_json
from .xmlform import decode_xml, encode_xml

DEFAULT_MAX_BYTES = 1024 * 1024

_ENCODERS: dict[WireFormat, Callable[[CanonicalMessage], bytes]] = {
	WireFormat.JSON: encode_json,
	WireFormat.XML: encode_xml,
}
_DECODERS: dict[WireFormat, Callable[[bytes], CanonicalMessage]] = {
	WireFormat.JSON: decode_json,
	WireFormat.XML: decode_xml,
}


@dataclass(frozen=True, slots=True)
class EncodedMessage:
	format: WireFormat
	data: bytes
	declared_capability: Capability

	def __post_init__(self) -> None:
		object.__setattr__(self, 'format', WireFormat.parse(self.format))
		object.__setattr__(self, 'declared_capability', as_capability(self.declared_capability))
		if not isinstance(self.data, (bytes, bytearray)):
			raise ContractViolation('encoded payload must be bytes')
		object.__setattr__(self, 'data', bytes(self.data))

	@property
	def size(self) -> int:
		return len(self.data)

	@property
	def content_type(self) -> str:
		return self.format.content_type


class Codec:
	"""Encodes, decodes and transforms messages under a size limit."""

	def __init__(self, max_bytes: int = DEFAULT_MAX_BYTES) -> None:
		if max_bytes <= 0:
			raise ValueError('max_bytes must be positive')
		self.max_bytes = max_bytes

	def _check_size(self, size: int) -> None:
		if size > self.max_bytes:
			raise ContractViolation(f'message of {size} bytes exceeds the {self.max_bytes} byte limit')

	def encode(self, msg: CanonicalMessage, fmt: WireFormat | str) -> EncodedMessage:
		fmt = WireFormat.parse(fmt)
		data = _ENCODERS[fmt](msg)
		self._check_size(len(data))
		return EncodedMessage(fmt, data, msg.capability)

	def decode(self, enc: EncodedMessage) -> CanonicalMessage:
		self._check_size(enc.size)
		msg = _DECODERS[enc.format](enc.data)
		if msg.capability != enc.declared_capability:
			raise ContractViolation(
				f'message capability {msg.capability} does not match declared {enc.declared_capability}'
			)
		return msg

	def transform(self, enc: EncodedMessage, target: WireFormat | str) -> EncodedMessage:
		target = WireFormat.parse(target)
		msg = self.decode(enc)
		if target is enc.format:
			return enc
		return self.encode(msg, target)

	def decode_bytes(self, data: bytes, fmt: WireFormat | str, capability: Optional[Capability | str] = None) -> CanonicalMessage:
		"""Decode raw bytes; when ``capability`` is None the envelope's own is trusted."""
		fmt = WireFormat.parse(fmt)
		self._check_size(len(data))
		msg = _DECODERS[fmt](bytes(data))
		if capability is not None and msg.capability != as_capability(capability):
			raise ContractViolation(f'message capability {msg.capability} does not match declared {capability}')
		return msg


default_codec = Codec()


def encode(msg: CanonicalMessage, fmt: WireFormat | str) -> EncodedMessage:
	return default_codec.encode(msg, fmt)


def decode(enc: EncodedMessage) -> CanonicalMessage:
	return default_codec.decode(enc)


def transform(enc: EncodedMessage, target: WireFormat | str) -> EncodedMessage:
	return default_codec.transform(enc, target)
