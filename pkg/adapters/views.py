import logging

from django.http import HttpResponse
from rest_framework import status
from rest_framework.response import Response
from rest_framework.views import APIView

from assembler.specs import CompositeSpec, SplitMapping
from codec.services import EncodedMessage
from core.descriptors import ServiceDescriptor, WireFormat
from core.errors import ContractViolation
from core.runtime import get_framework
from core.values import CanonicalMessage, to_canonical
from gateway.services import ConsumerContract

from .permissions import HasFrameworkToken, _token_of

logger = logging.getLogger(__name__)

HEALTH_CAPABILITY = 'monitor.health.state'


def _int_param(raw, name: str, default: int, minimum: int = 0) -> int:
	if raw in (None, ''):
		return default
	try:
		value = int(raw)
	except (TypeError, ValueError):
		raise ContractViolation(f'{name} must be an integer') from None
	if value < minimum:
		raise ContractViolation(f'{name} must be at least {minimum}')
	return value


def _flag(raw) -> bool:
	return (raw or '').strip().lower() in ('1', 'true', 'yes', 'on')


def _media_type(request) -> str:
	return (request.META.get('CONTENT_TYPE') or '').split(';', 1)[0].strip()


def _encoded_response(encoded) -> HttpResponse:
	return HttpResponse(encoded.data, content_type=f'{encoded.content_type}; charset=utf-8')


class ServiceCallView(APIView):
	"""POST /svc/<capability>: one consumer request through the gateway."""

	permission_classes = []
	parser_classes = []

	def post(self, request, capability):
		framework = get_framework()
		body_format = WireFormat.parse(_media_type(request), WireFormat.JSON)
		accepted = WireFormat.from_accept(request.headers.get('Accept'), body_format)
		deadline = _int_param(
			request.headers.get('x-deadline-ms'), 'x-deadline-ms', framework.config.gateway.default_deadline_ms, minimum=1,
		)
		contract = ConsumerContract(capability, _token_of(request), accepted, deadline)
		payload = EncodedMessage(body_format, request.body, contract.capability)
		response = framework.gateway.handle_request(contract, payload)
		return _encoded_response(response)


class HealthView(APIView):
	"""GET /health[/<service_id>]: HealthState as a JsonForm document."""

	permission_classes = []

	def get(self, request, service_id=None):
		framework = get_framework()
		monitor = framework.monitor
		if service_id is not None:
			body = monitor.state(service_id).as_dict()
		else:
			body = {'services': [state.as_dict() for state in monitor.states()]}
		message = CanonicalMessage(
			message_id=service_id or 'health',
			capability=HEALTH_CAPABILITY,
			timestamp_ms=framework.clock.now_ms(),
			body=to_canonical(body),
		)
		return _encoded_response(framework.codec.encode(message, WireFormat.JSON))


class RegistryView(APIView):
	def get_permissions(self):
		if self.request.method == 'GET':
			return []
		return [HasFrameworkToken()]

	def get(self, request):
		registry = get_framework().registry
		show_all = _flag(request.query_params.get('all'))
		capability = request.query_params.get('capability') or None
		entries = []
		for entry in registry.entries():
			descriptor = entry.descriptor
			if not show_all and (not descriptor.is_functional or entry.suspended):
				continue
			if capability and descriptor.capability.name != capability:
				continue
			entries.append(entry.as_dict())
		entries.sort(key=lambda item: (item['descriptor']['capability'], item['descriptor']['service_id']))
		return Response({'services': entries})

	def post(self, request):
		framework = get_framework()
		descriptor = ServiceDescriptor.from_dict(request.data)
		endpoint = framework.channel.endpoint(descriptor.device_id) if descriptor.device_id else None
		lease = framework.registry.register(descriptor)
		if endpoint is not None and descriptor.service_id not in framework.directory:
			framework.directory.bind(descriptor.service_id, endpoint)
		logger.info('adapters: %s registrado via http por %s', descriptor.service_id, getattr(request, 'consumer_id', ''))
		return Response({'lease': lease.as_dict()}, status=status.HTTP_201_CREATED)


class RegistryEntryView(APIView):
	permission_classes = [HasFrameworkToken]

	def delete(self, request, service_id):
		framework = get_framework()
		framework.registry.deregister(service_id)
		framework.directory.unbind(service_id)
		return Response(status=status.HTTP_204_NO_CONTENT)


class RegistryRenewView(APIView):
	permission_classes = [HasFrameworkToken]

	def post(self, request, service_id):
		lease = get_framework().registry.renew(service_id)
		return Response({'lease': lease.as_dict()})


class CompositesView(APIView):
	def get_permissions(self):
		if self.request.method == 'GET':
			return []
		return [HasFrameworkToken()]

	def get(self, request):
		return Response({'composites': [spec.as_dict() for spec in get_framework().registry.composites()]})

	def post(self, request):
		spec = CompositeSpec.from_dict(request.data)
		get_framework().registry.register_composite(spec)
		return Response({'composite': spec.as_dict()}, status=status.HTTP_201_CREATED)


class SplitsView(APIView):
	def get_permissions(self):
		if self.request.method == 'GET':
			return []
		return [HasFrameworkToken()]

	def get(self, request):
		return Response({'splits': [mapping.as_dict() for mapping in get_framework().gateway.splits()]})

	def post(self, request):
		mapping = SplitMapping.from_dict(request.data)
		get_framework().gateway.register_split(mapping)
		return Response({'split': mapping.as_dict()}, status=status.HTTP_201_CREATED)


class AuditView(APIView):
	permission_classes = []

	def get(self, request):
		auditor = get_framework().auditor
		after = _int_param(request.query_params.get('after'), 'after', 0)
		limit = _int_param(request.query_params.get('limit'), 'limit', 100, minimum=1)
		records = auditor.tail(after, min(limit, 1000))
		return Response({
			'records': [record.as_dict() for record in records],
			'last_seq': records[-1].seq if records else after,
		})


class TelemetryView(APIView):
	permission_classes = []

	def get(self, request, topic):
		framework = get_framework()
		message = framework.gateway.latest(topic)
		accepted = WireFormat.from_accept(request.headers.get('Accept'), WireFormat.JSON)
		return _encoded_response(framework.codec.encode(message, accepted))

