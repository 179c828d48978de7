from django.urls import path

from .views import (
	AuditView,
	CompositesView,
	HealthView,
	RegistryEntryView,
	RegistryRenewView,
	RegistryView,
	ServiceCallView,
	SplitsView,
	TelemetryView,
)

urlpatterns = [
	path("svc/<str:capability>", ServiceCallView.as_view(), name="svc-call"),
	path("health", HealthView.as_view(), name="health-list"),
	path("health/<str:service_id>", HealthView.as_view(), name="health-detail"),
	path("registry", RegistryView.as_view(), name="registry"),
	path("registry/<str:service_id>", RegistryEntryView.as_view(), name="registry-entry"),
	path("registry/<str:service_id>/renew", RegistryRenewView.as_view(), name="registry-renew"),
	path("composites", CompositesView.as_view(), name="composites"),
	path("splits", SplitsView.as_view(), name="splits"),
	path("audit", AuditView.as_view(), name="audit"),
	path("telemetry/<str:topic>", TelemetryView.as_view(), name="telemetry"),
]
