"""
URL configuration for the iotframe project.

The northbound HTTP subset lives entirely in the adapters app.
"""
from django.urls import include, path

urlpatterns = [
    path('', include('adapters.urls')),
]
