"""
ASGI config for the iotframe project.

It exposes the ASGI callable as a module-level variable named ``application``;
the request/response binding serves it with uvicorn.
"""

import os

from django.core.asgi import get_asgi_application

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'iotframe.settings')

application = get_asgi_application()
