import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'iotframe.settings')
django.setup()
