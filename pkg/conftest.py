import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'netmambaFSBED.settings')
django.setup()
