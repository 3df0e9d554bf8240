import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'nearstore.settings')
django.setup()
