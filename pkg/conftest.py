"""Lets pytest collect fusion/tests with the Django settings loaded."""
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'pwrf_lab.settings')
django.setup()
