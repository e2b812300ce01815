from django.apps import AppConfig


class BioacousticConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'bioacoustic'
    verbose_name = 'Few-shot bioacoustic event detection'
