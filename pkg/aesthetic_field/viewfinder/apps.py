import logging

from django.apps import AppConfig
from django.conf import settings


class ViewfinderConfig(AppConfig):
    name = "viewfinder"

    def ready(self):
        """Called when the app is ready. Set up numeric runtime state."""
        self.setup_torch()

    def setup_torch(self):
        """Pin torch intra-op threads; tile and candidate workers are the only parallelism"""
        logger = logging.getLogger(__name__)
        try:
            import torch

            threads = settings.AESFIELD_TORCH_INTRAOP_THREADS
            torch.set_num_threads(threads)
            logger.debug(f"torch intra-op threads set to {threads}")
        except RuntimeError as e:
            # set_num_threads fails once parallel work has started
            logger.warning(f"Could not set torch thread count: {e}")
