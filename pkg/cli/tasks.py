from celery import shared_task
import logging

from .experiments import evaluate_point
from .serializers import parse_config

logger = logging.getLogger("django")


@shared_task()
def evaluate_sweep_point(config_data):
    """
    evaluate one sweep point sent as a config dict, rows come back as dicts
    """
    config = parse_config(config_data)
    rows = evaluate_point(config)
    logger.info(f"sweep point {config.spec.batch}x{config.spec.prompt_len} on {config.devices} devices done")
    return [row.as_dict() for row in rows]
