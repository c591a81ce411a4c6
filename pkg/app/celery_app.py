from celery import Celery

from app.config import CELERY_BROKER_URL, CELERY_RESULT_BACKEND, CELERY_TASK_ALWAYS_EAGER

celery_app = Celery(
    "msvlm_desk",
    broker=CELERY_BROKER_URL,
    backend=CELERY_RESULT_BACKEND,
    broker_connection_retry_on_startup=True,
    include=["app.tasks"],
)

celery_app.conf.update(
    task_serializer="json",
    accept_content=["json"],
    result_serializer="json",
    timezone="UTC",
    enable_utc=True,
    task_track_started=True,
    task_always_eager=CELERY_TASK_ALWAYS_EAGER,
    task_eager_propagates=True,
    task_time_limit=6 * 60 * 60,  # a full desk stage fits well inside this
    task_soft_time_limit=5 * 60 * 60,
    worker_prefetch_multiplier=1,
    worker_max_tasks_per_child=20,
)

celery_app.conf.task_routes = {
    "app.tasks.train_stage": {"queue": "training"},
    "app.tasks.*": {"queue": "default"},
}
