#!/usr/bin/env python3
"""
Celery worker script for the msvlm desk pipeline.

Usage:
    python worker.py                    # Start worker with default settings
    python worker.py --loglevel=info   # Start worker with specific log level
    python worker.py --concurrency=1   # Start worker with specific concurrency

Set CELERY_TASK_ALWAYS_EAGER=false on both the CLI and the worker to route
synth-data and train --queue through redis.
"""

import sys
from celery.bin.celery import main as celery_main

if __name__ == "__main__":
    if len(sys.argv) == 1:
        sys.argv.extend([
            "-A", "app.celery_app",
            "worker",
            "--loglevel=info",
            "--concurrency=1",
            "--queues=default,training"
        ])

    celery_main()
