"""Versioned JSON schemas for the config file and every emitted report."""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import jsonschema

SCHEMA_VERSION = 1

REPORT_SCHEMAS = {
    "mining_pre.json": "mining",
    "mining_post.json": "mining",
    "trace.json": "trace",
    "edit_receipt.json": "edit_receipt",
    "sweep.json": "sweep",
    "run_summary.json": "run_summary",
}


@lru_cache(maxsize=None)
def load_schema(name: str) -> dict:
    text = resources.files(__package__).joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(obj, name: str) -> None:
    jsonschema.validate(obj, load_schema(name))
