"""Prompt template loading with content digests for provenance tracking."""
from __future__ import annotations

import hashlib
from importlib import resources


def load_template(name: str) -> tuple[str, str]:
    """Return (template text, sha256 hex digest of the template bytes)."""
    data = (resources.files("critforge") / "templates" / name).read_bytes()
    return data.decode("utf-8"), hashlib.sha256(data).hexdigest()
