from typing import Any, Optional

from pydantic import BaseModel, Field


class KBManifest(BaseModel):
    """Human-readable sidecar mirroring the binary KB header."""
    magic: str
    version: int
    T: int
    L: int
    d: int
    n: int
    encoder_hash: str
    sources: list[Optional[tuple[str, int]]] = Field(default_factory=list)


class RunManifest(BaseModel):
    command: str
    resolved_config: dict[str, Any]
    seed: int
    input_hashes: dict[str, str] = Field(default_factory=dict)
    output_paths: list[str] = Field(default_factory=list)
    tool_version: str
    wall_time_s: float = 0.0
    status: str = "ok"
    exit_code: int = 0
    error: Optional[str] = None
