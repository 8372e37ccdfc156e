from pydantic import BaseModel, Field
from typing import Optional
from datetime import datetime, timezone


class ErrorResponse(BaseModel):
    error: str
    message: str
    exit_code: int
    timestamp: datetime = Field(default_factory=lambda: datetime.now(timezone.utc))


class ManifestEntry(BaseModel):
    path: str
    sha256: str
    size: int
    kind: Optional[str] = None
