"""Wire models of the generation protocol."""

from __future__ import annotations

from pydantic import BaseModel, Field


class GenerateRequest(BaseModel):
    prompt: str
    max_new_tokens: int = Field(ge=1)
    stream: bool = False
    # optional hint used by the replay client so HTTP runs match virtual ones
    output_tokens: int | None = Field(default=None, ge=1)


class GenerateResponse(BaseModel):
    text: str
    tokens: int


class TokenFrame(BaseModel):
    token: str
    index: int


class DoneFrame(BaseModel):
    done: bool = True
    tokens: int


class ErrorResponse(BaseModel):
    error: str


class PowerResponse(BaseModel):
    watts: float
