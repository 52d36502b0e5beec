"""HTTP front of the simulated server, driven by the wall clock.

Simulated time runs at ``1 / time_scale`` times wall-clock speed, so a replay
compressed with the same ``time_scale`` sees the same step timings as a
virtual-time run. All simulator mutations happen on the event loop under one
condition variable.
"""

from __future__ import annotations

import asyncio
import io
import logging
import socket
import threading
import time
from contextlib import asynccontextmanager

import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse, StreamingResponse

from .profiles import ServerConfig
from .schemas import DoneFrame, ErrorResponse, GenerateRequest, GenerateResponse, PowerResponse, TokenFrame
from .simulator import BatchingServer, SeqState, draw_output_tokens, estimate_prompt_tokens

log = logging.getLogger(__name__)

PLACEHOLDER_TOKEN = "tok"
MAX_TICK_S = 0.05


class MockService:
    def __init__(self, config: ServerConfig, time_scale: float = 1.0):
        if time_scale <= 0:
            raise ValueError("time_scale must be > 0")
        self.config = config
        self.time_scale = time_scale
        self.server = BatchingServer(config)
        self._t0 = time.monotonic()
        self._cond: asyncio.Condition | None = None
        self._ticker: asyncio.Task | None = None
        self._counter = 0

    def sim_now(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0 / self.time_scale

    async def start(self) -> None:
        self._cond = asyncio.Condition()
        self._ticker = asyncio.create_task(self._tick())

    async def stop(self) -> None:
        if self._ticker is not None:
            self._ticker.cancel()

    async def _tick(self) -> None:
        cond = self._cond
        while True:
            async with cond:
                nb = self.server.next_boundary
                if nb is None:
                    await cond.wait()
                    continue
                delay = (nb - self.sim_now()) * self.time_scale / 1000.0
            if delay > 0:
                await asyncio.sleep(min(delay, MAX_TICK_S))
            async with cond:
                self.server.advance_to(self.sim_now())
                cond.notify_all()

    async def submit(self, req: GenerateRequest):
        async with self._cond:
            self._counter += 1
            target = req.output_tokens or draw_output_tokens(
                req.prompt, self.config.model_profile.mean_output_tokens, req.max_new_tokens
            )
            target = min(target, req.max_new_tokens)
            seq = self.server.submit(f"http-{self._counter}", self.sim_now(), estimate_prompt_tokens(req.prompt), target)
            self._cond.notify_all()
            return seq

    async def tokens(self, seq):
        """Yield the running token count each time it grows; ends when the sequence is terminal."""
        seen = 0
        while True:
            async with self._cond:
                while seq.generated == seen and seq.active:
                    await self._cond.wait()
                n, active = seq.generated, seq.active
            if n > seen:
                yield n
                seen = n
            if not active:
                return

    async def cancel(self, seq) -> None:
        async with self._cond:
            if seq.active:
                self.server.cancel(seq.seq_id, max(self.sim_now(), self.server.now))
                self._cond.notify_all()

    async def power(self) -> float:
        async with self._cond:
            self.server.advance_to(max(self.sim_now(), self.server.now))
            return self.server.power_now()


def create_app(config: ServerConfig, time_scale: float = 1.0) -> FastAPI:
    service = MockService(config, time_scale)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        await service.start()
        yield
        await service.stop()

    app = FastAPI(title="assistbench mock generation server", lifespan=lifespan)
    app.state.service = service
    overloaded = ErrorResponse(error="overloaded").model_dump()

    @app.post("/v1/generate", response_model=GenerateResponse, responses={429: {"model": ErrorResponse}})
    async def generate(body: GenerateRequest, request: Request):
        seq = await service.submit(body)
        if seq is None:
            return JSONResponse(overloaded, status_code=429)
        if body.stream:
            return StreamingResponse(_sse(service, seq, request), media_type="text/event-stream")
        try:
            async for _ in service.tokens(seq):
                pass
        finally:
            await service.cancel(seq)  # client went away before completion
        return GenerateResponse(text=" ".join([PLACEHOLDER_TOKEN] * seq.generated), tokens=seq.generated)

    @app.get("/v1/power", response_model=PowerResponse)
    async def power():
        return PowerResponse(watts=await service.power())

    @app.get("/v1/steplog", response_class=PlainTextResponse)
    async def steplog(expand: bool = False):
        buf = io.StringIO()
        service.server.dump_step_log(buf, expand=expand)
        return PlainTextResponse(buf.getvalue(), media_type="text/csv")

    return app


async def _sse(service: MockService, seq, request: Request):
    sent = 0
    try:
        async for n in service.tokens(seq):
            if await request.is_disconnected():
                break
            while sent < n:
                yield f"data: {TokenFrame(token=PLACEHOLDER_TOKEN, index=sent).model_dump_json()}\n\n"
                sent += 1
        if seq.state is SeqState.FINISHED:
            yield f"data: {DoneFrame(tokens=seq.generated).model_dump_json()}\n\n"
    finally:
        # a closed connection lands here with the sequence still active
        await service.cancel(seq)


class _ClosedSocketFilter(logging.Filter):
    """Drop asyncio's notice about writes to sockets the client already closed.

    Closing the connection is how clients cancel a stream, so frames already in
    flight routinely hit a closed socket.
    """

    def filter(self, record: logging.LogRecord) -> bool:
        return not record.getMessage().startswith("socket.send() raised exception")


def _quiet_closed_sockets() -> None:
    aio = logging.getLogger("asyncio")
    if not any(isinstance(f, _ClosedSocketFilter) for f in aio.filters):
        aio.addFilter(_ClosedSocketFilter())


def port_is_free(host: str, port: int) -> bool:
    with socket.socket() as s:
        try:
            s.bind((host, port))
        except OSError:
            return False
    return True


def free_port(host: str = "127.0.0.1") -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def serve(config: ServerConfig, host: str = "127.0.0.1", port: int = 8080, time_scale: float = 1.0) -> None:
    """Run the mock in the foreground until interrupted."""
    if not port_is_free(host, port):
        raise OSError(f"port {port} on {host} is busy")
    _quiet_closed_sockets()
    uvicorn.run(create_app(config, time_scale), host=host, port=port, log_level="warning")


class MockServerThread:
    """Background mock server for tests and local sweeps; use as a context manager."""

    def __init__(self, config: ServerConfig, host: str = "127.0.0.1", port: int | None = None,
                 time_scale: float = 1.0):
        self.host = host
        self.port = port or free_port(host)
        if not port_is_free(host, self.port):
            raise OSError(f"port {self.port} on {host} is busy")
        self.app = create_app(config, time_scale)
        _quiet_closed_sockets()
        self._server = uvicorn.Server(uvicorn.Config(self.app, host=host, port=self.port, log_level="warning"))
        self._thread = threading.Thread(target=self._server.run, name="mock-server", daemon=True)

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    @property
    def service(self) -> MockService:
        return self.app.state.service

    def start(self, timeout: float = 10.0) -> "MockServerThread":
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if not self._thread.is_alive() or time.monotonic() > deadline:
                raise RuntimeError("mock server failed to start")
            time.sleep(0.01)
        return self

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10)

    def __enter__(self) -> "MockServerThread":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
