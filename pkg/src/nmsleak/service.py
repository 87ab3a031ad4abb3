"""HTTP detection endpoint and the round-trip-time client that attacks it.

Wire format:
    POST /detect
    body: PNG bytes (Content-Type: image/png) or a raw tensor
          (Content-Type: application/octet-stream, see raster.encode_raw)
    headers: X-Request-Id, optionally X-Raster-Height / X-Raster-Width
    200: {"id": ..., "detections": [{"box": [x0, y0, x1, y1], "class": k}, ...]}
    400: {"detail": {"reason": ..., "message": ...}}

Responses are decision-only: no confidence scores ever leave the server.
"""

import os
import threading
import time
import uuid
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import requests
import uvicorn
from fastapi import FastAPI, HTTPException, Request
from fastapi.concurrency import run_in_threadpool
from pydantic import BaseModel, Field

from .clock import Clock, ClockSpec
from .detector import QueryResult, SyntheticDetector
from .errors import (EndpointHTTPError, EndpointTimeout, EndpointUnreachable, InvalidRasterError,
                     ServiceBindError)
from .geometry import BoundingBox, Detection
from .logger import logger
from .noise import NoiseSpec
from .raster import Raster, decode_png, decode_raw, encode_png, encode_raw

DEFAULT_HOST = '127.0.0.1'
DEFAULT_PORT = 8765
PNG_TYPE = 'image/png'
RAW_TYPE = 'application/octet-stream'


class DetectionModel(BaseModel):
    box: List[float]
    class_id: int = Field(..., alias='class')


class DetectResponse(BaseModel):
    id: str
    detections: List[DetectionModel]


@dataclass(frozen=True)
class RttSample:
    request_id: str
    rtt: float
    samples: Tuple[float, ...] = ()

    def __post_init__(self):
        if not self.rtt > 0:
            raise ValueError(f"rtt must be positive, got {self.rtt}")


def _bad_request(reason: str, message: str) -> HTTPException:
    return HTTPException(status_code=400, detail={'reason': reason, 'message': message})


def _declared_dimension(request: Request, header: str) -> Optional[int]:
    value = request.headers.get(header)
    if value is None:
        return None
    try:
        return int(value)
    except ValueError:
        raise _bad_request('bad_header', f"{header} must be an integer, got '{value}'")


def create_app(detector: SyntheticDetector,
               clock: Optional[Clock] = None,
               jitter: Optional[NoiseSpec] = None,
               jitter_seed: Optional[int] = 0,
               serial: bool = True,
               max_concurrency: int = 4) -> FastAPI:
    """Build the detection app.

    In modeled and remote_rtt clock modes the round trip carries the modeled
    total time: real decode and scoring work, counted from request arrival,
    is absorbed into the modeled neural time and the handler sleeps for the
    rest. Work beyond the neural budget adds to the round trip. Injected
    jitter is an extra sleep drawn from `jitter` (negative draws are clamped
    to zero).
    """
    clock = clock or Clock(ClockSpec())
    jitter = jitter or NoiseSpec()
    jitter_rng = np.random.default_rng(jitter_seed)
    gate = threading.Lock() if serial else threading.BoundedSemaphore(max_concurrency)
    app = FastAPI(title='nmsleak', description='Decision-only synthetic object detector')

    def process(payload: bytes, content_type: str, declared: Tuple[Optional[int], Optional[int]],
                arrived: float) -> List[Detection]:
        try:
            if content_type.startswith(PNG_TYPE):
                raster = decode_png(payload)
            else:
                raster = decode_raw(payload)
        except InvalidRasterError as e:
            raise _bad_request('invalid_raster', str(e))
        height, width = declared
        if (height is not None and height != raster.height) or (width is not None and width != raster.width):
            raise _bad_request(
                'shape_mismatch',
                f"declared {height}x{width} but payload decodes to {raster.height}x{raster.width}",
            )
        with gate:
            detections, observation = detector.detect(raster, clock)
            if clock.mode != 'wall_clock':
                absorbed = min(time.perf_counter() - arrived, max(0.0, observation.neural_time))
                time.sleep(max(0.0, observation.total_time - absorbed))
            if not jitter.is_zero:
                time.sleep(max(0.0, float(jitter.sample(jitter_rng))))
        return detections

    @app.get('/health')
    def health():
        return {'status': 'ok'}

    @app.post('/detect', response_model=DetectResponse)
    async def detect(request: Request):
        arrived = time.perf_counter()
        request_id = request.headers.get('x-request-id') or uuid.uuid4().hex
        declared = (_declared_dimension(request, 'x-raster-height'), _declared_dimension(request, 'x-raster-width'))
        payload = await request.body()
        content_type = request.headers.get('content-type', RAW_TYPE)
        detections = await run_in_threadpool(process, payload, content_type, declared, arrived)
        return DetectResponse(
            id=request_id,
            detections=[DetectionModel(**{'box': list(d.box.as_tuple()), 'class': d.class_id}) for d in detections],
        )

    return app


class ServiceHandle:
    """A uvicorn server running the detection app in a background thread."""

    def __init__(self, server: uvicorn.Server, thread: threading.Thread, host: str, port: int):
        self.server = server
        self.thread = thread
        self.host = host
        self.port = port

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def stop(self, timeout: float = 10.0) -> None:
        self.server.should_exit = True
        self.thread.join(timeout)
        logger.info(f"Detection service at {self.url} stopped")

    def wait(self) -> None:
        self.thread.join()

    def __enter__(self) -> 'ServiceHandle':
        return self

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(detector: SyntheticDetector,
          host: Optional[str] = None,
          port: Optional[int] = None,
          clock_spec: Optional[ClockSpec] = None,
          jitter: Optional[NoiseSpec] = None,
          jitter_seed: Optional[int] = 0,
          serial: bool = True,
          max_concurrency: int = 4,
          startup_timeout: float = 10.0) -> ServiceHandle:
    """Start the detection service; host and port fall back to $NMSLEAK_HOST / $NMSLEAK_PORT.

    Port 0 binds an ephemeral port; the handle reports the one actually bound.

    Raises:
        ServiceBindError: the server did not come up within `startup_timeout`.
    """
    host = host or os.environ.get('NMSLEAK_HOST', DEFAULT_HOST)
    port = int(port if port is not None else os.environ.get('NMSLEAK_PORT', DEFAULT_PORT))
    app = create_app(detector, Clock(clock_spec or ClockSpec()), jitter, jitter_seed, serial, max_concurrency)
    server = uvicorn.Server(uvicorn.Config(app, host=host, port=port, log_level='warning', access_log=False))
    thread = threading.Thread(target=server.run, name='nmsleak-service', daemon=True)
    thread.start()

    deadline = time.monotonic() + startup_timeout
    while not server.started:
        if not thread.is_alive():
            raise ServiceBindError(f"Could not bind detection service to {host}:{port}")
        if time.monotonic() > deadline:
            server.should_exit = True
            raise ServiceBindError(f"Detection service on {host}:{port} did not start within {startup_timeout}s")
        time.sleep(0.01)

    bound_port = server.servers[0].sockets[0].getsockname()[1] if port == 0 else port
    handle = ServiceHandle(server, thread, host, bound_port)
    logger.info(f"Detection service listening on {handle.url}")
    return handle


def _detect_url(endpoint: str) -> str:
    endpoint = endpoint.rstrip('/')
    return endpoint if endpoint.endswith('/detect') else endpoint + '/detect'


def _encode(raster: Raster, encoding: str) -> Tuple[bytes, str]:
    if encoding == 'png':
        return encode_png(raster), PNG_TYPE
    if encoding == 'raw':
        return encode_raw(raster), RAW_TYPE
    raise ValueError(f"encoding must be 'raw' or 'png', got '{encoding}'")


def _reason(response: requests.Response) -> str:
    try:
        detail = response.json().get('detail')
    except ValueError:
        return response.reason
    if isinstance(detail, dict):
        return detail.get('reason', response.reason)
    return str(detail)


def timed_query(endpoint: str, raster: Raster, repeats: int = 1, encoding: str = 'raw',
                timeout: float = 10.0, session: Optional[requests.Session] = None) -> Tuple[DetectResponse, RttSample]:
    """POST `raster` `repeats` times; return the last response and the median RTT.

    Each RTT runs from just before the request is written to just after the
    full response body is read.

    Raises:
        EndpointTimeout, EndpointUnreachable: no HTTP response at all.
        EndpointHTTPError: a non-2xx response.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    url = _detect_url(endpoint)
    payload, content_type = _encode(raster, encoding)
    request_id = uuid.uuid4().hex
    headers = {
        'Content-Type': content_type,
        'X-Request-Id': request_id,
        'X-Raster-Height': str(raster.height),
        'X-Raster-Width': str(raster.width),
    }
    post = session.post if session is not None else requests.post
    rtts = []
    response = None
    for _ in range(repeats):
        try:
            start = time.perf_counter()
            response = post(url, data=payload, headers=headers, timeout=timeout)
            _ = response.content
            rtts.append(time.perf_counter() - start)
        except requests.exceptions.Timeout as e:
            raise EndpointTimeout(f"Request to {url} timed out after {timeout}s") from e
        except requests.exceptions.ConnectionError as e:
            raise EndpointUnreachable(f"Could not reach {url}: {e}") from e
        if response.status_code >= 400:
            raise EndpointHTTPError(response.status_code, _reason(response))

    parsed = DetectResponse(**response.json())
    return parsed, RttSample(request_id, float(np.median(rtts)), tuple(rtts))


class RemoteDetectorHandle:
    """Detector handle over HTTP: detections from the response, time from the RTT.

    The service never returns scores; detections carry a placeholder score of 1.
    """

    def __init__(self, endpoint: str, repeats: int = 1, encoding: str = 'raw', timeout: float = 10.0):
        self.endpoint = endpoint
        self.repeats = repeats
        self.encoding = encoding
        self.timeout = timeout
        self.session = requests.Session()
        self.query_count = 0

    def query(self, raster: Raster) -> QueryResult:
        response, rtt = timed_query(self.endpoint, raster, self.repeats, self.encoding, self.timeout, self.session)
        self.query_count += 1
        detections = tuple(
            Detection(BoundingBox(*d.box), d.class_id, 1.0) for d in response.detections
        )
        return QueryResult(detections, rtt.rtt)

    __call__ = query

    def close(self) -> None:
        self.session.close()
