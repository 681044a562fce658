"""Line-delimited JSON backend for out-of-process bindings.

Run as ``python -m minigp.server``. Each stdin line is one request object,
each stdout line the matching reply. Requests carry an ``id`` echoed back
verbatim, an ``op``, and op-specific fields. Replies are either
``{"id": ..., "ok": true, "result": {...}}`` or
``{"id": ..., "ok": false, "error": {"kind": ..., "message": ...}}``.

Array fields travel as ``{"shape": [...], "data": "<base64>"}`` where data
is the little-endian float64 buffer in C order.

Ops:
  ping     -> {"version": str}
  fit      {kernel: s-expression, noise: float, x: array2d, y: array1d,
            strategy?: str} -> {"handle": int}
  predict  {handle: int, x: array2d} -> {"mean": array1d, "variance": array1d}
  metrics  {mean, variance, y_true: array1d, noise: float}
           -> {"rmse": float, "nll": float, "coverage95": float}
  dispose  {handle: int} -> {"disposed": true}   (idempotent)

Error kinds:
  parse     malformed JSON or a kernel expression that does not parse
  shape     dimension mismatches, non-finite values, other bad arguments
  solver    numerical failure (not positive definite, singular triangle,
            an operator that is not SPD)
  disposed  a handle that was never issued or was already disposed
  internal  anything else; the server stays up
"""

from __future__ import annotations

import base64
import json
import sys

import numpy as np

from . import __version__
from .errors import (
    DimensionMismatchError,
    KernelParseError,
    NonFiniteError,
    NonSquareError,
    NonSymmetricError,
    NotPositiveDefiniteError,
    OperatorNotSpdError,
    SingularTriangularError,
)
from .kernels import parse_kernel
from .models import gp_fit, gp_predict, metrics


def _decode_array(obj, ndim):
    if not isinstance(obj, dict) or "shape" not in obj or "data" not in obj:
        raise ValueError("array fields need shape and data")
    shape = tuple(int(s) for s in obj["shape"])
    if len(shape) != ndim:
        raise DimensionMismatchError(f"expected a {ndim}-d array, got shape {shape}")
    raw = base64.b64decode(obj["data"])
    count = int(np.prod(shape)) if shape else 0
    if len(raw) != 8 * count:
        raise ValueError(f"buffer holds {len(raw)} bytes, shape {shape} needs {8 * count}")
    arr = np.frombuffer(raw, dtype="<f8").reshape(shape)
    return np.ascontiguousarray(arr, dtype=np.float64)


def _encode_array(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    data = base64.b64encode(arr.astype("<f8", copy=False).tobytes()).decode("ascii")
    return {"shape": list(arr.shape), "data": data}


class _Disposed(Exception):
    pass


_ERROR_KINDS = (
    (KernelParseError, "parse"),
    ((DimensionMismatchError, NonFiniteError, NonSquareError, NonSymmetricError), "shape"),
    ((NotPositiveDefiniteError, SingularTriangularError, OperatorNotSpdError), "solver"),
    (_Disposed, "disposed"),
    ((ValueError, TypeError, KeyError), "shape"),
)


def _error_kind(exc):
    for types, kind in _ERROR_KINDS:
        if isinstance(exc, types):
            return kind
    return "internal"


class Server:
    """Holds fitted-model handles between requests."""

    def __init__(self):
        self._models = {}
        self._next = 1

    def _take_model(self, request):
        handle = request.get("handle")
        if not isinstance(handle, int) or handle not in self._models:
            raise _Disposed(f"no live model for handle {handle!r}")
        return self._models[handle]

    def handle(self, request):
        op = request.get("op")
        if op == "ping":
            return {"version": __version__}
        if op == "fit":
            kernel = parse_kernel(request["kernel"])
            x = _decode_array(request["x"], 2)
            y = _decode_array(request["y"], 1)
            noise = float(request["noise"])
            strategy = request.get("strategy", "auto")
            state = gp_fit(x, y, kernel, noise, strategy)
            handle = self._next
            self._next += 1
            self._models[handle] = state
            return {"handle": handle}
        if op == "predict":
            state = self._take_model(request)
            x = _decode_array(request["x"], 2)
            mean, var = gp_predict(state, x)
            return {"mean": _encode_array(mean), "variance": _encode_array(var)}
        if op == "metrics":
            mean = _decode_array(request["mean"], 1)
            var = _decode_array(request["variance"], 1)
            y_true = _decode_array(request["y_true"], 1)
            rmse, nll, cov = metrics(mean, var, float(request["noise"]), y_true)
            return {"rmse": rmse, "nll": nll, "coverage95": cov}
        if op == "dispose":
            handle = request.get("handle")
            self._models.pop(handle, None)
            return {"disposed": True}
        raise ValueError(f"unknown op {op!r}")

    def step(self, line):
        """One request line in, one reply object out."""
        request_id = None
        try:
            request = json.loads(line)
            if not isinstance(request, dict):
                raise ValueError("request must be a JSON object")
            request_id = request.get("id")
            result = self.handle(request)
            return {"id": request_id, "ok": True, "result": result}
        except json.JSONDecodeError as exc:
            return {
                "id": request_id,
                "ok": False,
                "error": {"kind": "parse", "message": f"bad JSON: {exc}"},
            }
        except Exception as exc:
            return {
                "id": request_id,
                "ok": False,
                "error": {"kind": _error_kind(exc), "message": str(exc)},
            }


def main():
    server = Server()
    out = sys.stdout
    for line in sys.stdin:
        if not line.strip():
            continue
        reply = server.step(line)
        out.write(json.dumps(reply) + "\n")
        out.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
