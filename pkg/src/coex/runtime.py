"""Forward-only inference runtime: self-contained artifacts, local service.

The export artifact reuses the checkpoint container; its header additionally
carries the vocabulary, the predicate schema, and a fingerprint of the tensor
payload, so a single file restores everything inference needs. The HTTP
service answers every request from shared read-only weights and never opens
an outbound connection, so text stays on the machine it arrived at.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .data import RESERVED, Vocab, tokenize
from .encoder import EncoderConfig
from .evaluator import triples_to_payload
from .tagger import ModelParams, RelationSchema, Triple, extract_triples
from .trainer import (
    CheckpointFormatError,
    CheckpointIntegrityError,
    TrainConfig,
    _params_from_tensors,
    read_checkpoint,
    save_checkpoint,
)


def model_fingerprint(params: ModelParams) -> str:
    """12-hex-digit digest over tensor names, shapes, and 32-bit payloads."""
    h = hashlib.sha256()
    for name, t in params.named_tensors():
        h.update(name.encode("utf-8"))
        h.update(repr(tuple(t.data.shape)).encode("ascii"))
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()[:12]


def _freeze(params: ModelParams) -> ModelParams:
    for _, t in params.named_tensors():
        t.requires_grad = False
        t.grad = None
    return params


@dataclass
class InferenceModel:
    """Frozen parameters plus everything needed to turn text into triples.

    Tensors carry requires_grad=False, so extraction never allocates graph
    nodes; the instance is safe to share across threads.
    """

    params: ModelParams
    config: EncoderConfig
    vocab: Vocab
    schema: RelationSchema
    threshold: float
    model_version: str

    def extract(self, text: str) -> list[Triple]:
        return infer(self, text)

    def truncates(self, text: str) -> bool:
        tokens, _ = tokenize(text)
        return len(tokens) > self.config.max_seq_len


def inference_model(
    params: ModelParams, config: TrainConfig, vocab: Vocab, schema: RelationSchema
) -> InferenceModel:
    return InferenceModel(
        params=_freeze(params),
        config=config.encoder,
        vocab=vocab,
        schema=schema,
        threshold=config.threshold,
        model_version=model_fingerprint(params),
    )


def export_model(
    params: ModelParams, config: TrainConfig, vocab: Vocab, schema: RelationSchema, path
):
    """Write one artifact holding weights, config, vocab, and schema."""
    extra = {
        "vocab": list(vocab.tokens[len(RESERVED) :]),
        "schema": list(schema.predicates),
        "model_version": model_fingerprint(params),
    }
    save_checkpoint(params, config, path, extra=extra)


def load_inference_model(path) -> InferenceModel:
    header, tensors = read_checkpoint(path)
    for section in ("vocab", "schema"):
        if not isinstance(header.get(section), list):
            raise CheckpointFormatError(f"artifact header lacks {section} section")
    params, config = _params_from_tensors(header, tensors)
    model = inference_model(
        params,
        config,
        Vocab.from_tokens(header["vocab"]),
        RelationSchema(tuple(header["schema"])),
    )
    declared = header.get("model_version")
    if declared is not None and declared != model.model_version:
        raise CheckpointIntegrityError(
            f"tensor payload fingerprint {model.model_version} != declared {declared}"
        )
    return model


def infer(model: InferenceModel, text: str) -> list[Triple]:
    """Deterministic extraction; equals the training forward with dropout off."""
    return extract_triples(
        text, model.params, model.config, model.vocab, model.schema, model.threshold
    )


# ---------------------------------------------------------------------------
# HTTP service


def _encode_with_self_byte_count(payload: dict) -> bytes:
    """Serialize with response_bytes equal to the final body length.

    The count participates in the body, so iterate to a fixed point; the
    length only changes while the digit count grows, which caps the loop.
    """
    payload = dict(payload)
    payload["response_bytes"] = 0
    for _ in range(5):
        body = json.dumps(payload, ensure_ascii=False).encode("utf-8")
        if payload["response_bytes"] == len(body):
            return body
        payload["response_bytes"] = len(body)
    raise RuntimeError("response byte count failed to stabilize")


def _extract_response(model: InferenceModel, raw: bytes) -> tuple[int, bytes]:
    start = time.perf_counter()
    try:
        obj = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return 400, json.dumps({"error": "body is not valid JSON"}).encode("utf-8")
    if not isinstance(obj, dict) or not isinstance(obj.get("text"), str):
        return 400, json.dumps({"error": 'body must be {"text": "..."}'}).encode("utf-8")
    text = obj["text"]
    triples = model.extract(text)
    payload = {
        "triples": triples_to_payload(triples),
        "truncated": model.truncates(text),
        "model_version": model.model_version,
        "request_bytes": len(raw),
        "latency_ms": 0.0,
    }
    # first encode fixes the triple payload cost; the recorded latency then
    # covers parsing, extraction, and serialization, excluding the transfer
    _encode_with_self_byte_count(payload)
    payload["latency_ms"] = round((time.perf_counter() - start) * 1000.0, 3)
    return 200, _encode_with_self_byte_count(payload)


def _make_handler(model: InferenceModel, quiet: bool = True):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            if not quiet:
                BaseHTTPRequestHandler.log_message(self, fmt, *args)

        def _send(self, status: int, body: bytes):
            self.send_response(status)
            self.send_header("Content-Type", "application/json; charset=utf-8")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path == "/healthz":
                body = json.dumps(
                    {"status": "ok", "model_version": model.model_version}
                ).encode("utf-8")
                self._send(200, body)
            else:
                self._send(404, json.dumps({"error": "unknown path"}).encode("utf-8"))

        def do_POST(self):
            if self.path != "/extract":
                self._send(404, json.dumps({"error": "unknown path"}).encode("utf-8"))
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
            except ValueError:
                length = 0
            raw = self.rfile.read(max(length, 0))
            status, body = _extract_response(model, raw)
            self._send(status, body)

    return Handler


def create_server(
    model: InferenceModel, address: tuple[str, int] = ("127.0.0.1", 0), quiet: bool = True
) -> ThreadingHTTPServer:
    """Bind a threading HTTP server; the caller drives serve_forever."""
    server = ThreadingHTTPServer(address, _make_handler(model, quiet))
    server.daemon_threads = True
    return server


def serve(model: InferenceModel, address: tuple[str, int], quiet: bool = True):
    """Serve until interrupted; data never leaves the process."""
    server = create_server(model, address, quiet)
    try:
        server.serve_forever()
    finally:
        server.server_close()
