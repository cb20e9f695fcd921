#!/usr/bin/env python3
"""HTTP sidecar serving the neural reward scorers for reward.scorer_backend = "remote".

Every route takes POST {"model": <hf id>, "text": <str>}:
  /embed      -> {"embedding": [float]}
  /empathy    -> {"positive": float}
  /sentiment  -> {"positive": float, "negative": float}
  /emotion    -> {"label": str}

Needs torch, transformers and sentence-transformers.
"""

import argparse
import json
import logging
import threading
from functools import lru_cache
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import torch
from sentence_transformers import SentenceTransformer
from transformers import AutoModelForSequenceClassification, AutoTokenizer

log = logging.getLogger("scorer_sidecar")
_lock = threading.Lock()


@lru_cache(maxsize=None)
def embedder(model_id):
    return SentenceTransformer(model_id, device="cpu")


@lru_cache(maxsize=None)
def classifier(model_id):
    tok = AutoTokenizer.from_pretrained(model_id)
    model = AutoModelForSequenceClassification.from_pretrained(model_id).eval()
    return tok, model


def class_probs(model_id, text):
    tok, model = classifier(model_id)
    with torch.no_grad():
        logits = model(**tok(text, return_tensors="pt", truncation=True)).logits[0]
    probs = torch.softmax(logits, dim=-1).tolist()
    labels = [model.config.id2label[i].lower() for i in range(len(probs))]
    return dict(zip(labels, probs)), probs


def embed(model_id, text):
    vec = embedder(model_id).encode(text, normalize_embeddings=True)
    return {"embedding": [float(x) for x in vec]}


def empathy(model_id, text):
    by_label, probs = class_probs(model_id, text)
    for name in ("empathetic", "empathy", "positive", "label_1"):
        if name in by_label:
            return {"positive": by_label[name]}
    return {"positive": probs[-1]}


def sentiment(model_id, text):
    by_label, probs = class_probs(model_id, text)
    pos = by_label.get("positive", probs[-1])
    neg = by_label.get("negative", probs[0])
    return {"positive": pos, "negative": neg}


def emotion(model_id, text):
    by_label, _ = class_probs(model_id, text)
    return {"label": max(by_label, key=by_label.get)}


ROUTES = {"/embed": embed, "/empathy": empathy, "/sentiment": sentiment, "/emotion": emotion}


class Handler(BaseHTTPRequestHandler):
    def _send(self, status, body):
        data = json.dumps(body).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        if self.path == "/health":
            self._send(200, {"status": "ok"})
        else:
            self._send(404, {"error": "not_found"})

    def do_POST(self):
        route = ROUTES.get(self.path)
        if route is None:
            self._send(404, {"error": "not_found"})
            return
        try:
            req = json.loads(self.rfile.read(int(self.headers.get("Content-Length", 0))))
            model_id, text = req["model"], req["text"]
            if not isinstance(model_id, str) or not isinstance(text, str):
                raise TypeError("model and text must be strings")
        except (ValueError, KeyError, TypeError) as e:
            self._send(400, {"error": "invalid_request", "message": str(e)})
            return
        try:
            with _lock:
                self._send(200, route(model_id, text))
        except Exception as e:  # model download or inference failure
            log.exception("%s failed", self.path)
            self._send(500, {"error": "scorer_failed", "message": str(e)})

    def log_message(self, fmt, *args):
        log.info(fmt, *args)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--host", default="127.0.0.1")
    ap.add_argument("--port", type=int, default=8765)
    ap.add_argument("--preload", nargs="*", default=[], metavar="ROUTE=MODEL",
                    help="load models at startup, e.g. /embed=sentence-transformers/all-MiniLM-L6-v2")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    for item in args.preload:
        route, model_id = item.split("=", 1)
        ROUTES[route](model_id, "warm up")
    log.info("listening on %s:%d", args.host, args.port)
    ThreadingHTTPServer((args.host, args.port), Handler).serve_forever()


if __name__ == "__main__":
    main()
