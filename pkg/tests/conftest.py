import datetime as dt
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import hypothesis
import numpy as np
import pytest
import yaml

from llmoe.features import build_window_samples
from llmoe.market_data import MarketSeries, OhlcvBar, generate_synthetic_series

np.seterr(all="raise", under="ignore")

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.load_profile("default")


def make_series(closes, adjcloses=None, start=dt.date(2020, 1, 1), headlines=None, symbol="TST"):
    """Flat-bar series (open = high = low = close) from a list of closes."""
    adjcloses = closes if adjcloses is None else adjcloses
    headlines = headlines or {}
    bars = [
        OhlcvBar(start + dt.timedelta(days=i), c, c, c, c, a, 1000, headlines.get(i))
        for i, (c, a) in enumerate(zip(closes, adjcloses))
    ]
    return MarketSeries(symbol, bars)


def write_config(directory, days=120, seed=3, seeds=(1, 2), models=("llmoe", "mlp"), epochs=2,
                 router=None, grid=None, data=None, **synthetic):
    """Write a small synthetic-data run config into ``directory`` and return its path."""
    cfg = {
        "data": data or {"synthetic": {"seed": seed, "days": days, **synthetic}},
        "router": {"kind": "rule", "concurrency": 2, **(router or {})},
        "training": {"epochs": epochs, "seeds": list(seeds)},
        "experiment": {"models": list(models), "grid": grid or {}},
        "output": "out",
    }
    path = directory / "config.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="session")
def small_series():
    return generate_synthetic_series(seed=3, days=120)


@pytest.fixture(scope="session")
def small_samples(small_series):
    return build_window_samples(small_series)


class StubChat:
    """Chat-completion endpoint on localhost with scripted replies and overlap tracking."""

    def __init__(self, reply=lambda n, body: "Optimistic\nSteady gains.", delay=0.0):
        self.reply = reply
        self.delay = delay
        self.requests = []
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                with stub._lock:
                    stub.requests.append(body)
                    n = len(stub.requests)
                    stub.in_flight += 1
                    stub.max_in_flight = max(stub.max_in_flight, stub.in_flight)
                try:
                    if stub.delay:
                        time.sleep(stub.delay)
                    content = stub.reply(n, body)
                    if content is None:
                        self.send_response(500)
                        self.end_headers()
                        return
                    payload = json.dumps({"choices": [{"message": {"role": "assistant", "content": content}}]})
                    data = payload.encode()
                    self.send_response(200)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                finally:
                    with stub._lock:
                        stub.in_flight -= 1

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1/chat/completions"
        self._thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def stub_chat():
    servers = []

    def start(**kwargs):
        s = StubChat(**kwargs).__enter__()
        servers.append(s)
        return s

    yield start
    for s in servers:
        s.__exit__(None, None, None)
