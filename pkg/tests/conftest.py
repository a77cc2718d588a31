"""Shared fixtures: in-process broker, served broker, and a full
broker+backend stack run as subprocesses (the same way production runs).
"""
from __future__ import annotations

import json
import os
import shutil
import socket
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pytest
import requests

from kml.logbroker import BrokerClient, BrokerServer, LogBroker
from kml.logbroker.client import connect_with_retry

HCOPD_SPEC = {
    "input_dim": 4,
    "layers": [
        {"kind": "dropout", "rate": 0.2},
        {"kind": "dense", "units": 4, "activation": "sigmoid"},
        {"kind": "dense", "units": 2, "activation": "softmax"},
    ],
    "loss": "sparse_categorical_crossentropy",
    "optimizer": {"kind": "adam", "learning_rate": 0.0001},
    "metrics": ["accuracy"],
}

RAW_4F_CONFIG = json.dumps(
    {"data_type": "f32", "data_reshape": [4], "label_type": "i32", "label_shape": [1]}
)


def free_port() -> int:
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    return port


def synthetic_clusters(n: int = 275, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Two well-separated Gaussian clusters in 4-D, shuffled, fixed seed."""
    rng = np.random.default_rng(seed)
    n0 = n // 2 + n % 2
    X = np.vstack([rng.normal(-1.5, 1.0, (n0, 4)), rng.normal(1.5, 1.0, (n - n0, 4))])
    y = np.concatenate([np.zeros(n0), np.ones(n - n0)])
    perm = rng.permutation(n)
    return X[perm], y[perm].astype(int)


def write_csv(path: Path, X: np.ndarray, y: np.ndarray) -> None:
    with open(path, "w") as f:
        f.write("a,b,c,d,label\n")
        for i in range(len(y)):
            f.write(",".join(f"{v:.9f}" for v in X[i]) + f",{y[i]}\n")


@pytest.fixture
def broker() -> LogBroker:
    return LogBroker()


@pytest.fixture
def served_broker():
    server = BrokerServer("127.0.0.1:0")
    server.start(retention_interval_s=0)
    yield server
    server.stop()


@dataclass
class Stack:
    broker_addr: str
    backend_addr: str
    data_dir: Path
    procs: list[subprocess.Popen] = field(default_factory=list)

    @property
    def base(self) -> str:
        return f"http://{self.backend_addr}"

    def client(self) -> BrokerClient:
        return connect_with_retry(self.broker_addr)

    def get(self, path: str, **kw) -> requests.Response:
        return requests.get(self.base + path, timeout=30, **kw)

    def post(self, path: str, **kw) -> requests.Response:
        return requests.post(self.base + path, timeout=30, **kw)

    def wait_for_result(self, deployment_id: int, timeout: float = 120.0) -> dict[str, Any]:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            for res in self.get("/results").json():
                if res["deployment_id"] == deployment_id:
                    return res
            dep = self.get(f"/deployments/{deployment_id}").json()
            if all(j["state"] == "failed" for j in dep["jobs"].values()):
                raise AssertionError(f"all jobs failed: {dep['jobs']}")
            time.sleep(0.2)
        raise TimeoutError(f"no result for deployment {deployment_id} after {timeout}s")

    def wait_for_datastreams(self, count: int, timeout: float = 15.0) -> list[dict]:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            streams = self.get("/datastreams").json()
            if len(streams) >= count:
                return streams
            time.sleep(0.1)
        raise TimeoutError(f"fewer than {count} datastreams after {timeout}s")

    def send_csv(
        self,
        csv_path: Path,
        deployment_id: int,
        topic: str,
        validation_rate: float = 0.2,
        create_topic: bool = True,
        config: str = RAW_4F_CONFIG,
        extra: tuple[str, ...] = (),
    ) -> subprocess.CompletedProcess:
        args = [
            sys.executable, "-m", "kml.streamclient", "send",
            "--csv", str(csv_path), "--features", "a,b,c,d", "--label", "label",
            "--deployment", str(deployment_id), "--topic", topic,
            "--format", "raw", "--config", config,
            "--validation-rate", str(validation_rate), "--standardize",
            "--broker", self.broker_addr, *extra,
        ]
        if create_topic:
            args.append("--create-topic")
        return subprocess.run(args, capture_output=True, text=True, timeout=120)

    def stop(self) -> None:
        for p in self.procs:
            p.terminate()
        for p in self.procs:
            try:
                p.wait(timeout=10)
            except subprocess.TimeoutExpired:
                p.kill()


def launch_stack(data_dir: Path, env_extra: Optional[dict[str, str]] = None,
                 restarts: Optional[int] = None) -> Stack:
    broker_addr = f"127.0.0.1:{free_port()}"
    backend_addr = f"127.0.0.1:{free_port()}"
    env = dict(os.environ, **(env_extra or {}))
    stack = Stack(broker_addr, backend_addr, data_dir)
    stack.procs.append(
        subprocess.Popen(
            [sys.executable, "-m", "kml.logbroker.server", "--addr", broker_addr],
            env=env,
        )
    )
    backend_cmd = [
        sys.executable, "-m", "kml.controlplane.server",
        "--addr", backend_addr, "--broker", broker_addr,
        "--data-dir", str(data_dir),
    ]
    if restarts is not None:
        backend_cmd += ["--restarts", str(restarts)]
    stack.procs.append(subprocess.Popen(backend_cmd, env=env))
    deadline = time.monotonic() + 30
    while time.monotonic() < deadline:
        try:
            requests.get(stack.base + "/models", timeout=1)
            return stack
        except requests.ConnectionError:
            time.sleep(0.2)
    stack.stop()
    raise TimeoutError("backend did not come up")


@pytest.fixture
def stack(tmp_path):
    s = launch_stack(tmp_path / "data")
    yield s
    s.stop()
