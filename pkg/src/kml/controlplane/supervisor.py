"""In-process supervisor for training jobs and inference replica sets.

Training jobs are run-to-completion worker processes, restarted on
failure up to a configurable budget, after which the job is marked
failed. Inference replicas are kept at their declared count for as long
as the deployment exists: any dead replica is respawned on the next
sweep. Worker processes receive their context as JSON through the
KAFKA_ML_JOB / KAFKA_ML_INFER environment variables.
"""
from __future__ import annotations

import json
import logging
import os
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from typing import Any, Optional

from kml.controlplane.registry import EntityRegistry

log = logging.getLogger(__name__)

DEFAULT_RESTARTS = 3


@dataclass
class _Job:
    deployment_id: int
    model_id: int
    context: dict[str, Any]
    proc: Optional[subprocess.Popen] = None
    done: bool = False


@dataclass
class _ReplicaSet:
    inference_id: int
    replicas: int
    context: dict[str, Any]  # per-replica fields filled in at spawn
    procs: list[Optional[subprocess.Popen]] = field(default_factory=list)
    stopped: bool = False


class Supervisor:
    def __init__(
        self,
        registry: EntityRegistry,
        backend_url: str,
        broker_addr: str,
        control_topic: str,
        max_restarts: int = DEFAULT_RESTARTS,
        sweep_interval: float = 0.3,
    ) -> None:
        self.registry = registry
        self.backend_url = backend_url
        self.broker_addr = broker_addr
        self.control_topic = control_topic
        self.max_restarts = max_restarts
        self.sweep_interval = sweep_interval
        self._lock = threading.RLock()
        self._jobs: list[_Job] = []
        self._replica_sets: dict[int, _ReplicaSet] = {}
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    # ---------------------------------------------------------------- control

    def start(self) -> None:
        self._adopt_persisted_state()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)
        with self._lock:
            for job in self._jobs:
                if job.proc and job.proc.poll() is None:
                    job.proc.terminate()
            for rs in self._replica_sets.values():
                rs.stopped = True
                for proc in rs.procs:
                    if proc and proc.poll() is None:
                        proc.terminate()

    def _adopt_persisted_state(self) -> None:
        """Resume unfinished jobs and live replica sets after a restart."""
        for dep in self.registry.list("deployments"):
            for model_id, job in dep.get("jobs", {}).items():
                if job["state"] in ("pending", "training"):
                    self.spawn_training_job(dep, int(model_id))
        for inf in self.registry.list("inferences"):
            self.spawn_replicas(inf)

    # --------------------------------------------------------------- training

    def spawn_training_job(self, deployment: dict[str, Any], model_id: int) -> None:
        context = {
            "backend_url": self.backend_url,
            "broker_addr": self.broker_addr,
            "control_topic": self.control_topic,
            "deployment_id": deployment["id"],
            "model_id": model_id,
            "training_config": deployment["training_config"],
        }
        job = _Job(deployment["id"], model_id, context)
        with self._lock:
            self._jobs.append(job)
            self._spawn(job)

    def _spawn(self, job: _Job) -> None:
        env = dict(os.environ, KAFKA_ML_JOB=json.dumps(job.context))
        job.proc = subprocess.Popen([sys.executable, "-m", "kml.trainworker"], env=env)
        log.info(
            "spawned training job deployment=%s model=%s pid=%s",
            job.deployment_id, job.model_id, job.proc.pid,
        )

    def _job_doc(self, job: _Job) -> dict[str, Any]:
        dep = self.registry.get("deployments", job.deployment_id)
        return dep["jobs"][str(job.model_id)]

    def _set_job(self, job: _Job, **fields: Any) -> None:
        dep = self.registry.get("deployments", job.deployment_id)
        dep["jobs"][str(job.model_id)].update(fields)
        self.registry.update("deployments", job.deployment_id, jobs=dep["jobs"])

    # -------------------------------------------------------------- inference

    def spawn_replicas(self, inference: dict[str, Any]) -> None:
        context = {
            "backend_url": self.backend_url,
            "broker_addr": self.broker_addr,
            "inference_id": inference["id"],
            "result_id": inference["result_id"],
            "input_topic": inference["input_topic"],
            "output_topic": inference["output_topic"],
            "input_format": inference["input_format"],
            "input_config": inference["input_config"],
            "group_id": f"inference-{inference['id']}",
        }
        rs = _ReplicaSet(inference["id"], inference["replicas"], context)
        rs.procs = [None] * inference["replicas"]
        with self._lock:
            self._replica_sets[inference["id"]] = rs
            for i in range(rs.replicas):
                self._spawn_replica(rs, i)

    def _spawn_replica(self, rs: _ReplicaSet, index: int) -> None:
        context = dict(rs.context, replica_index=index)
        env = dict(os.environ, KAFKA_ML_INFER=json.dumps(context))
        rs.procs[index] = subprocess.Popen([sys.executable, "-m", "kml.inferworker"], env=env)
        log.info(
            "spawned inference replica inference=%s index=%s pid=%s",
            rs.inference_id, index, rs.procs[index].pid,
        )

    def stop_replicas(self, inference_id: int) -> None:
        with self._lock:
            rs = self._replica_sets.pop(inference_id, None)
        if rs is None:
            return
        rs.stopped = True
        for proc in rs.procs:
            if proc and proc.poll() is None:
                proc.terminate()
        for proc in rs.procs:
            if proc:
                try:
                    proc.wait(timeout=5)
                except subprocess.TimeoutExpired:
                    proc.kill()

    def replica_pids(self, inference_id: int) -> list[Optional[int]]:
        with self._lock:
            rs = self._replica_sets.get(inference_id)
            if rs is None:
                return []
            return [p.pid if p and p.poll() is None else None for p in rs.procs]

    # ------------------------------------------------------------------ sweep

    def _run(self) -> None:
        while not self._stop.wait(self.sweep_interval):
            try:
                self._sweep()
            except Exception:
                log.exception("supervisor sweep failed")

    def _sweep(self) -> None:
        with self._lock:
            jobs = list(self._jobs)
            replica_sets = list(self._replica_sets.values())

        for job in jobs:
            if job.done or job.proc is None:
                continue
            rc = job.proc.poll()
            if rc is None:
                continue
            doc = self._job_doc(job)
            if rc == 0 and doc["state"] == "uploaded":
                job.done = True
                continue
            restarts = doc.get("restart_count", 0)
            if restarts >= self.max_restarts:
                log.warning(
                    "job deployment=%s model=%s failed after %s restarts",
                    job.deployment_id, job.model_id, restarts,
                )
                self._set_job(job, state="failed")
                job.done = True
            else:
                self._set_job(job, restart_count=restarts + 1)
                log.info(
                    "restarting job deployment=%s model=%s (attempt %s)",
                    job.deployment_id, job.model_id, restarts + 1,
                )
                self._spawn(job)

        for rs in replica_sets:
            if rs.stopped:
                continue
            for i, proc in enumerate(rs.procs):
                if proc is not None and proc.poll() is not None:
                    log.info(
                        "replica inference=%s index=%s died (rc=%s); respawning",
                        rs.inference_id, i, proc.returncode,
                    )
                    self._spawn_replica(rs, i)
