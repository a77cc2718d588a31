"""REST back-end: entity CRUD, result upload/download, replay, and the
wiring that starts the control logger and supervisor alongside the API.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
from contextlib import asynccontextmanager
from pathlib import Path
from typing import Any, Optional

import uvicorn
from fastapi import FastAPI, File, Form, HTTPException, Request, Response, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from kml.codec import validate_config
from kml.controlmsg import parse_control_message
from kml.controlplane.logger import ControlLogger
from kml.controlplane.registry import EntityRegistry, UnknownEntity
from kml.controlplane.supervisor import DEFAULT_RESTARTS, Supervisor
from kml.logbroker.client import BrokerClient, connect_with_retry
from kml.logbroker.log import (
    DuplicateTopic,
    OffsetSpec,
    UnknownTopic,
    format_offset_spec,
    parse_offset_spec,
)
from kml.mlengine import (
    CorruptWeights,
    InvalidSpec,
    SpecMismatch,
    load_weights,
    parse_model_spec,
    parse_training_config,
)

log = logging.getLogger(__name__)

DEFAULT_BACKEND_ADDR = "127.0.0.1:8085"
DEFAULT_CONTROL_TOPIC = "kafka-ml-control"

JOB_STATES = ("pending", "training", "uploaded", "failed")


def _error(status: int, name: str, message: str) -> HTTPException:
    return HTTPException(status_code=status, detail={"error": name, "message": message})


def build_app(
    registry: EntityRegistry,
    broker_addr: str,
    backend_addr: str = DEFAULT_BACKEND_ADDR,
    control_topic: str = DEFAULT_CONTROL_TOPIC,
    max_restarts: int = DEFAULT_RESTARTS,
    ui_dir: Optional[str] = None,
) -> FastAPI:
    backend_url = f"http://{backend_addr}"
    supervisor = Supervisor(registry, backend_url, broker_addr, control_topic, max_restarts)
    control_logger = ControlLogger(registry, broker_addr, control_topic)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        client = connect_with_retry(broker_addr)
        try:
            client.create_topic(control_topic, 1)
        except DuplicateTopic:
            pass
        app.state.broker = client
        control_logger.start()
        supervisor.start()
        yield
        supervisor.stop()
        control_logger.stop()
        client.close()

    app = FastAPI(title="kml control plane", lifespan=lifespan)
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )
    app.state.supervisor = supervisor
    app.state.registry = registry

    async def _json_body(request: Request) -> dict[str, Any]:
        try:
            body = await request.json()
        except json.JSONDecodeError:
            raise _error(400, "BadRequest", "body must be valid JSON")
        if not isinstance(body, dict):
            raise _error(400, "BadRequest", "body must be a JSON object")
        return body

    def _get_or_404(kind: str, entity_id: int) -> dict[str, Any]:
        try:
            return registry.get(kind, entity_id)
        except UnknownEntity:
            raise _error(404, "NotFound", f"{kind}/{entity_id} does not exist")

    # ------------------------------------------------------------------ models

    @app.post("/models", status_code=201)
    async def create_model(request: Request):
        body = await _json_body(request)
        name = body.get("name")
        if not name:
            raise _error(400, "BadRequest", "model name is required")
        spec = body.get("spec")
        spec_json = spec if isinstance(spec, str) else json.dumps(spec)
        try:
            parse_model_spec(spec_json)
        except InvalidSpec as exc:
            raise _error(400, "InvalidSpec", str(exc))
        return registry.create(
            "models",
            {"name": name, "description": body.get("description", ""), "spec": spec_json},
        )

    @app.get("/models")
    def list_models():
        return registry.list("models")

    @app.get("/models/{model_id}")
    def get_model(model_id: int):
        return _get_or_404("models", model_id)

    @app.delete("/models/{model_id}", status_code=204)
    def delete_model(model_id: int):
        _get_or_404("models", model_id)
        for cfg in registry.list("configurations"):
            if model_id in cfg["model_ids"]:
                raise _error(
                    409, "Conflict",
                    f"model {model_id} is referenced by configuration {cfg['id']}",
                )
        registry.delete("models", model_id)
        return Response(status_code=204)

    # ---------------------------------------------------------- configurations

    @app.post("/configurations", status_code=201)
    async def create_configuration(request: Request):
        body = await _json_body(request)
        model_ids = body.get("model_ids")
        if not (isinstance(model_ids, list) and model_ids):
            raise _error(400, "BadRequest", "model_ids must be a non-empty list")
        for mid in model_ids:
            if not registry.exists("models", mid):
                raise _error(400, "BadRequest", f"model {mid} does not exist")
        return registry.create(
            "configurations", {"name": body.get("name", ""), "model_ids": model_ids}
        )

    @app.get("/configurations")
    def list_configurations():
        return registry.list("configurations")

    @app.get("/configurations/{configuration_id}")
    def get_configuration(configuration_id: int):
        return _get_or_404("configurations", configuration_id)

    # ------------------------------------------------------------- deployments

    @app.post("/deployments", status_code=201)
    async def create_deployment(request: Request):
        body = await _json_body(request)
        configuration_id = body.get("configuration_id")
        if configuration_id is None or not registry.exists("configurations", configuration_id):
            raise _error(404, "UnknownConfiguration", f"configuration {configuration_id!r} does not exist")
        cfg_doc = registry.get("configurations", configuration_id)
        raw_tc = body.get("training_config", {})
        try:
            training_config = parse_training_config(raw_tc if isinstance(raw_tc, dict) else json.loads(raw_tc))
        except (InvalidSpec, json.JSONDecodeError, TypeError) as exc:
            raise _error(400, "BadRequest", f"bad training_config: {exc}")
        jobs = {
            str(mid): {"state": "pending", "restart_count": 0}
            for mid in cfg_doc["model_ids"]
        }
        doc = registry.create(
            "deployments",
            {
                "configuration_id": configuration_id,
                "training_config": json.loads(training_config.to_json()),
                "jobs": jobs,
            },
        )
        for mid in cfg_doc["model_ids"]:
            supervisor.spawn_training_job(doc, mid)
        return doc

    @app.get("/deployments")
    def list_deployments():
        return registry.list("deployments")

    @app.get("/deployments/{deployment_id}")
    def get_deployment(deployment_id: int):
        return _get_or_404("deployments", deployment_id)

    @app.get("/deployments/{deployment_id}/model-spec")
    def get_deployment_model_spec(deployment_id: int, model_id: int):
        dep = _get_or_404("deployments", deployment_id)
        if str(model_id) not in dep["jobs"]:
            raise _error(404, "UnknownJob", f"deployment {deployment_id} has no job for model {model_id}")
        model = _get_or_404("models", model_id)
        return {"model_id": model_id, "spec": model["spec"]}

    @app.post("/deployments/{deployment_id}/status/{model_id}")
    async def set_job_status(deployment_id: int, model_id: int, request: Request):
        body = await _json_body(request)
        state = body.get("state")
        if state not in JOB_STATES:
            raise _error(400, "BadRequest", f"state must be one of {JOB_STATES}")
        dep = _get_or_404("deployments", deployment_id)
        job = dep["jobs"].get(str(model_id))
        if job is None:
            raise _error(404, "UnknownJob", f"no job for model {model_id}")
        job["state"] = state
        registry.update("deployments", deployment_id, jobs=dep["jobs"])
        return {"ok": True}

    @app.post("/deployments/{deployment_id}/results/{model_id}", status_code=201)
    async def upload_result(
        deployment_id: int,
        model_id: int,
        metrics: str = Form(...),
        weights: UploadFile = File(...),
    ):
        dep = _get_or_404("deployments", deployment_id)
        job = dep["jobs"].get(str(model_id))
        if job is None:
            raise _error(404, "UnknownJob", f"no job for model {model_id}")
        if job["state"] == "uploaded":
            raise _error(409, "Conflict", "result already uploaded for this job")
        try:
            metrics_doc = json.loads(metrics)
        except json.JSONDecodeError as exc:
            raise _error(400, "BadRequest", f"metrics is not valid JSON: {exc}")
        blob = await weights.read()
        model = _get_or_404("models", model_id)
        try:
            load_weights(parse_model_spec(model["spec"]), blob)
        except (CorruptWeights, SpecMismatch) as exc:
            raise _error(400, type(exc).__name__, str(exc))
        result = registry.create(
            "results",
            {
                "deployment_id": deployment_id,
                "model_id": model_id,
                "metrics": metrics_doc,
                "status": "uploaded",
            },
        )
        registry.write_blob(result["id"], blob)
        job["state"] = "uploaded"
        job["result_id"] = result["id"]
        registry.update("deployments", deployment_id, jobs=dep["jobs"])
        return result

    # ----------------------------------------------------------------- results

    @app.get("/results")
    def list_results():
        return registry.list("results")

    @app.get("/results/{result_id}")
    def get_result(result_id: int):
        result = _get_or_404("results", result_id)
        model = _get_or_404("models", result["model_id"])
        return dict(result, model_spec=model["spec"])

    @app.get("/results/{result_id}/download")
    def download_result(result_id: int):
        _get_or_404("results", result_id)
        try:
            blob = registry.read_blob(result_id)
        except UnknownEntity:
            raise _error(404, "NotFound", f"no weight blob for result {result_id}")
        return Response(content=blob, media_type="application/octet-stream")

    # -------------------------------------------------------------- inferences

    def _datastream_for_deployment(deployment_id: int) -> Optional[dict[str, Any]]:
        streams = [
            d for d in registry.list("datastreams") if d["deployment_id"] == deployment_id
        ]
        return streams[-1] if streams else None

    @app.post("/inferences", status_code=201)
    async def create_inference(request: Request):
        body = await _json_body(request)
        result_id = body.get("result_id")
        if result_id is None or not registry.exists("results", result_id):
            raise _error(404, "UnknownResult", f"result {result_id!r} does not exist")
        result = registry.get("results", result_id)
        if result["status"] != "uploaded":
            raise _error(409, "ResultNotUploaded", f"result {result_id} is not uploaded")
        replicas = body.get("replicas", 1)
        input_topic = body.get("input_topic")
        output_topic = body.get("output_topic")
        if not (isinstance(replicas, int) and replicas >= 1):
            raise _error(400, "BadRequest", "replicas must be an integer >= 1")
        if not input_topic or not output_topic:
            raise _error(400, "BadRequest", "input_topic and output_topic are required")

        stream = _datastream_for_deployment(result["deployment_id"])
        if stream is None:
            raise _error(
                409, "NoDatastream",
                f"no logged control message for deployment {result['deployment_id']}; "
                "cannot auto-configure the input format",
            )
        try:
            validate_config(stream["input_format"], stream["input_config"])
        except Exception as exc:
            raise _error(409, "BadDatastreamConfig", str(exc))

        client: BrokerClient = app.state.broker
        for topic, partitions in ((input_topic, replicas), (output_topic, 1)):
            try:
                client.create_topic(topic, partitions)
            except DuplicateTopic:
                pass

        doc = registry.create(
            "inferences",
            {
                "result_id": result_id,
                "replicas": replicas,
                "input_topic": input_topic,
                "output_topic": output_topic,
                "input_format": stream["input_format"],
                "input_config": stream["input_config"],
            },
        )
        supervisor.spawn_replicas(doc)
        return doc

    @app.get("/inferences")
    def list_inferences():
        return [
            dict(doc, replica_pids=supervisor.replica_pids(doc["id"]))
            for doc in registry.list("inferences")
        ]

    @app.get("/inferences/{inference_id}")
    def get_inference(inference_id: int):
        doc = _get_or_404("inferences", inference_id)
        return dict(doc, replica_pids=supervisor.replica_pids(inference_id))

    @app.delete("/inferences/{inference_id}", status_code=204)
    def delete_inference(inference_id: int):
        _get_or_404("inferences", inference_id)
        supervisor.stop_replicas(inference_id)
        registry.delete("inferences", inference_id)
        return Response(status_code=204)

    # ------------------------------------------------------------- datastreams

    @app.get("/datastreams")
    def list_datastreams():
        return registry.list("datastreams")

    @app.post("/datastreams/{datastream_id}/replay")
    async def replay_datastream(datastream_id: int, request: Request):
        body = await _json_body(request)
        target = body.get("deployment_id")
        stream = _get_or_404("datastreams", datastream_id)
        if target is None or not registry.exists("deployments", target):
            raise _error(404, "UnknownDeployment", f"deployment {target!r} does not exist")
        dep = registry.get("deployments", target)
        if not any(j["state"] in ("pending", "training") for j in dep["jobs"].values()):
            raise _error(409, "Conflict", f"deployment {target} has no jobs awaiting a stream")

        client: BrokerClient = app.state.broker
        specs = [parse_offset_spec(s) for s in stream["topics"]]
        for spec in specs:
            try:
                base, _ = client.offsets(spec.topic, spec.partition)
            except UnknownTopic:
                raise _error(410, "StreamExpired", f"topic of slice {format_offset_spec(spec)} no longer exists")
            if spec.offset < base:
                raise _error(
                    410, "StreamExpired",
                    f"slice {format_offset_spec(spec)} expired: offset {spec.offset} "
                    f"is below the retained base {base}",
                )
        msg = parse_control_message(
            json.dumps(
                {
                    "deployment_id": target,
                    "topics": stream["topics"],
                    "input_format": stream["input_format"],
                    "input_config": stream["input_config"],
                    "validation_rate": stream["validation_rate"],
                    "total_msg": stream["total_msg"],
                }
            )
        )
        client.produce(control_topic, msg.to_json().encode("utf-8"))
        return {"ok": True, "deployment_id": target}

    # -------------------------------------------------------------------- UI

    if ui_dir and Path(ui_dir).is_dir():

        @app.get("/ui/config.json")
        def ui_config():
            return {"backend_base_url": backend_url}

        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    @app.exception_handler(HTTPException)
    async def http_error_handler(_request: Request, exc: HTTPException):
        detail = exc.detail if isinstance(exc.detail, dict) else {"error": "Error", "message": str(exc.detail)}
        return JSONResponse(status_code=exc.status_code, content=detail)

    return app


def main(argv: Optional[list[str]] = None) -> None:
    parser = argparse.ArgumentParser(description="Run the control-plane back end")
    parser.add_argument("--addr", default=os.environ.get("BACKEND_ADDR", DEFAULT_BACKEND_ADDR))
    parser.add_argument("--broker", default=os.environ.get("BROKER_ADDR", "127.0.0.1:9372"))
    parser.add_argument(
        "--control-topic", default=os.environ.get("CONTROL_TOPIC", DEFAULT_CONTROL_TOPIC)
    )
    parser.add_argument("--data-dir", default=os.environ.get("DATA_DIR", "./kml-data"))
    parser.add_argument(
        "--restarts", type=int,
        default=int(os.environ.get("SUPERVISOR_RESTARTS", DEFAULT_RESTARTS)),
    )
    parser.add_argument("--ui-dir", default=os.environ.get("UI_DIR"))
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s %(message)s")

    registry = EntityRegistry(args.data_dir)
    app = build_app(
        registry,
        broker_addr=args.broker,
        backend_addr=args.addr,
        control_topic=args.control_topic,
        max_restarts=args.restarts,
        ui_dir=args.ui_dir,
    )
    host, _, port = args.addr.rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port), log_level="warning")


if __name__ == "__main__":
    main()
