"""Stateless HTTP service over trained checkpoints.

Every handler is a pure function of (request, loaded checkpoints): the
client holds partial models and code trees and sends them back with each
request, so no call mutates server state. Generation is seeded per
request and decoded in eval mode, which makes responses reproducible.
"""

import json
import os

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, PlainTextResponse
from fastapi.staticfiles import StaticFiles

from . import cascade as cs
from . import geometry
from . import model as cm
from .errors import CadError, GenerationError, ValidationError

LEVEL_NAMES = ("loop", "profile", "solid")


class ServiceState:
    """Checkpoints and the read-only model registry, loaded once."""

    def __init__(self, model_dir):
        self.model_dir = model_dir
        self.cascade = None
        if os.path.exists(os.path.join(model_dir, "encoder.ckpt")):
            self.cascade = cs.load_cascade(model_dir)
        self.models = {}
        reg_path = os.path.join(model_dir, "models.json")
        if os.path.exists(reg_path):
            with open(reg_path) as f:
                for doc in json.load(f):
                    model = cm.model_from_json(doc)
                    mid = str(cm.hash_model(cm.tokenize_model(model)))
                    self.models[mid] = model
        self.clusters = {}
        for level in LEVEL_NAMES:
            path = os.path.join(model_dir, f"clusters_{level}.json")
            if os.path.exists(path):
                with open(path) as f:
                    self.clusters[level] = json.load(f)

    def checkpoint_summary(self):
        names = ["encoder.ckpt", "g_code.ckpt", "g_cad.ckpt"] + [
            f"vqvae_{lv}.ckpt" for lv in LEVEL_NAMES
        ]
        return {
            n: os.path.exists(os.path.join(self.model_dir, n)) for n in names
        }


def _error(status, message, code="error", **extra):
    return JSONResponse({"error": message, "code": code, **extra}, status_code=status)


def _require(body, key):
    if key not in body:
        raise ValidationError(f"missing field {key!r}", code="missing_field")
    return body[key]


async def _read_json(request):
    try:
        return await request.json()
    except Exception:
        raise ValidationError("request body is not valid JSON", code="bad_json")


def _parse_model(doc):
    try:
        return cm.model_from_json(doc)
    except CadError:
        raise
    except (KeyError, TypeError, ValueError, IndexError) as e:
        raise ValidationError(f"malformed model document: {e}", code="bad_model")


def _parse_partial(doc):
    if doc is None:
        return None
    return _parse_model(doc)


def _generation_response(state, seqs, trees, dropped):
    models = []
    kept = []
    for s, t in zip(seqs, trees):
        try:
            models.append(cm.model_to_json(cm.detokenize_model(s)))
            kept.append(cs.code_tree_to_json(t))
        except CadError:
            dropped += 1
    return {"models": models, "codes": kept, "dropped": dropped}


def create_app(model_dir):
    state = ServiceState(model_dir)
    app = FastAPI(title="hiercad service", openapi_url="/spec")

    @app.exception_handler(CadError)
    async def cad_error_handler(request: Request, exc: CadError):
        if isinstance(exc, ValidationError) and exc.code == "level_mismatch":
            return _error(409, str(exc), exc.code)
        if isinstance(exc, GenerationError):
            return _error(500, str(exc), exc.code, dropped=exc.details.get("dropped", 0))
        return _error(400, str(exc), exc.code)

    def need_cascade():
        if state.cascade is None:
            raise GenerationError("no generator checkpoint loaded")
        return state.cascade

    @app.get("/health")
    def health():
        vocab = None
        if state.cascade is not None:
            v = state.cascade.vocab
            vocab = {"loop": v.k_loop, "profile": v.k_profile, "solid": v.k_solid}
        return {
            "status": "ok",
            "checkpoints": state.checkpoint_summary(),
            "vocab": vocab,
        }

    @app.get("/model/{mid}")
    def get_model(mid: str):
        if mid not in state.models:
            return _error(404, f"unknown model id {mid}", "unknown_id")
        return cm.model_to_json(state.models[mid])

    @app.get("/mesh/{mid}")
    def get_mesh(mid: str):
        if mid not in state.models:
            return _error(404, f"unknown model id {mid}", "unknown_id")
        mesh = geometry.mesh_model(state.models[mid])
        return PlainTextResponse(geometry.mesh_to_obj(mesh), media_type="text/plain")

    @app.post("/mesh")
    async def post_mesh(request: Request):
        # meshes a client-held model; /mesh/{id} only covers the registry
        body = await _read_json(request)
        model = _parse_model(_require(body, "model"))
        mesh = geometry.mesh_model(model)
        return PlainTextResponse(geometry.mesh_to_obj(mesh), media_type="text/plain")

    @app.get("/codebook/{level}/clusters")
    def get_clusters(level: str):
        if level not in LEVEL_NAMES:
            return _error(400, f"unknown level {level}", "unknown_level")
        if level not in state.clusters:
            return _error(404, f"no cluster export for level {level}", "unknown_id")
        return state.clusters[level]

    @app.post("/codes/edit")
    async def codes_edit(request: Request):
        body = await _read_json(request)
        casc = need_cascade()
        tree = cs.code_tree_from_json(_require(body, "codes"))
        edited = cs.edit_code_tree(
            tree,
            tuple(_require(body, "slot_path")),
            _require(body, "level"),
            int(_require(body, "new_code")),
            casc.vocab,
        )
        return {"codes": cs.code_tree_to_json(edited)}

    def run_generate(body):
        casc = need_cascade()
        mode = _require(body, "mode")
        seed = int(body.get("seed", 0))
        p = body.get("p", 0.9)
        n = int(body.get("n", 1))
        rng = np.random.default_rng(seed)
        if mode == "unconditional":
            seqs, trees, overflow = casc.sample_unconditional(n, p, rng)
            kept_s = [s for s, ov in zip(seqs, overflow) if not ov]
            kept_t = [t for t, ov in zip(trees, overflow) if not ov]
            return _generation_response(state, kept_s, kept_t, sum(overflow))
        if mode == "autocomplete":
            partial = _parse_partial(_require(body, "partial"))
            models, trees, dropped = casc.autocomplete(partial, n, p, rng)
            return {
                "models": [cm.model_to_json(m) for m in models],
                "codes": [cs.code_tree_to_json(t) for t in trees],
                "dropped": dropped,
            }
        if mode in ("edit", "regenerate"):
            partial = _parse_partial(body.get("partial"))
            docs = _require(body, "codes")
            if isinstance(docs, dict):
                docs = [docs]
            trees = [cs.code_tree_from_json(d) for d in docs]
            models, kept, dropped = [], [], 0
            for tree in trees:
                out = casc.regenerate_with_codes(partial, tree, rng)
                models.append(cm.model_to_json(out))
                kept.append(cs.code_tree_to_json(tree))
            return {"models": models, "codes": kept, "dropped": dropped}
        raise ValidationError(f"unknown mode {mode!r}", code="unknown_mode")

    @app.post("/generate")
    async def generate(request: Request):
        return run_generate(await _read_json(request))

    @app.post("/autocomplete")
    async def autocomplete(request: Request):
        body = await _read_json(request)
        body["mode"] = "autocomplete"
        return run_generate(body)

    @app.post("/regenerate")
    async def regenerate(request: Request):
        body = await _read_json(request)
        body["mode"] = "regenerate"
        return run_generate(body)

    ui_dir = os.path.join(model_dir, "ui")
    if os.path.isdir(ui_dir):
        app.mount("/ui", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app
