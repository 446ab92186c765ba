"""Command-line pipeline: preprocess, train, encode, sample, evaluate,
export and serve.

Every command writes a run manifest (resolved parameters, seeds,
package versions) next to its outputs; rerunning a command with
``--from-manifest`` replays those parameters and, because all randomness
is seeded, reproduces the outputs bit for bit.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""

import json
import os
import platform
import sys

import click
import numpy as np
import torch

from . import __version__
from . import cascade as cs
from . import geometry
from . import hierarchy as hxt
from . import metrics
from . import model as cm
from . import synth
from . import vqvae as vq
from . import nn as hnn
from .errors import CadError, GenerationError, ParseError, RangeError, ValidationError

LOCK_NAME = ".serve.lock"


def data_dir_default():
    return os.environ.get("HNC_DATA_DIR", "data")


def write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read {path}: {e}", code="bad_input")


def write_manifest(out_dir, command, params):
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "params": params,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
            "hiercad": __version__,
        },
    }
    write_json(os.path.join(out_dir, "run_manifest.json"), manifest)


def manifest_params(path, command):
    doc = load_json(path)
    if doc.get("command") != command:
        raise ValidationError(
            f"manifest is for {doc.get('command')!r}, not {command!r}", code="bad_input"
        )
    return doc["params"]


def resolve_params(from_manifest, command, flags):
    return manifest_params(from_manifest, command) if from_manifest else flags


def _lock_pid_alive(lock_path):
    try:
        with open(lock_path) as f:
            pid = int(f.read().strip())
        os.kill(pid, 0)
    except PermissionError:
        return True
    except (OSError, ValueError):
        return False
    return True


def check_lock(model_dir):
    lock_path = os.path.join(model_dir, LOCK_NAME)
    if not os.path.exists(lock_path):
        return
    if _lock_pid_alive(lock_path):
        raise GenerationError(
            f"{model_dir} is locked by a running serve process", code="locked"
        )
    os.remove(lock_path)  # stale: the serve process is gone


def block_config(p):
    return hnn.BlockConfig(
        d_model=p["d_model"],
        d_ff=p["d_ff"],
        heads=p["heads"],
        dropout=p["dropout"],
        layers={"vqvae": p["n_layers"], "encoder": p["n_layers"], "decoder": p["n_layers"]},
    )


def net_options(f):
    f = click.option("--d-model", default=256, show_default=True)(f)
    f = click.option("--d-ff", default=512, show_default=True)(f)
    f = click.option("--heads", default=8, show_default=True)(f)
    f = click.option("--dropout", default=0.1, show_default=True)(f)
    f = click.option("--n-layers", default=4, show_default=True)(f)
    return f


def from_manifest_option(f):
    return click.option(
        "--from-manifest", type=click.Path(exists=True), default=None,
        help="Replay a previous run's parameters from its manifest.",
    )(f)


@click.group()
@click.option("--threads", default=None, type=int, help="Torch CPU thread count.")
@click.version_option(__version__)
def cli(threads):
    """Hierarchical neural coding pipeline for sketch-and-extrude CAD."""
    if threads:
        torch.set_num_threads(threads)


# ---------------------------------------------------------------------------
# data


def _load_corpus(params):
    if params["synthetic"]:
        return synth.random_corpus(params["seed"], params["synthetic"])
    if not params["input"]:
        raise ValidationError("either --input or --synthetic is required", code="bad_input")
    doc = load_json(params["input"])
    docs = doc["models"] if isinstance(doc, dict) else doc
    try:
        return [cm.model_from_json(d) for d in docs]
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"malformed corpus: {e}", code="bad_input")


@cli.command()
@click.option("--input", type=click.Path(), default=None, help="Corpus JSON file.")
@click.option("--synthetic", type=int, default=0, help="Generate N synthetic models instead.")
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None, help="Dataset directory.")
@from_manifest_option
def preprocess(input, synthetic, seed, out, from_manifest):
    """Filter, dedup and extract the three property levels from a corpus."""
    params = resolve_params(from_manifest, "preprocess", {
        "input": input, "synthetic": synthetic, "seed": seed,
        "out": out or os.path.join(data_dir_default(), "dataset"),
    })
    models = _load_corpus(params)
    ds = hxt.build_dataset(models)
    for idx, reason in ds.excluded:
        click.echo(f"excluded model {idx}: {reason}", err=True)
    out_dir = params["out"]
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "models.json"),
               [cm.model_to_json(m) for m in ds.models])
    with open(os.path.join(out_dir, "properties.jsonl"), "w") as f:
        for rec in hxt.dataset_manifest(ds):
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    write_json(os.path.join(out_dir, "card.json"), hxt.dataset_card(ds))
    write_manifest(out_dir, "preprocess", params)
    click.echo(json.dumps(ds.counts, sort_keys=True))


def _level_arrays(data_dir, level):
    path = os.path.join(data_dir, "properties.jsonl")
    try:
        lines = open(path).read().splitlines()
    except OSError as e:
        raise ValidationError(f"cannot read {path}: {e}", code="bad_input")
    arrays = []
    for line in lines:
        rec = json.loads(line)
        if rec["level"] != level:
            continue
        if level == "loop":
            rows = [
                [vq.SEP_CLASS, vq.SEP_CLASS] if t == hxt.SEP else t
                for t in rec["tokens"]
            ]
        else:
            rows = rec["tokens"]
        arrays.append(np.asarray(rows, dtype=np.int64))
    if not arrays:
        raise ValidationError(f"no {level} properties in {path}", code="bad_input")
    return arrays


@cli.command("train-codebook")
@click.option("--level", type=click.Choice(["loop", "profile", "solid"]), required=True)
@click.option("--data", type=click.Path(), default=None, help="Dataset directory.")
@click.option("--k", type=int, default=None, help="Codebook size (level default if unset).")
@click.option("--steps", default=2000, show_default=True)
@click.option("--batch-size", default=64, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--lr", default=0.001, show_default=True)
@click.option("--warmup", default=2000, show_default=True)
@click.option("--out", type=click.Path(), default=None, help="Checkpoint directory.")
@net_options
@from_manifest_option
def train_codebook(level, data, k, steps, batch_size, seed, lr, warmup, out,
                   d_model, d_ff, heads, dropout, n_layers, from_manifest):
    """Train one level's VQ-VAE on extracted properties."""
    params = resolve_params(from_manifest, "train-codebook", {
        "level": level, "data": data or os.path.join(data_dir_default(), "dataset"),
        "k": k, "steps": steps, "batch_size": batch_size, "seed": seed,
        "lr": lr, "warmup": warmup,
        "out": out or os.path.join(data_dir_default(), "checkpoints"),
        "d_model": d_model, "d_ff": d_ff, "heads": heads,
        "dropout": dropout, "n_layers": n_layers,
    })
    check_lock(params["out"])
    items = _level_arrays(params["data"], params["level"])
    model, history = vq.train_vqvae(
        items, params["level"], k=params["k"], steps=params["steps"],
        batch_size=params["batch_size"], seed=params["seed"], lr=params["lr"],
        warmup=params["warmup"], config=block_config(params), log_every=200,
    )
    os.makedirs(params["out"], exist_ok=True)
    vq.save_vqvae(os.path.join(params["out"], f"vqvae_{params['level']}.ckpt"), model)
    write_manifest(params["out"], "train-codebook", params)
    click.echo(json.dumps({"level": params["level"], "final_loss": history[-1]}))


@cli.command("encode-codes")
@click.option("--data", type=click.Path(), default=None, help="Dataset directory.")
@click.option("--ckpt", type=click.Path(), default=None, help="Checkpoint directory.")
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@from_manifest_option
def encode_codes(data, ckpt, out, from_manifest):
    """Assign every retained model its ground-truth code tree."""
    params = resolve_params(from_manifest, "encode-codes", {
        "data": data or os.path.join(data_dir_default(), "dataset"),
        "ckpt": ckpt or os.path.join(data_dir_default(), "checkpoints"),
        "out": out or os.path.join(data_dir_default(), "checkpoints"),
    })
    vqvaes = _load_vqvaes(params["ckpt"])
    models = [cm.model_from_json(d)
              for d in load_json(os.path.join(params["data"], "models.json"))]
    casc = cs.Cascade(vqvaes, config=vqvaes["loop"].config).eval()
    records = []
    level_items = {lv: ([], []) for lv in ("loop", "profile", "solid")}
    for model in models:
        tree = casc.code_tree_for(model)
        mid = str(cm.hash_model(cm.tokenize_model(model)))
        records.append({"model_id": mid, "codes": cs.code_tree_to_json(tree)})
        solid_arr = vq.tokenize_level(hxt.extract_solid_property(model))
        level_items["solid"][0].append(solid_arr)
        level_items["solid"][1].append(tree.solid)
        for step, (p_code, l_codes) in zip(model.steps, tree.steps):
            level_items["profile"][0].append(
                vq.tokenize_level(hxt.extract_profile_property(step.loops)))
            level_items["profile"][1].append(p_code)
            for lp, lc in zip(step.loops, l_codes):
                level_items["loop"][0].append(
                    vq.tokenize_level(hxt.extract_loop_property(lp)))
                level_items["loop"][1].append(lc)
    os.makedirs(params["out"], exist_ok=True)
    write_json(os.path.join(params["out"], "codes.json"), records)
    for lv, (items, codes) in level_items.items():
        write_json(os.path.join(params["out"], f"clusters_{lv}.json"),
                   vq.cluster_export(items, codes))
    write_manifest(params["out"], "encode-codes", params)
    click.echo(json.dumps({"models": len(records)}))


def _load_vqvaes(ckpt_dir):
    vqvaes = {}
    for lv in ("loop", "profile", "solid"):
        path = os.path.join(ckpt_dir, f"vqvae_{lv}.ckpt")
        if not os.path.exists(path):
            raise ValidationError(f"missing checkpoint {path}", code="bad_input")
        vqvaes[lv] = vq.load_vqvae(path)
    return vqvaes


@cli.command("train-generator")
@click.option("--data", type=click.Path(), default=None, help="Dataset directory.")
@click.option("--ckpt", type=click.Path(), default=None, help="VQ-VAE checkpoint directory.")
@click.option("--steps", default=3000, show_default=True)
@click.option("--batch-size", default=16, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--lr", default=0.001, show_default=True)
@click.option("--warmup", default=2000, show_default=True)
@click.option("--out", type=click.Path(), default=None, help="Model directory.")
@net_options
@from_manifest_option
def train_generator(data, ckpt, steps, batch_size, seed, lr, warmup, out,
                    d_model, d_ff, heads, dropout, n_layers, from_manifest):
    """Stage 2: train encoder and both generators over frozen codebooks."""
    params = resolve_params(from_manifest, "train-generator", {
        "data": data or os.path.join(data_dir_default(), "dataset"),
        "ckpt": ckpt or os.path.join(data_dir_default(), "checkpoints"),
        "steps": steps, "batch_size": batch_size, "seed": seed,
        "lr": lr, "warmup": warmup,
        "out": out or os.path.join(data_dir_default(), "checkpoints"),
        "d_model": d_model, "d_ff": d_ff, "heads": heads,
        "dropout": dropout, "n_layers": n_layers,
    })
    check_lock(params["out"])
    vqvaes = _load_vqvaes(params["ckpt"])
    models = [cm.model_from_json(d)
              for d in load_json(os.path.join(params["data"], "models.json"))]
    casc, history = cs.train_cascade(
        models, vqvaes, steps=params["steps"], batch_size=params["batch_size"],
        seed=params["seed"], lr=params["lr"], warmup=params["warmup"],
        config=block_config(params), log_every=200,
    )
    cs.save_cascade(params["out"], casc)
    # registry for /model/{id} and /mesh/{id}
    write_json(os.path.join(params["out"], "models.json"),
               [cm.model_to_json(m) for m in models])
    write_manifest(params["out"], "train-generator", params)
    click.echo(json.dumps({"final_loss": history[-1]}))


# ---------------------------------------------------------------------------
# generation


def _generation_outputs(seqs, trees):
    models, codes, dropped = [], [], 0
    for s, t in zip(seqs, trees):
        try:
            models.append(cm.model_to_json(cm.detokenize_model(s)))
            codes.append(cs.code_tree_to_json(t))
        except CadError:
            dropped += 1
    return {"models": models, "codes": codes, "dropped": dropped}


@cli.command()
@click.option("--model-dir", type=click.Path(), default=None)
@click.option("--n", default=1, show_default=True)
@click.option("--p", default=0.9, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None, help="Output directory.")
@from_manifest_option
def sample(model_dir, n, p, seed, out, from_manifest):
    """Unconditional nucleus sampling through the cascade."""
    params = resolve_params(from_manifest, "sample", {
        "model_dir": model_dir or os.path.join(data_dir_default(), "checkpoints"),
        "n": n, "p": p, "seed": seed,
        "out": out or os.path.join(data_dir_default(), "samples"),
    })
    casc = cs.load_cascade(params["model_dir"])
    rng = np.random.default_rng(params["seed"])
    seqs, trees, overflow = casc.sample_unconditional(params["n"], params["p"], rng)
    result = _generation_outputs(
        [s for s, ov in zip(seqs, overflow) if not ov],
        [t for t, ov in zip(trees, overflow) if not ov],
    )
    result["dropped"] += sum(overflow)
    os.makedirs(params["out"], exist_ok=True)
    write_json(os.path.join(params["out"], "samples.json"), result)
    write_manifest(params["out"], "sample", params)
    click.echo(json.dumps({"models": len(result["models"]), "dropped": result["dropped"]}))


@cli.command()
@click.option("--model-dir", type=click.Path(), default=None)
@click.option("--partial", "partial_path", type=click.Path(exists=True), required=True)
@click.option("--n", default=5, show_default=True)
@click.option("--p", default=0.9, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", type=click.Path(), default=None)
@from_manifest_option
def autocomplete(model_dir, partial_path, n, p, seed, out, from_manifest):
    """Complete a partial model into n full variants."""
    params = resolve_params(from_manifest, "autocomplete", {
        "model_dir": model_dir or os.path.join(data_dir_default(), "checkpoints"),
        "partial": partial_path, "n": n, "p": p, "seed": seed,
        "out": out or os.path.join(data_dir_default(), "samples"),
    })
    casc = cs.load_cascade(params["model_dir"])
    partial = cm.model_from_json(load_json(params["partial"]))
    rng = np.random.default_rng(params["seed"])
    models, trees, dropped = casc.autocomplete(partial, params["n"], params["p"], rng)
    result = {
        "models": [cm.model_to_json(m) for m in models],
        "codes": [cs.code_tree_to_json(t) for t in trees],
        "dropped": dropped,
    }
    os.makedirs(params["out"], exist_ok=True)
    write_json(os.path.join(params["out"], "autocomplete.json"), result)
    write_manifest(params["out"], "autocomplete", params)
    click.echo(json.dumps({"models": len(models), "dropped": dropped}))


@cli.command()
@click.option("--model-dir", type=click.Path(), default=None)
@click.option("--codes", "codes_path", type=click.Path(exists=True), required=True)
@click.option("--slot-path", required=True,
              help="Comma-separated slot path, e.g. 'loop,0,1' or 'solid'.")
@click.option("--level", type=click.Choice(["loop", "profile", "solid"]), required=True)
@click.option("--new-code", type=int, required=True)
@click.option("--out", type=click.Path(), default=None, help="Write edited codes here.")
@from_manifest_option
def edit(model_dir, codes_path, slot_path, level, new_code, out, from_manifest):
    """Replace one code-tree slot; prints the edited tree."""
    params = resolve_params(from_manifest, "edit", {
        "model_dir": model_dir or os.path.join(data_dir_default(), "checkpoints"),
        "codes": codes_path, "slot_path": slot_path, "level": level,
        "new_code": new_code, "out": out,
    })
    vqvaes = _load_vqvaes(params["model_dir"])
    vocab = cs.CodeVocab(*(vqvaes[lv].codebook.k for lv in ("loop", "profile", "solid")))
    tree = cs.code_tree_from_json(load_json(params["codes"]))
    parts = params["slot_path"].split(",")
    path = (parts[0], *map(int, parts[1:]))
    edited = cs.edit_code_tree(tree, path, params["level"], params["new_code"], vocab)
    doc = cs.code_tree_to_json(edited)
    if params["out"]:
        os.makedirs(os.path.dirname(params["out"]) or ".", exist_ok=True)
        write_json(params["out"], doc)
        write_manifest(os.path.dirname(params["out"]) or ".", "edit", params)
    click.echo(json.dumps(doc, sort_keys=True))


# ---------------------------------------------------------------------------
# evaluation and export


def _load_clouds(dirpath, n_points, seed):
    rng = np.random.default_rng(seed)
    clouds = []
    try:
        names = sorted(os.listdir(dirpath))
    except OSError as e:
        raise ValidationError(f"cannot list {dirpath}: {e}", code="bad_input")
    for name in names:
        path = os.path.join(dirpath, name)
        if name.endswith(".xyz"):
            clouds.append(np.loadtxt(path, dtype=np.float64).reshape(-1, 3))
        elif name.endswith(".json"):
            model = cm.model_from_json(load_json(path))
            grid = geometry.execute_model(model)
            clouds.append(geometry.sample_surface(grid, n_points, rng))
    if not clouds:
        raise ValidationError(f"no .xyz or .json clouds in {dirpath}", code="bad_input")
    return clouds


@cli.command()
@click.option("--gen", "gen_dir", type=click.Path(exists=True), required=True)
@click.option("--gt", "gt_dir", type=click.Path(exists=True), required=True)
@click.option("--points", default=256, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--jsd-resolution", default=32, show_default=True)
@click.option("--out", type=click.Path(), default=None)
@from_manifest_option
def evaluate(gen_dir, gt_dir, points, seed, jsd_resolution, out, from_manifest):
    """Point-cloud metrics between generated and ground-truth sets."""
    params = resolve_params(from_manifest, "evaluate", {
        "gen": gen_dir, "gt": gt_dir, "points": points, "seed": seed,
        "jsd_resolution": jsd_resolution, "out": out,
    })
    gen_clouds = _load_clouds(params["gen"], params["points"], params["seed"])
    gt_clouds = _load_clouds(params["gt"], params["points"], params["seed"] + 1)
    report = metrics.evaluate_sets(
        gen_clouds, gt_clouds,
        jsd_resolution=params["jsd_resolution"],
        n_points=params["points"], seed=params["seed"],
    )
    if params["out"]:
        os.makedirs(params["out"], exist_ok=True)
        write_json(os.path.join(params["out"], "report.json"), report.to_json())
        write_manifest(params["out"], "evaluate", params)
    click.echo(json.dumps(report.to_json(), sort_keys=True))


@cli.command("export-mesh")
@click.option("--model", "model_path", type=click.Path(exists=True), required=True)
@click.option("--out", type=click.Path(), required=True,
              help="Output path; format from extension (.obj, .xyz, .vox).")
@click.option("--resolution", default=64, show_default=True)
@click.option("--points", default=1024, show_default=True)
@click.option("--seed", default=0, show_default=True)
@from_manifest_option
def export_mesh(model_path, out, resolution, points, seed, from_manifest):
    """Execute a model and export OBJ mesh, XYZ point cloud or raw voxels."""
    params = resolve_params(from_manifest, "export-mesh", {
        "model": model_path, "out": out, "resolution": resolution,
        "points": points, "seed": seed,
    })
    model = cm.model_from_json(load_json(params["model"]))
    out_path = params["out"]
    os.makedirs(os.path.dirname(out_path) or ".", exist_ok=True)
    if out_path.endswith(".obj"):
        mesh = geometry.mesh_model(model)
        with open(out_path, "w") as f:
            f.write(geometry.mesh_to_obj(mesh))
    elif out_path.endswith(".xyz"):
        grid = geometry.execute_model(model, resolution=params["resolution"])
        pts = geometry.sample_surface(
            grid, params["points"], np.random.default_rng(params["seed"]))
        with open(out_path, "w") as f:
            f.write(geometry.pointcloud_to_xyz(pts))
    elif out_path.endswith(".vox"):
        grid = geometry.execute_model(model, resolution=params["resolution"])
        with open(out_path, "wb") as f:
            f.write(geometry.voxelgrid_to_bytes(grid))
    else:
        raise ValidationError(f"unknown export format for {out_path}", code="bad_input")
    write_manifest(os.path.dirname(out_path) or ".", "export-mesh", params)
    click.echo(out_path)


@cli.command()
@click.option("--model-dir", type=click.Path(), default=None)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8642, show_default=True)
def serve(model_dir, host, port):
    """Run the HTTP service; holds a lock on the checkpoint directory."""
    import uvicorn

    from .service import create_app

    model_dir = model_dir or os.path.join(data_dir_default(), "checkpoints")
    lock_path = os.path.join(model_dir, LOCK_NAME)
    os.makedirs(model_dir, exist_ok=True)
    with open(lock_path, "w") as f:
        f.write(str(os.getpid()))
    try:
        uvicorn.run(create_app(model_dir), host=host, port=port, log_level="warning")
    finally:
        if os.path.exists(lock_path):
            os.remove(lock_path)


def main(argv=None):
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        return 1
    except click.exceptions.ClickException as e:
        e.show()
        return 1
    except (ParseError, ValidationError, RangeError) as e:
        click.echo(f"data error: {e}", err=True)
        return 2
    except CadError as e:
        click.echo(f"runtime error: {e}", err=True)
        return 3
    except Exception as e:
        click.echo(f"runtime error: {e}", err=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
