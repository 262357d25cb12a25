"""Command-line pipelines over the library.

Every command reads a JSON config (defaults apply when omitted), optionally
resumes from a previous command's checkpoint, and writes a checkpoint plus a
report.json into --out. Reports are deterministic for a fixed config and
seed except for the top-level "timestamp" field.

Exit codes: 0 success, 2 configuration/schema, 3 contract/shape, 4 checkpoint
or I/O, 5 divergence, 1 anything unexpected. Failures print one JSON line to
stderr with the error class and message.
"""

import argparse
import datetime
import json
import math
import shlex
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_model, save_model
from .compress import calibrate, magnitude_score, prune, wanda_score
from .config import RunConfig
from .elastic import extract_subnet, heuristic_midpoint
from .errors import (CheckpointError, ConfigurationError, ContractError,
                     DimensionError, DivergenceError, ElsaError)
from .merge import merge_model
from .metrics import EfficiencyReport, bench_model, count_params, markdown_table
from .model import TinyTransformer, TrainConfig, evaluate, train_adapters
from .search import (SearchConfig, cost, evolve, front_csv, front_svg,
                     generations_csv, midpoint_point)

_MODE_BY_MERGE = {"vanilla": "plain", "sparsepeft": "sparsepeft", "qa": "qa"}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating,)):
        x = float(x)
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, frozenset):
        return sorted(_jsonable(v) for v in x)
    return x


def _write_text(path, text):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_report(out_dir, argv, cfg, result):
    report = {
        "command": shlex.join(["elsa"] + list(argv)),
        "config_sha256": cfg.sha256(),
        "result": _jsonable(result),
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    text = json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n"
    _write_text(out_dir / "report.json", text)


def _lineage(argv, cfg):
    return {"command": shlex.join(["elsa"] + list(argv)),
            "config_sha256": cfg.sha256(), "seed": cfg.seed}


def _load_or_build(cfg, checkpoint_path):
    if checkpoint_path:
        model, _ = load_model(checkpoint_path)
        return model
    return TinyTransformer.build(cfg.model_dims(), cfg.seed)


def _save(out_dir, model, argv, cfg, stage):
    out_dir.mkdir(parents=True, exist_ok=True)
    extra = _lineage(argv, cfg)
    extra["stage"] = stage
    save_model(out_dir / "model.ckpt", model, extra=extra)


def _target_layers(model, include_head):
    for lay in model.adapted_layers():
        if lay.layer_id == "head" and not include_head:
            continue
        yield lay


def _layer_sparsity(model):
    return {lay.layer_id: float(np.mean(lay.W.data == 0.0))
            for lay in model.adapted_layers()}


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg, args, argv):
    model = _load_or_build(cfg, args.checkpoint)
    if not model.adapter_tensors():
        supernet = cfg.build_supernet(model.dims)
        model.attach_adapters(supernet, seed=cfg.seed)
    model.adapter_mode = _MODE_BY_MERGE[cfg["merge"]["mode"]]
    task = cfg.make_task()
    tr = cfg["train"]
    hp = TrainConfig(steps=tr["steps"], batch_size=tr["batch_size"], lr=tr["lr"],
                     beta1=tr["beta1"], beta2=tr["beta2"], eps=tr["eps"],
                     seed=cfg.seed, warmup_max_steps=tr["warmup_max_steps"])
    log = train_adapters(model, task, hp)
    val = evaluate(model, task.val_inputs, task.val_targets,
                   batch_size=cfg["eval"]["batch_size"])
    out = Path(args.out)
    _save(out, model, argv, cfg, "train")
    _write_report(out, argv, cfg, {
        "steps": log.steps,
        "final_loss": log.losses[-1] if log.losses else None,
        "val": val,
        "supernet_mode": cfg["supernet"]["mode"],
        "genome_length": model.supernet.genome_length if model.supernet else 0,
        "adapter_mode": model.adapter_mode,
    })
    return 0


def _calibration_inputs(model, task, cfg, layer_ids):
    n = min(cfg["compress"]["calib_sequences"], len(task.train_inputs))
    if n == 0:
        raise ContractError("no calibration sequences available")
    model.start_capture(layer_ids)
    for start in range(0, n, 64):
        model.forward(task.train_inputs[start:start + 64])
    return model.stop_capture()


def cmd_prune(cfg, args, argv):
    model = _load_or_build(cfg, args.checkpoint)
    comp = cfg["compress"]
    layers = list(_target_layers(model, comp["include_head"]))
    task = cfg.make_task()
    calib = None
    if comp["metric"] == "wanda":
        calib = _calibration_inputs(model, task, cfg, {l.layer_id for l in layers})
    rows = []
    for lay in layers:
        before = float(np.mean(lay.W.data == 0.0))
        if comp["metric"] == "wanda":
            scores = wanda_score(lay.W.data, calib[lay.layer_id])
        else:
            scores = magnitude_score(lay.W.data)
        sparse = prune(lay.W.data, scores, comp["sparsity"], comp["granularity"])
        lay.W.data = sparse.Wp
        lay.mask_arr = (sparse.Wp != 0.0).astype(np.float64)
        lay.sparsity_level = comp["sparsity"]
        rows.append({"layer_id": lay.layer_id, "zero_fraction_before": before,
                     "zero_fraction_after": sparse.zero_fraction})
    out = Path(args.out)
    _save(out, model, argv, cfg, "prune")
    _write_report(out, argv, cfg, {
        "metric": comp["metric"], "sparsity": comp["sparsity"],
        "granularity": comp["granularity"], "layers": rows,
    })
    return 0


def cmd_quantize(cfg, args, argv):
    model = _load_or_build(cfg, args.checkpoint)
    comp = cfg["compress"]
    rows = []
    for lay in _target_layers(model, comp["include_head"]):
        qp = calibrate(lay.W.data, comp["bits"])
        lay.qparams = qp
        rows.append({"layer_id": lay.layer_id, "bits": qp.bits,
                     "degenerate_columns": int(qp.degenerate.sum()),
                     "clamped_zero_points": int(qp.zero_clamped.sum())})
    out = Path(args.out)
    _save(out, model, argv, cfg, "quantize")
    _write_report(out, argv, cfg, {"bits": comp["bits"], "layers": rows})
    return 0


def cmd_search(cfg, args, argv):
    model = _load_or_build(cfg, args.checkpoint)
    if model.supernet is None:
        raise ContractError("search needs a checkpoint with an elastic supernet")
    task = cfg.make_task()
    batch = cfg["eval"]["batch_size"]

    def evaluator(genome):
        res = evaluate(model, task.val_inputs, task.val_targets,
                       active=genome, batch_size=batch)
        c = cost(model, genome)
        return {"accuracy": res["accuracy"], "macs": c["macs"],
                "params": c["params"]}

    sc = cfg["search"]
    sh = SearchConfig(pop_size=sc["pop_size"], generations=sc["generations"],
                      seed=cfg.seed, workers=sc["workers"])
    archive = evolve(model.supernet, evaluator, sh)
    front = archive.front()
    mid_pt, mid_genome = midpoint_point(model.supernet, evaluator)
    out = Path(args.out)
    _save(out, model, argv, cfg, "search")
    _write_text(out / "generations.csv", generations_csv(archive))
    _write_text(out / "pareto.csv", front_csv(front))
    _write_text(out / "pareto.svg", front_svg(front, midpoint=mid_pt))
    _write_report(out, argv, cfg, {
        "evaluations": len(archive.cache),
        "front": [{"genome": list(ind.genome), "accuracy": ind.accuracy,
                   "macs": ind.macs, "params": ind.params} for ind in front],
        "midpoint": {"genome": list(mid_genome), "macs": mid_pt[0],
                     "accuracy": mid_pt[1]},
        "hypervolume": [h["hypervolume"] for h in archive.history],
    })
    return 0


def _parse_genome(text, supernet):
    try:
        genome = tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise ConfigurationError(f"genome must be comma-separated integers, got {text!r}")
    supernet.validate(genome)
    return genome


def cmd_extract(cfg, args, argv):
    model = _load_or_build(cfg, args.checkpoint)
    if model.supernet is None:
        raise ContractError("extraction needs a checkpoint with an elastic supernet")
    if args.heuristic and args.genome is not None:
        raise ConfigurationError("--genome and --heuristic are mutually exclusive")
    if args.heuristic:
        genome = heuristic_midpoint(model.supernet)
    elif args.genome is not None:
        genome = _parse_genome(args.genome, model.supernet)
    else:
        raise ConfigurationError("extract needs --genome or --heuristic")
    sub = extract_subnet(model, genome)
    full_cost = cost(model, model.supernet.max_genome())
    sub_cost = cost(model, genome)
    out = Path(args.out)
    _save(out, sub, argv, cfg, "extract")
    _write_report(out, argv, cfg, {
        "genome": list(genome),
        "cost": sub_cost,
        "max_genome_cost": full_cost,
    })
    return 0


def cmd_merge(cfg, args, argv):
    model = _load_or_build(cfg, args.checkpoint)
    mode = args.mode or cfg["merge"]["mode"]
    genome = None
    if args.genome is not None:
        if model.supernet is None:
            raise ContractError("a merge genome needs an elastic supernet")
        genome = _parse_genome(args.genome, model.supernet)
    merged, report = merge_model(model, mode=mode, genome=genome)
    if mode == "sparsepeft":
        # sparsity pattern must survive the merge exactly
        for src, dst in zip(model.adapted_layers(), merged.adapted_layers()):
            if src.mask_arr is not None and np.any(dst.W.data[src.mask_arr == 0.0] != 0.0):
                raise ContractError(
                    f"layer {src.layer_id}: merge escaped the pruned pattern")
    out = Path(args.out)
    _save(out, merged, argv, cfg, "merge")
    _write_report(out, argv, cfg, {
        "merge": report.to_dict(),
        "layer_sparsity": _layer_sparsity(merged),
    })
    return 0


def cmd_eval(cfg, args, argv):
    model, manifest = load_model(args.checkpoint)
    task = cfg.make_task()
    ev = cfg["eval"]
    val = evaluate(model, task.val_inputs, task.val_targets,
                   batch_size=ev["batch_size"])
    counts = count_params(model)
    c = cost(model)
    latency = None
    if ev["bench"]:
        tokens = task.val_inputs[: min(64, len(task.val_inputs))]
        latency = bench_model(model, tokens, repeats=ev["bench_repeats"])
    out = Path(args.out)
    _save(out, model, argv, cfg, "eval")
    report = EfficiencyReport(name="checkpoint", total_params=counts["total"],
                              nonzero_params=counts["nonzero"], macs=c["macs"],
                              latency=latency)
    _write_text(out / "efficiency.md", markdown_table([report]))
    _write_report(out, argv, cfg, {
        "val": val,
        "params": counts,
        "cost": c,
        "layer_sparsity": _layer_sparsity(model),
        "latency": latency,
        "checkpoint_stage": manifest.get("meta", {}).get("stage"),
        "chance": 1.0 / task.vocab,
    })
    return 0


# ---------------------------------------------------------------------------
# argument plumbing


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="elsa",
        description="Elastic low-rank adapters with pruning, quantization, "
                    "merging, and multi-objective subnet search.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_checkpoint=False):
        p.add_argument("--config", default=None,
                       help="JSON config file; defaults apply when omitted")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--checkpoint", required=needs_checkpoint, default=None,
                       help="checkpoint to resume from")

    common(sub.add_parser("train", help="train adapters (static, nls, or lonas)"))
    common(sub.add_parser("prune", help="apply wanda or magnitude pruning"))
    common(sub.add_parser("quantize", help="calibrate per-column quantization"))
    common(sub.add_parser("search", help="multi-objective genome search"),
           needs_checkpoint=True)
    p_ext = sub.add_parser("extract", help="extract a static subnet")
    common(p_ext, needs_checkpoint=True)
    p_ext.add_argument("--genome", default=None, help="comma-separated choices")
    p_ext.add_argument("--heuristic", action="store_true",
                       help="use the midpoint genome")
    p_mrg = sub.add_parser("merge", help="fold adapters into the base weights")
    common(p_mrg, needs_checkpoint=True)
    p_mrg.add_argument("--mode", choices=["vanilla", "sparsepeft", "qa"],
                       default=None, help="override the config merge mode")
    p_mrg.add_argument("--genome", default=None,
                       help="merge an extracted subnet instead of the max genome")
    common(sub.add_parser("eval", help="accuracy, params, MACs, latency"),
           needs_checkpoint=True)
    return parser


_HANDLERS = {"train": cmd_train, "prune": cmd_prune, "quantize": cmd_quantize,
             "search": cmd_search, "extract": cmd_extract, "merge": cmd_merge,
             "eval": cmd_eval}


def _fail(exc, code):
    line = json.dumps({"error": type(exc).__name__, "message": str(exc)})
    print(line, file=sys.stderr)
    return code


def main(argv=None):
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.out is None:
        args.out = f"out/{args.command}"
    try:
        cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
        return _HANDLERS[args.command](cfg, args, argv)
    except ConfigurationError as exc:
        return _fail(exc, 2)
    except (ContractError, DimensionError) as exc:
        return _fail(exc, 3)
    except CheckpointError as exc:
        return _fail(exc, 4)
    except DivergenceError as exc:
        return _fail(exc, 5)
    except OSError as exc:
        return _fail(exc, 4)
    except ElsaError as exc:
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
