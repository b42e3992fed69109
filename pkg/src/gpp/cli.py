"""Command line entry points: gen, train, validate, plan, evaluate, report.

Every command reads one JSON config (built-in defaults, then ``--config``,
then ``--set section.key=value`` overrides), writes its artifacts with the
resolved config and seed embedded, and records sha256 hashes in the output
directory's ``manifest.json``.  Failures print a JSON error record to stderr
and exit nonzero.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import simkit as sk
from .actor_critic import NetConfig, RiskPreference, default_risk_grid
from .baselines import BehaviorNoise
from .dataset import build_transitions, ensure_dir, read_corpus, scale_corpus, write_sku
from .synthgen import GenConfig, generate_corpus
from .trainer import TrainConfig, load_model, train

log = logging.getLogger("gpp")

# "desk" fits a laptop-sized corpus in minutes; "full" is the long schedule with early stopping.
TRAIN_PROFILES = {
    "desk": {"epochs": 8, "warmup_epochs": 3, "tau": 5e-5, "eta": 30.0, "early_stopping": False},
    "full": {"epochs": 64, "warmup_epochs": 10, "tau": 5e-5, "early_stopping": True},
}

DEFAULTS = {
    "seed": 0,
    # list of [c1, c2, f_ref] triples; null selects the built-in twelve-entry grid
    "risks": None,
    "gen": {},
    "net": {},
    "train": {"profile": "desk"},
    "sim": {"j": 13, "z": 50, "runs": 1, "objectives": [[1.0, 1.0, "ratio1"], [1.0, 5.0, "ratio5"]],
            "checkpoint": "last", "max_graphs": 96, "constraints": None},
}


class CliError(Exception):
    pass


# --------------------------------------------------------------------------
# config handling
# --------------------------------------------------------------------------

def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_set(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise CliError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def load_config(path: str | None, sets: list[str], seed: int | None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from exc
    for item in sets or []:
        keys, value = _parse_set(item)
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise CliError(f"--set {item}: {k} is not a section")
        node[keys[-1]] = value
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def gen_config(cfg: dict) -> GenConfig:
    d = dict(cfg["gen"])
    full = d.pop("full_scale", False)
    d.setdefault("seed", cfg["seed"])
    return GenConfig.full_scale(**d) if full else GenConfig.from_dict(d)


def risk_grid(cfg: dict) -> list[RiskPreference]:
    rows = cfg.get("risks")
    if rows is None:
        return default_risk_grid()
    try:
        grid = [RiskPreference(float(c1), float(c2), float(fr)) for c1, c2, fr in rows]
    except (TypeError, ValueError) as exc:
        raise CliError(f"risks must be a list of [c1, c2, f_ref] triples: {exc}") from exc
    if not grid:
        raise CliError("risks must not be empty")
    return grid


def net_config(cfg: dict) -> NetConfig:
    d = dict(cfg["net"])
    n = len(risk_grid(cfg))
    if d.setdefault("n_lambda", n) != n:
        raise CliError(f"net.n_lambda={d['n_lambda']} but the risk grid has {n} entries")
    return NetConfig.from_dict(d)


def train_config(cfg: dict) -> TrainConfig:
    d = dict(cfg["train"])
    profile = d.pop("profile", "desk")
    if profile not in TRAIN_PROFILES:
        raise CliError(f"unknown training profile {profile!r}")
    merged = dict(TRAIN_PROFILES[profile])
    merged.update(d)
    merged.setdefault("seed", cfg["seed"])
    return TrainConfig.from_dict(merged)


def objectives(cfg: dict) -> list[sk.CostObjective]:
    return [sk.CostObjective(float(a), float(b), str(n)) for a, b, n in cfg["sim"]["objectives"]]


def constraints(cfg: dict) -> sk.ShippingConstraints | None:
    c = cfg["sim"].get("constraints")
    if not c:
        return None
    return sk.ShippingConstraints(**{k: tuple(v) if v is not None else None for k, v in c.items()})


# --------------------------------------------------------------------------
# artifacts
# --------------------------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=False)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_artifact(directory: Path, name: str, text: str) -> Path:
    path = directory / name
    path.write_text(text)
    update_manifest(directory, [path])
    return path


def update_manifest(directory: Path, paths) -> None:
    mpath = directory / "manifest.json"
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {"files": {}}
    for p in paths:
        manifest["files"][Path(p).relative_to(directory).as_posix()] = _sha256(Path(p))
    mpath.write_text(_dump(manifest))


def load_scaled(data_dir: str):
    raw = read_corpus(Path(data_dir) / "skus")
    return scale_corpus(raw)


def run_config(run_dir: Path) -> dict:
    p = run_dir / "run_config.json"
    if not p.exists():
        raise CliError(f"{run_dir} has no run_config.json; run `gpp train` first")
    return json.loads(p.read_text())


def checkpoint_path(run_dir: Path, which: str) -> Path:
    ck = run_dir / "checkpoints"
    files = sorted(ck.glob("epoch_*.ckpt"))
    if not files:
        raise CliError(f"no checkpoints in {ck}")
    if which == "last":
        return files[-1]
    if which == "best":
        meta = json.loads((ck / "training.json").read_text())
        best = meta.get("best_epoch", -1)
        return ck / f"epoch_{best:03d}.ckpt" if best >= 0 else files[-1]
    p = ck / (which if which.endswith(".ckpt") else which + ".ckpt")
    if not p.exists():
        raise CliError(f"checkpoint {p} not found")
    return p


def _model(run_dir: Path, cfg: dict):
    net = NetConfig.from_dict(run_config(run_dir)["net"])
    path = checkpoint_path(run_dir, cfg["sim"]["checkpoint"])
    return net, load_model(path, net), path.name


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen(args, cfg) -> dict:
    gcfg = gen_config(cfg)
    out = ensure_dir(args.out)
    skus_dir = ensure_dir(out / "skus")
    paths = []
    for s in generate_corpus(gcfg):
        p = skus_dir / f"{s.sku}.json"
        write_sku(p, s)
        paths.append(p)
    write_artifact(out, "gen_config.json", _dump({"config": cfg, "gen": gcfg.to_dict(), "seed": gcfg.seed}))
    update_manifest(out, paths)
    return {"skus": len(paths), "out": str(out)}


def cmd_train(args, cfg) -> dict:
    skus = load_scaled(args.data)
    net, tcfg = net_config(cfg), train_config(cfg)
    tr_set = build_transitions(skus, "train", net.k)
    va_set = build_transitions(skus, "val", net.k)
    run = ensure_dir(args.run)
    risks = risk_grid(cfg)
    write_artifact(run, "run_config.json", _dump({"config": cfg, "net": net.to_dict(), "train": tcfg.to_dict(),
                                                  "risks": [asdict(r) for r in risks],
                                                  "seed": tcfg.seed, "data": str(args.data)}))
    ck = run / "checkpoints"
    res = train(tr_set, net, tcfg, va_set, ck, risks=risks,
                progress=lambda h: log.info("epoch %s td=%.5f val=%.5f", h["epoch"], h["td_loss"], h["val_td_loss"]))
    update_manifest(run, [ck / c for c in res.checkpoints] + [ck / "training.json"])
    return {"epochs": res.stopped_epoch + 1, "transitions": len(tr_set), "checkpoint": res.checkpoints[-1]}


def _risk_rows(run: Path) -> list[dict]:
    rows = run_config(run).get("risks")
    return rows if rows is not None else [asdict(r) for r in default_risk_grid()]


def cmd_validate(args, cfg) -> dict:
    run = Path(args.run)
    skus = load_scaled(args.data)
    net, model, ck = _model(run, cfg)
    objs = objectives(cfg)
    sim = cfg["sim"]
    res = sk.validate(skus, model.actor, net, objs, sim["j"], sim["z"], cfg["seed"], max_graphs=sim["max_graphs"])
    risks = _risk_rows(run)
    doc = {
        "config": cfg, "seed": cfg["seed"], "checkpoint": ck, "validation_loss": res.loss,
        "risks": risks,
        "objectives": [{"name": o.label, "c_es": o.c_es, "c_oos": o.c_oos, "lambda_star": lam,
                        "risk": risks[lam], "avg_cost": res.avg_cost[i].tolist()}
                       for i, (o, lam) in enumerate(zip(objs, res.lambda_star))],
        "costs": res.costs.tolist(),
    }
    write_artifact(run, "validation.json", _dump(doc))
    for o in doc["objectives"]:
        print(f"{o['name']}: lambda*={o['lambda_star']} f_ref={o['risk']['f_ref']} "
              f"c1={o['risk']['c1']} c2={o['risk']['c2']}")
    return {"validation_loss": res.loss, "lambda_star": res.lambda_star}


def _selected(run: Path) -> dict:
    p = run / "validation.json"
    if not p.exists():
        raise CliError(f"{p} missing; run `gpp validate` first")
    return {o["name"]: o["lambda_star"] for o in json.loads(p.read_text())["objectives"]}


def cmd_plan(args, cfg) -> dict:
    run = Path(args.run)
    skus = {s.sku: s for s in load_scaled(args.data)}
    if args.sku not in skus:
        raise CliError(f"unknown SKU {args.sku!r}")
    sku = skus[args.sku]
    if not 0 <= args.week < sku.weeks:
        raise CliError(f"week {args.week} outside 0..{sku.weeks - 1}")
    net, model, ck = _model(run, cfg)
    objs = {o.label: o for o in objectives(cfg)}
    obj = objs.get(args.objective) or next(iter(objs.values()))
    sim = cfg["sim"]
    res = sk.plan(sku, args.week, model.actor, net, obj, sim["j"], sim["z"],
                  rng=np.random.default_rng([cfg["seed"], args.week]), max_graphs=sim["max_graphs"])
    topo = sku.topology_at(args.week)
    lam = res.selected
    plan_rows = [{"interval": j, "src": sku.node_ids[int(topo.src[e])], "dst": sku.node_ids[int(topo.dst[e])],
                  "mot": sku.mot_names[m], "qty": float(res.plan[lam, j, e, m] * sku.scale)}
                 for j in range(res.plan.shape[1]) for e in range(topo.n_edges) for m in range(topo.mot_count)
                 if res.plan[lam, j, e, m] > 0]
    doc = {"config": cfg, "seed": cfg["seed"], "checkpoint": ck, "sku": sku.sku, "week": args.week,
           "objective": obj.label, "avg_cost": res.avg_cost.tolist(), "lambda_star": lam,
           "risk": _risk_rows(run)[lam], "plan": plan_rows}
    out = ensure_dir(args.out) if args.out else run
    write_artifact(out, f"plan_{sku.sku}_w{args.week:03d}.json", _dump(doc))
    return {"lambda_star": lam, "shipments": len(plan_rows)}


def _eval_doc(r: sk.EvalResult) -> dict:
    return {"name": r.name, "es": r.es.tolist(), "oos": r.oos.tolist(),
            "cost": {k: v.tolist() for k, v in r.cost.items()}, "histogram": r.histogram.tolist(),
            "conservation_error": r.conservation_error}


def cmd_evaluate(args, cfg) -> dict:
    run = Path(args.run)
    skus = load_scaled(args.data)
    net, model, ck = _model(run, cfg)
    sim = cfg["sim"]
    objs = objectives(cfg)
    stars = _selected(run)
    cons = constraints(cfg)
    kw = dict(split=args.split, steps=sim["j"], runs=sim["runs"], seed=cfg["seed"], objectives=objs, constraints=cons)
    results = {"historical": sk.historical(skus, args.split, sim["j"], objs)}
    results["rule"] = sk.evaluate(skus, sk.rule_factory(), name="rule", **kw)
    results["behavioral"] = sk.evaluate(skus, sk.rule_factory(BehaviorNoise()), name="behavioral", **kw)
    done: dict[int, sk.EvalResult] = {}
    for o in objs:
        lam = stars[o.label]
        if lam not in done:
            done[lam] = sk.evaluate(skus, sk.gpp_factory(model.actor, net, lam, sim["z"], max_graphs=sim["max_graphs"]),
                                    name=f"gpp_lambda{lam}", **kw)
        results[f"gpp_{o.label}"] = done[lam]
    doc = {"config": cfg, "seed": cfg["seed"], "checkpoint": ck, "split": args.split,
           "lambda_star": stars, "hist_edges": sk.HIST_EDGES.tolist(),
           "objectives": [{"name": o.label, "c_es": o.c_es, "c_oos": o.c_oos} for o in objs],
           "results": {k: _eval_doc(v) for k, v in results.items()}}
    write_artifact(run, "evaluation.json", _dump(doc))
    return {k: {o.label: float(v.cost[o.label][:, -1].mean()) for o in objs} for k, v in results.items()}


def _load_eval(doc: dict) -> dict[str, sk.EvalResult]:
    return {k: sk.EvalResult(v["name"], np.array(v["es"]), np.array(v["oos"]),
                             {c: np.array(x) for c, x in v["cost"].items()}, np.array(v["histogram"]),
                             v["conservation_error"])
            for k, v in doc["results"].items()}


def build_report(ev_doc: dict, val_doc: dict | None) -> tuple[dict, str]:
    res = _load_eval(ev_doc)
    objs = [sk.CostObjective(o["c_es"], o["c_oos"], o["name"]) for o in ev_doc["objectives"]]
    base = res["historical"]
    tables = {}
    rows = []
    for o in objs:
        tables[o.label] = {}
        for name, r in res.items():
            if name.startswith("gpp_") and name != f"gpp_{o.label}":
                continue
            t = sk.percent_table(r, base, o)
            tables[o.label][name] = t
            for j in range(len(t["cost"]["mean"])):
                rows.append([o.label, name, j + 1] + [t[m][s][j] for m in ("es", "oos", "cost") for s in ("mean", "sd")])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["objective", "policy", "timestep", "pct_es_mean", "pct_es_sd", "pct_oos_mean", "pct_oos_sd",
                "pct_cost_mean", "pct_cost_sd"])
    for r in rows:
        w.writerow([("undefined" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)) for v in r])
    doc = {"config": ev_doc["config"], "seed": ev_doc["seed"], "checkpoint": ev_doc["checkpoint"],
           "lambda_star": ev_doc["lambda_star"], "percent": tables,
           "histograms": {"edges": ev_doc["hist_edges"], "counts": {k: v.histogram.tolist() for k, v in res.items()}},
           "avg_cost_per_lambda": None if val_doc is None else
           {o["name"]: o["avg_cost"] for o in val_doc["objectives"]},
           "validation_loss": None if val_doc is None else val_doc["validation_loss"]}
    return doc, buf.getvalue()


def cmd_report(args, cfg) -> dict:
    run = Path(args.run)
    p = run / "evaluation.json"
    if not p.exists():
        raise CliError(f"{p} missing; run `gpp evaluate` first")
    ev = json.loads(p.read_text())
    vp = run / "validation.json"
    doc, text = build_report(ev, json.loads(vp.read_text()) if vp.exists() else None)
    write_artifact(run, "report.csv", text)
    write_artifact(run, "report.json", _dump(doc))
    summary = {}
    for o, per in doc["percent"].items():
        g = per.get(f"gpp_{o}")
        if g is not None:
            summary[o] = {"pct_cost_t13": g["cost"]["mean"][-1], "pct_oos_t13": g["oos"]["mean"][-1],
                          "rule_pct_oos_t13": per["rule"]["oos"]["mean"][-1]}
    return summary


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gpp", description="Graph-based supply planning toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config entry (value parsed as JSON when possible)")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("gen", help="generate a synthetic corpus")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen)

    sp = sub.add_parser("train", help="train actor and critic offline")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("validate", help="select a risk preference per objective")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", required=True)
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("plan", help="Monte-Carlo action plan for one SKU and week")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--sku", required=True)
    sp.add_argument("--week", type=int, required=True)
    sp.add_argument("--objective", default="ratio1")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("evaluate", help="receding-horizon evaluation against baselines")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="percentage tables and histograms")
    common(sp)
    sp.add_argument("--run", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        summary = args.func(args, cfg)
    except Exception as exc:  # reported as a machine-readable record
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        if args.verbose:
            record["traceback"] = traceback.format_exc()
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 2 if isinstance(exc, CliError) else 1
    print(json.dumps({"command": args.command, "ok": True, "summary": summary}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
