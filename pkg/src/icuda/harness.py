"""Command line orchestration.

Subcommands: gen writes datasets with a manifest, run executes the reference
algorithms and reports held-out accuracy, verify builds the transformer
weights and checks them against the oracles with certificate bounds,
describe prints the structural summary of a built transformer.

Reports are deterministic functions of (config, seeds); wall-clock timings
live in a separate subtree so everything else is byte-for-byte reproducible.
Held-out labels stay inside this module: algorithm code receives DomainPair,
which does not carry them.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import uda_ref as ur
from .build_dann import build_dann_transformer, verify_dann
from .build_iwl import (
    SOUNDNESS_CHECKS,
    IwlBuildConfig,
    build_iwl_transformer,
    verify_iwl,
)
from .build_select import IcudaBuildConfig, build_icuda_transformer, verify_icuda
from .datagen import (
    ShiftGaussConfig,
    TwoMoonConfig,
    gen_shifted_gaussians,
    gen_two_moon,
    save_csv,
    true_ratio,
)
from .tfcore import describe, tf_norm

GENERATORS = ("shift1d", "shift2d", "two_moon")
ALGOS = ("iwl", "dann", "icuda")


@dataclasses.dataclass
class ExperimentConfig:
    generator: str = "shift1d"
    algo: str = "icuda"
    seeds: list = dataclasses.field(default_factory=lambda: [0])
    gen_params: dict = dataclasses.field(default_factory=dict)
    hyper: dict = dataclasses.field(default_factory=dict)
    build_params: dict = dataclasses.field(default_factory=dict)
    tolerances: dict = dataclasses.field(default_factory=dict)
    out_dir: str = "runs"

    def validate(self) -> None:
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.algo not in ALGOS:
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        for k, v in self.tolerances.items():
            if not v > 0:
                raise ValueError(f"tolerance {k!r} must be positive")


def load_config(path: str | None, overrides: dict) -> ExperimentConfig:
    data = {}
    if path is not None:
        with open(path) as fh:
            data = json.load(fh)
    data.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    bad = set(data) - known
    if bad:
        raise ValueError(f"unknown config keys: {sorted(bad)}")
    cfg = ExperimentConfig(**data)
    cfg.validate()
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def selector_config(cfg: ExperimentConfig, seed: int) -> ur.SelectorConfig:
    known = {f.name for f in dataclasses.fields(ur.SelectorConfig)}
    fields = {k: v for k, v in cfg.hyper.items() if k in known}
    bad = set(cfg.hyper) - known - {"a"}
    if bad:
        raise ValueError(f"unknown hyperparameters: {sorted(bad)}")
    fields["seed"] = seed
    return ur.SelectorConfig(**fields)


def make_pair(cfg: ExperimentConfig, seed: int):
    p = dict(cfg.gen_params)
    if cfg.generator == "two_moon":
        return gen_two_moon(TwoMoonConfig(seed=seed, **p))
    d = 1 if cfg.generator == "shift1d" else 2
    return gen_shifted_gaussians(ShiftGaussConfig(d=d, seed=seed, **p))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    return obj


def _write_json(path: str, payload: dict) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, sort_keys=True, indent=2)
        fh.write("\n")


def _accuracy(scores: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean((np.asarray(scores) >= 0.5) == (labels >= 0.5)))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(cfg: ExperimentConfig) -> int:
    files = {}
    for seed in cfg.seeds:
        pair = make_pair(cfg, seed)
        name = f"{cfg.generator}_seed{seed}.csv"
        path = os.path.join(cfg.out_dir, name)
        os.makedirs(cfg.out_dir, exist_ok=True)
        save_csv(pair, path)
        files[str(seed)] = name
        if cfg.generator.startswith("shift"):
            d = 1 if cfg.generator == "shift1d" else 2
            gc = ShiftGaussConfig(d=d, seed=seed, **cfg.gen_params)
            X = np.concatenate([pair.source_x, pair.target_x, pair.query_x])
            side = os.path.join(cfg.out_dir, name.replace(".csv", "_ratio.csv"))
            with open(side, "w") as fh:
                fh.write(",".join(f"x_{i + 1}" for i in range(d)) + ",ratio\n")
                for row, r in zip(X, true_ratio(gc, X)):
                    cells = [repr(float(v)) for v in row] + [repr(float(r))]
                    fh.write(",".join(cells) + "\n")
            files[str(seed) + "_ratio"] = os.path.basename(side)
    manifest = {
        "config": dataclasses.asdict(cfg),
        "config_hash": config_hash(cfg),
        "files": files,
    }
    _write_json(os.path.join(cfg.out_dir, "manifest.json"), manifest)
    print(f"wrote {len(files)} files to {cfg.out_dir}")
    return 0


def _run_one(cfg: ExperimentConfig, seed: int) -> dict:
    pair = make_pair(cfg, seed)
    scfg = selector_config(cfg, seed)
    query = pair.query_x[0]
    rec = {"seed": seed}
    if cfg.algo == "iwl":
        pred, aux = ur.iwl_pipeline(pair, scfg, query)
        scores = aux["fmap"](pair.eval_x) @ aux["W"][-1]
        rec.update(prediction=pred, accuracy=_accuracy(scores, pair.eval_y))
    elif cfg.algo == "dann":
        pred, aux = ur.dann_pipeline(pair, scfg, query)
        scores = ur.logistic(
            ur.dann_predict(aux["trace"][-1], pair.eval_x, scfg.activation))
        rec.update(prediction=pred, accuracy=_accuracy(scores, pair.eval_y))
    else:
        res = ur.icuda_predict(pair, scfg)
        if res.choice == "iwl":
            aux = res.aux["iwl"]
            scores = aux["fmap"](pair.eval_x) @ aux["W"][-1]
        else:
            aux = res.aux["dann"]
            scores = ur.logistic(
                ur.dann_predict(aux["trace"][-1], pair.eval_x,
                                scfg.activation))
        rec.update(prediction=res.prediction, choice=res.choice, q=res.q,
                   accuracy=_accuracy(scores, pair.eval_y))
    return rec


def cmd_run(cfg: ExperimentConfig) -> int:
    t0 = time.time()
    records = [_run_one(cfg, seed) for seed in sorted(cfg.seeds)]
    accs = np.array([r["accuracy"] for r in records])
    report = {
        "algo": cfg.algo,
        "config_hash": config_hash(cfg),
        "records": records,
        "accuracy_mean": float(np.mean(accs)),
        "accuracy_std": float(np.std(accs)),
        "timing": {"seconds": time.time() - t0},
    }
    path = os.path.join(cfg.out_dir, f"run_{cfg.algo}.json")
    _write_json(path, report)
    csv_path = os.path.join(cfg.out_dir, f"run_{cfg.algo}.csv")
    with open(csv_path, "w") as fh:
        fh.write("seed,algo,accuracy\n")
        for r in records:
            fh.write(f"{r['seed']},{cfg.algo},{repr(r['accuracy'])}\n")
    print(f"{cfg.algo}: accuracy {report['accuracy_mean']:.3f}"
          f" +/- {report['accuracy_std']:.3f} over {len(records)} seeds")
    return 0


def _iwl_build_config(cfg: ExperimentConfig, scfg: ur.SelectorConfig,
                      d: int) -> IwlBuildConfig:
    pinned = {"d", "J", "lam", "eta1", "L1", "eta2", "L2", "seed"}
    known = {f.name for f in dataclasses.fields(IwlBuildConfig)} - pinned
    extra = {k: v for k, v in cfg.build_params.items() if k in known}
    return IwlBuildConfig(
        d=d, J=scfg.J, lam=scfg.lam, eta1=scfg.eta1, L1=scfg.L1,
        eta2=scfg.eta2, L2=scfg.L2, seed=scfg.seed, **extra)


def _icuda_build_config(cfg: ExperimentConfig,
                        scfg: ur.SelectorConfig) -> IcudaBuildConfig:
    known = {f.name for f in dataclasses.fields(IcudaBuildConfig)} - {"sel"}
    extra = {k: v for k, v in cfg.build_params.items() if k in known}
    if "a" in cfg.hyper:
        extra["a"] = cfg.hyper["a"]
    return IcudaBuildConfig(sel=scfg, **extra)


def _verify_one(cfg: ExperimentConfig, seed: int) -> dict:
    pair = make_pair(cfg, seed)
    scfg = selector_config(cfg, seed)
    stage = "construction"
    try:
        if cfg.algo == "iwl":
            build = build_iwl_transformer(
                pair, _iwl_build_config(cfg, scfg, pair.d))
            stage = "verification"
            cert = verify_iwl(build, pair)
            ok = (cert.measured_vs_reference <= cert.bound
                  and all(cert.hypothesis_checks[k] for k in SOUNDNESS_CHECKS))
            rec = {
                "seed": seed,
                "oracle": cert.prediction_ref,
                "transformer": cert.prediction_tf,
                "bound": cert.bound,
                "gap": cert.measured_vs_reference,
                "hypothesis": cert.hypothesis_checks,
                "tf_norm": tf_norm(build.tf),
                "pass": bool(ok),
            }
        elif cfg.algo == "dann":
            build = build_dann_transformer(
                pair, _icuda_build_config(cfg, scfg).dann_config(pair.d))
            stage = "verification"
            cert = verify_dann(build, pair)
            failed = [k for k, v in cert.checks.items()
                      if isinstance(v, (bool, np.bool_)) and not v]
            ok = (cert.final_gap <= cert.cumulative
                  and all(r.ok for r in cert.rows) and not failed)
            rec = {
                "failed_checks": failed,
                "seed": seed,
                "oracle": cert.prediction_ref,
                "transformer": cert.prediction_tf,
                "bound": cert.cumulative,
                "gap": cert.final_gap,
                "steps": [dataclasses.asdict(r) for r in cert.rows],
                "tf_norm": tf_norm(build.tf),
                "pass": bool(ok),
            }
        else:
            build = build_icuda_transformer(
                pair, _icuda_build_config(cfg, scfg))
            stage = "verification"
            rep = verify_icuda(build, pair)
            failed = [k for k, v in rep.checks.items()
                      if isinstance(v, (bool, np.bool_)) and not v]
            ok = (rep.agreement and rep.margin_certified
                  and rep.within_branch_bound and not failed)
            rec = {
                "failed_checks": failed,
                "seed": seed,
                "oracle": rep.prediction_oracle,
                "transformer": rep.prediction_tf,
                "bound": rep.branch_bound,
                "gap": rep.branch_gap,
                "choice": rep.choice_tf,
                "choice_oracle": rep.choice_oracle,
                "q": rep.q_tf,
                "q_bracket": [rep.q_lo, rep.q_hi],
                "tf_norm": tf_norm(build.tf),
                "pass": bool(ok),
            }
    except Exception as e:
        return {"seed": seed, "pass": False, "error": f"{stage}: {e}"}
    return rec


def cmd_verify(cfg: ExperimentConfig) -> int:
    t0 = time.time()
    records = [_verify_one(cfg, seed) for seed in sorted(cfg.seeds)]
    n_pass = sum(1 for r in records if r["pass"])
    report = {
        "algo": cfg.algo,
        "config_hash": config_hash(cfg),
        "records": records,
        "pass_rate": n_pass / len(records),
        "all_pass": bool(n_pass == len(records)),
        "timing": {"seconds": time.time() - t0},
    }
    _write_json(os.path.join(cfg.out_dir, f"verify_{cfg.algo}.json"), report)
    for r in records:
        line = f"seed {r['seed']}: " + ("pass" if r["pass"] else "FAIL")
        if "gap" in r:
            line += f"  gap {r['gap']:.3g} <= bound {r['bound']:.3g}"
        if "error" in r:
            line += f"  ({r['error']})"
        print(line)
    return 0 if report["all_pass"] else 1


def cmd_describe(cfg: ExperimentConfig) -> int:
    seed = cfg.seeds[0]
    pair = make_pair(cfg, seed)
    scfg = selector_config(cfg, seed)
    if cfg.algo == "iwl":
        tf = build_iwl_transformer(pair, _iwl_build_config(cfg, scfg, pair.d)).tf
    elif cfg.algo == "dann":
        tf = build_dann_transformer(
            pair, _icuda_build_config(cfg, scfg).dann_config(pair.d)).tf
    else:
        tf = build_icuda_transformer(pair, _icuda_build_config(cfg, scfg)).tf
    info = describe(tf)
    info["algo"] = cfg.algo
    info["tf_norm"] = tf_norm(tf)
    print(json.dumps(_jsonable(info), sort_keys=True, indent=2))
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="icuda",
        description="domain adaptation references, transformer weight "
                    "constructions, and certificate verification")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in (("gen", cmd_gen), ("run", cmd_run),
                     ("verify", cmd_verify), ("describe", cmd_describe)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="single seed override")
        p.add_argument("--algo", choices=ALGOS, default=None)
        p.add_argument("--out", default=None, help="output directory")
        p.set_defaults(fn=fn)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    overrides = {
        "algo": args.algo,
        "out_dir": args.out,
        "seeds": [args.seed] if args.seed is not None else None,
    }
    try:
        cfg = load_config(args.config, overrides)
    except (ValueError, OSError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    return args.fn(cfg)


if __name__ == "__main__":
    sys.exit(main())
