"""``ccmia <subcommand> --config FILE [--seed N] [--out DIR]``

Each subcommand writes into ``DIR/<subcommand>/`` plus a ``manifest.json``
listing its inputs, outputs, seeds and wall time. Later stages read only what
earlier stages persisted:

    gen-synth   target/ and shadow/ graph bundles
    partition   partition.csv
    train-fed   global.ckpt, rounds.csv, tap.csv, intercepted.ckpt
    attack-mi   mi_scores.csv, classifier.ckpt, attacker.ckpt, metrics.json
    invert      client_<k>/ bundles, loss_trace_<k>.csv, inversion.csv
    attack-own  ownership.csv, prototypes.ckpt, metrics.json (runs invert first if needed)
    defend      defense_sweep.csv
    report      summary.csv (MI AUC / ownership per run), inversion_summary.csv

The eavesdropper taps uploads while train-fed runs and keeps, per client, the
latest intercepted (global snapshot, upload) pair; that is all the attack
stages ever see of the federation. CCMIA_THREADS caps worker threads.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write_text, read_csv, write_csv
from .defense import tradeoff_sweep
from .eavesdrop import TapTrace, cell_errors, latest_intercepted, tap
from .federated import SERVER_NOTE, FedRun, RoundRecord, Strategy
from .gnn import Gradients, ModelParams, accuracy, gradients_from_tensors, gradients_to_tensors, load_params, \
    save_params
from .graph import BundleError, PropagationMode, SbmParams, gen_sbm, load_bundle, save_bundle
from .inversion import InversionError, Reconstruction
from .partition import PartitionError, edge_cut, load_partition, partition, save_partition
from .pipeline import (ClientInversion, ConfigError, ExperimentConfig, defended_clients, invert_all,
                       membership_attack, ownership_attack, train_federation)
from .prototypes import NoCandidateError
from .tensorio import load_tensors, save_tensors

STAGES = ("gen-synth", "partition", "train-fed", "attack-mi", "invert", "attack-own", "defend", "report")


def workers() -> int:
    try:
        return max(1, int(os.environ.get("CCMIA_THREADS", "1")))
    except ValueError:
        return 1


class Stage:
    """Output directory of one subcommand and its manifest bookkeeping."""

    def __init__(self, name: str, root: Path, cfg: ExperimentConfig | None, argv: dict,
                 dir: Path | None = None):
        self.name = name
        self.root = root
        self.dir = root / name if dir is None else dir
        self.cfg = cfg
        self.argv = argv
        self.outputs: list[Path] = []
        self.inputs: list[Path] = []
        self.seeds: dict[str, int] = {}
        self.t0 = time.perf_counter()
        self.dir.mkdir(parents=True, exist_ok=True)

    def out(self, rel: str) -> Path:
        p = self.dir / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p

    def need(self, stage: str, rel: str = "") -> Path:
        p = self.root / stage / rel if rel else self.root / stage
        if not p.exists():
            raise ConfigError("missing_stage", f"{p} not found; run `ccmia {stage}` first")
        self.inputs.append(p)
        return p

    def finish(self, extra: dict | None = None) -> None:
        def rel(p):
            try:
                return str(p.relative_to(self.root))
            except ValueError:
                return str(p)

        files = []
        for p in self.outputs:
            if p.is_dir():
                files += sorted(rel(q) for q in p.rglob("*") if q.is_file())
            else:
                files.append(rel(p))
        manifest = {
            "stage": self.name,
            "config": None if self.cfg is None else self.cfg.to_dict(),
            "args": self.argv,
            "seed": None if self.cfg is None else self.cfg.seed,
            "seeds": self.seeds,
            "inputs": sorted(rel(p) for p in self.inputs),
            "artifacts": sorted(files),
            "versions": {"ccmia": __version__, "numpy": np.__version__, "python": platform.python_version()},
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
            **(extra or {}),
        }
        atomic_write_text(self.dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------ helpers


def _target(st: Stage):
    cfg = st.cfg
    if "bundle" in cfg.dataset:
        p = cfg.resolve(cfg.dataset["bundle"])
        st.inputs.append(p)
        return load_bundle(p)
    return load_bundle(st.need("gen-synth", "target"))


def _shadow(st: Stage):
    cfg = st.cfg
    if cfg.shadow is None:
        raise ConfigError("missing_key", "membership attack needs a 'shadow' graph")
    if "bundle" in cfg.shadow:
        p = cfg.resolve(cfg.shadow["bundle"])
        st.inputs.append(p)
        return load_bundle(p)
    return load_bundle(st.need("gen-synth", "shadow"))


def _partition(st: Stage, g):
    cfg = st.cfg
    if cfg.partition_file is not None:
        p = cfg.resolve(cfg.partition_file)
        st.inputs.append(p)
        return load_partition(p, g, cfg.k)
    return load_partition(st.need("partition", "partition.csv"), g, cfg.k)


def _save_intercepted(path: Path, trace, records: list[RoundRecord], K: int) -> None:
    tensors, rounds = {}, []
    for k in range(K):
        hit = latest_intercepted(trace, records, k)
        if hit is None:
            rounds.append(-1)
            continue
        snap, up = hit
        rounds.append(int(np.flatnonzero(trace.intercepted[:, k])[-1]))
        tensors.update(gradients_to_tensors(snap.as_gradients(), f"c{k}/snapshot/"))
        tensors.update(gradients_to_tensors(up, f"c{k}/upload/"))
    mode = records[0].snapshot.mode.value if records else PropagationMode.SYM_NORM_ADJ_SELF_LOOPS.value
    save_tensors(path, tensors, {"clients": K, "rounds": rounds, "mode": mode})


def _load_intercepted(path: Path):
    """Rebuild a minimal (trace, run) pair holding only the intercepted rounds."""
    t, meta = load_tensors(path)
    K = int(meta["clients"])
    rounds = [int(r) for r in meta["rounds"]]
    mode = PropagationMode(meta["mode"])
    records = []
    hit = np.zeros((K, K), dtype=bool)
    for k in range(K):
        if rounds[k] < 0:
            continue
        snap = gradients_from_tensors(t, f"c{k}/snapshot/")
        up = gradients_from_tensors(t, f"c{k}/upload/")
        params = ModelParams(snap.W1, snap.b1, snap.W2, snap.b2, mode)
        ups = tuple(up if j == k else Gradients.zeros_like(up) for j in range(K))
        records.append(RoundRecord(rounds[k], ups, params, np.ones(K, dtype=bool)))
        hit[len(records) - 1, k] = True
    hit = hit[:len(records)]
    trace = TapTrace(np.array([r.round for r in records]), hit, np.ones_like(hit), (), np.where(hit, 0, -1))
    return trace, FedRun(None, records, []), rounds


# --------------------------------------------------------------- commands


def cmd_gen_synth(st: Stage) -> None:
    cfg = st.cfg
    made = 0
    for name, src in (("target", cfg.dataset), ("shadow", cfg.shadow)):
        if src is None or "sbm" not in src:
            continue
        seed = cfg.stage_seed(name)
        st.seeds[name] = seed
        g = gen_sbm(SbmParams.from_dict(src["sbm"]), seed)
        save_bundle(g, st.out(name))
        made += 1
    if not made:
        raise ConfigError("missing_key", "gen-synth needs an 'sbm' dataset or shadow block")
    st.finish()


def cmd_partition(st: Stage, args, dest: Path | None = None) -> None:
    cfg = st.cfg
    if args.input:
        p = Path(args.input)
        st.inputs.append(p)
        g = load_bundle(p)
    else:
        g = _target(st)
    k = args.k if args.k is not None else cfg.k
    tol = args.balance_tol if args.balance_tol is not None else cfg.balance_tol
    seed = cfg.stage_seed("partition") if args.part_seed is None else args.part_seed
    st.seeds["partition"] = seed
    part = partition(g, k, tol, seed)
    if dest is None:
        dest = st.out("partition.csv")
    else:
        st.outputs.append(dest)
    save_partition(part, dest)
    st.finish({"edge_cut": edge_cut(g, part), "sizes": part.sizes.tolist()})


def cmd_train_fed(st: Stage) -> None:
    cfg = st.cfg
    g = _target(st)
    part = _partition(st, g)
    clients = defended_clients(cfg, part, cfg.defense_eta)
    transfer = None
    if cfg.fed.strategy is Strategy.FEDDF_SIMPLIFIED:
        transfer = _shadow(st)
    st.seeds.update(fed=cfg.fed_config.seed, tap=cfg.tap_config.seed)
    if math.isfinite(cfg.defense_eta):
        st.seeds.update({f"defense_{k}": cfg.stage_seed("defense", k) for k in range(len(clients))})
    run = train_federation(cfg, clients, transfer)
    save_params(run.params, st.out("global.ckpt"), {"strategy": cfg.fed.strategy.value})
    write_csv(st.out("rounds.csv"), ["round", "client", "loss", "grad_norm"], run.log)

    trace = tap(run.records, cfg.tap_config)
    err = cell_errors(trace, run.records)
    rows = [(int(trace.rounds[t]), k, bool(trace.intercepted[t, k]), float(err[t, k]))
            for t in range(len(trace.rounds)) for k in range(len(clients))]
    write_csv(st.out("tap.csv"), ["round", "client", "intercepted", "est_error"], rows)
    _save_intercepted(st.out("intercepted.ckpt"), trace, run.records, len(clients))
    test_acc = accuracy(run.params, g) if g.test_mask.any() else None
    st.finish({"test_acc": test_acc, "server_note": SERVER_NOTE})


def cmd_attack_mi(st: Stage) -> None:
    cfg = st.cfg
    g = _target(st)
    shadow = _shadow(st)
    glob = load_params(st.need("train-fed", "global.ckpt"))
    st.seeds.update(attacker=cfg.stage_seed("attacker"), mlp=cfg.stage_seed("mlp"))
    res = membership_attack(cfg, g, glob, shadow)
    rows = [(i, float(res.scores[i]), bool(res.members[i])) for i in range(g.num_nodes)]
    write_csv(st.out("mi_scores.csv"), ["node", "score", "true_member"], rows)
    save_tensors(st.out("classifier.ckpt"), res.classifier.tensors(), res.classifier.meta())
    save_params(res.attacker.params, st.out("attacker.ckpt"))
    metrics = {"mi_auc": res.auc, "members": int(res.members.sum()), "nodes": g.num_nodes}
    atomic_write_text(st.out("metrics.json"), json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    st.finish()


def cmd_invert(st: Stage) -> None:
    cfg = st.cfg
    g = _target(st)
    part = _partition(st, g)
    trace, run, rounds = _load_intercepted(st.need("train-fed", "intercepted.ckpt"))
    clients = defended_clients(cfg, part, cfg.defense_eta)
    st.seeds.update({f"invert_{k}": cfg.stage_seed("invert", k) for k in range(len(clients))})
    _, invs = invert_all(cfg, clients, run, trace, workers=workers())
    rows = []
    for inv in invs:
        if inv.recon is not None:
            save_bundle(inv.recon.to_graph(g.num_classes, part.subgraphs[inv.client].train_mask),
                        st.out(f"client_{inv.client}"))
            tr = inv.recon.loss_trace
            write_csv(st.out(f"loss_trace_{inv.client}.csv"), ["epoch", "total", "cos", "smooth", "frob"],
                      [(e, *map(float, tr[e])) for e in range(len(tr))])
        rows.append((inv.client, rounds[inv.client], inv.edge_auc, inv.edge_auc_null_std, inv.rnmse,
                     inv.rnmse_baseline, inv.kl))
    write_csv(st.out("inversion.csv"),
              ["client", "round", "edge_auc", "edge_auc_null_std", "rnmse", "rnmse_baseline", "kl"], rows)
    st.finish()


def cmd_attack_own(st: Stage, args) -> None:
    cfg = st.cfg
    if not (st.root / "invert" / "manifest.json").exists():
        run_stage("invert", cfg, st.root, args)
    g = _target(st)
    part = _partition(st, g)
    glob = load_params(st.need("train-fed", "global.ckpt"))
    inv_rows = read_csv(st.need("invert", "inversion.csv"))
    invs = []
    for r in inv_rows:
        k = int(r["client"])
        p = st.root / "invert" / f"client_{k}"
        rec = None
        if p.exists():
            st.inputs.append(p)
            rg = load_bundle(p)
            rec = Reconstruction(rg.features, rg.adjacency(), rg.adjacency(), rg.labels, np.zeros((0, 4)))
        invs.append(ClientInversion(k, int(r["round"]), rec, *(float(r[c]) for c in
                                    ("edge_auc", "edge_auc_null_std", "rnmse", "rnmse_baseline", "kl"))))
    res = ownership_attack(cfg, g, part, glob, invs)
    rows = [(i, int(res.truth[i]), int(res.pred[i]), float(res.distances[i, res.pred[i]]))
            for i in range(g.num_nodes)]
    write_csv(st.out("ownership.csv"), ["node", "true_client", "pred_client", "distance"], rows)
    tensors, cmap = {}, []
    for k, ps in enumerate(res.prototypes):
        for c, mu in sorted(ps.means.items()):
            tensors[f"c{k}/class{c}"] = mu
        cmap.append({"client": k, "classes": sorted(ps.means), "counts": {str(c): n for c, n in sorted(ps.counts.items())}})
    save_tensors(st.out("prototypes.ckpt"), tensors, {"clients": cmap})
    metrics = {"own_acc": res.accuracy, "k": cfg.k, "uniform_baseline": 1.0 / cfg.k}
    atomic_write_text(st.out("metrics.json"), json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    st.finish()


def cmd_defend(st: Stage) -> None:
    cfg = st.cfg
    n = workers()
    etas = cfg.defense_etas
    seeds = cfg.defense_seeds
    st.seeds.update({f"sweep_{s}": s for s in seeds})
    if n > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n) as ex:
            parts = list(ex.map(lambda e: tradeoff_sweep([e], cfg, seeds), etas))
        rows = [r for p in parts for r in p]
    else:
        rows = tradeoff_sweep(etas, cfg, seeds)
    write_csv(st.out("defense_sweep.csv"), ["eta", "test_acc", "mi_auc", "own_acc", "seed"],
              [(r["eta"], r["test_acc"], r["mi_auc"], r["own_acc"], r["seed"]) for r in rows])
    st.finish()


def _load_json(p: Path):
    return json.loads(p.read_text(encoding="utf-8"))


def cmd_report(st: Stage) -> None:
    cfg = st.cfg
    labels = list(cfg.report_runs) or ["."]
    runs = [cfg.resolve(r) for r in cfg.report_runs] or [st.root]
    summary, inv_summary = [], []
    ks = set()
    for label, run in zip(labels, runs):
        row = {"run": label}
        fed_m = run / "train-fed" / "manifest.json"
        if fed_m.exists():
            st.inputs.append(fed_m)
            m = _load_json(fed_m)
            row["strategy"] = m["config"]["fed"]["strategy"]
            row["test_acc"] = m.get("test_acc")
            row["k"] = m["config"]["partition"]["k"]
        mi = run / "attack-mi" / "metrics.json"
        if mi.exists():
            st.inputs.append(mi)
            row["mi_auc"] = _load_json(mi)["mi_auc"]
        own = run / "attack-own" / "metrics.json"
        if own.exists():
            st.inputs.append(own)
            om = _load_json(own)
            row[f"own_acc_{om['k']}"] = om["own_acc"]
            ks.add(om["k"])
        inv = run / "invert" / "inversion.csv"
        if inv.exists():
            st.inputs.append(inv)
            rs = read_csv(inv)
            k = len(rs)
            vals = {c: [float(r[c]) for r in rs if r[c] not in ("", "nan")] for c in ("edge_auc", "rnmse", "kl")}
            inv_summary.append({"run": label, "k": k,
                                **{f"{c}_{k}": (float(np.mean(v)) if v else math.nan) for c, v in vals.items()}})
        summary.append(row)
    if not summary:
        raise ConfigError("missing_stage", "nothing to report")
    cols = ["run", "strategy", "k", "test_acc", "mi_auc"] + [f"own_acc_{k}" for k in sorted(ks)]
    write_csv(st.out("summary.csv"), cols, [[r.get(c) for c in cols] for r in summary])
    if inv_summary:
        keys = sorted({c for r in inv_summary for c in r} - {"run", "k"})
        write_csv(st.out("inversion_summary.csv"), ["run", "k", *keys],
                  [[r.get(c) for c in ("run", "k", *keys)] for r in inv_summary])
    st.finish()


# ------------------------------------------------------------------ driver


def run_stage(name: str, cfg: ExperimentConfig, root: Path, args) -> None:
    st = Stage(name, root, cfg, {k: v for k, v in vars(args).items() if k != "func"})
    if name == "gen-synth":
        cmd_gen_synth(st)
    elif name == "partition":
        cmd_partition(st, args)
    elif name == "train-fed":
        cmd_train_fed(st)
    elif name == "attack-mi":
        cmd_attack_mi(st)
    elif name == "invert":
        cmd_invert(st)
    elif name == "attack-own":
        cmd_attack_own(st, args)
    elif name == "defend":
        cmd_defend(st)
    elif name == "report":
        cmd_report(st)
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError("unknown_stage", name)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ccmia", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"ccmia {__version__}")
    sub = ap.add_subparsers(dest="stage", required=True)
    for name in STAGES:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="experiment JSON")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--out", default="out", help="run directory (partition also accepts a .csv path)")
        if name == "partition":
            sp.add_argument("--in", dest="input", help="graph bundle to partition")
            sp.add_argument("--k", type=int)
            sp.add_argument("--balance-tol", type=float)
            sp.add_argument("--part-seed", type=int, help="partitioner seed (default: derived from --seed)")
    return ap


def _partition_only(args) -> ExperimentConfig:
    """Config for ``partition --in DIR`` without a JSON file."""
    return ExperimentConfig(dataset={"bundle": str(Path(args.input).resolve())},
                            k=args.k if args.k is not None else 3,
                            balance_tol=args.balance_tol if args.balance_tol is not None else 0.1)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            cfg = ExperimentConfig.load(args.config)
        elif args.stage == "partition" and args.input:
            cfg = _partition_only(args)
            if args.seed is not None and args.part_seed is None:
                args.part_seed = args.seed
        else:
            raise ConfigError("missing_key", "--config is required")
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out)
        if args.stage == "partition" and out.suffix == ".csv":
            # --out FILE form: csv and manifest side by side
            st = Stage("partition", out.parent, cfg, dict(vars(args)), dir=out.parent)
            cmd_partition(st, args, dest=out)
        else:
            run_stage(args.stage, cfg, out, args)
    except (ConfigError, BundleError, PartitionError, InversionError, NoCandidateError) as e:
        rec = e.record() if hasattr(e, "record") else {"error": getattr(e, "code", type(e).__name__),
                                                        "message": str(e)}
        if isinstance(e, BundleError):
            rec.update(path=e.path, line=e.line)
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
