"""Experiment configuration and the in-memory attack pipeline.

One JSON document configures a whole experiment; every random stream is
split off the master ``seed`` with :func:`ccmia.seeding.derive_seed` under a
stage name (and client index where relevant), so stages can be rerun alone.

Keys (all optional except ``dataset``)::

    seed                 master seed
    dataset              {"sbm": {...}} or {"bundle": DIR}
    shadow               {"sbm": {...}} or {"bundle": DIR}; needed by attack-mi
    partition            {"k": 3, "balance_tol": 0.1} or {"file": CSV, "k": K}
    fed                  FedConfig fields
    tap                  {"gamma": 1.0, "proxy_rule": "zero_order_hold"}
    membership           {"shadow_train_fraction": 0.4, "attacker": {...}, "mlp": {...}}
    inversion            InversionConfig fields; rho/n_hat default to the client's truth
    prototypes           {"bins": 10, "eps": 0.001}
    defense              {"eta": "inf", "etas": ["inf", 8, 4, 2, 1], "seeds": [0, 1, 2, 3, 4]}
    report               {"runs": [DIR, ...]}; defaults to the output directory

SBM blocks accept either explicit ``feature_centers`` or the shortcut keys
``num_features``, ``separation`` and ``centers_seed``.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .defense import DefenseConfig, perturb_graph
from .eavesdrop import TapConfig, TapTrace, latest_intercepted, tap
from .federated import FedConfig, FedRun, Strategy, run_federation
from .gnn import ModelParams, accuracy
from .graph import Graph, SbmParams, gen_sbm, load_bundle
from .inversion import InversionConfig, Reconstruction, invert
from .membership import AttackerGnn, GnnHyper, MlpHyper, MlpParams, build_attack_dataset, infer_membership, \
    train_attacker_gnn, train_mlp
from .metrics import auc, auc_null_std, edge_auc, rnmse
from .partition import Partition, load_partition, partition
from .prototypes import PrototypeSet, assign_all, build_prototypes, ownership_accuracy, structural_similarity_kl
from .seeding import derive_seed


class ConfigError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.message = message

    def record(self) -> dict:
        return {"error": self.code, "message": self.message}


def _build(cls, d: dict | None, where: str, **fixed):
    d = dict(d or {})
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError("unknown_key", f"{where}: unknown keys {sorted(extra)}")
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    d.update(fixed)
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError("invalid_value", f"{where}: {e}") from None


def _eta(v) -> float:
    if v is None or (isinstance(v, str) and v.lower() in ("inf", "infinity", "none")):
        return math.inf
    return float(v)


def _plain(v):
    if dataclasses.is_dataclass(v):
        return {f.name: _plain(getattr(v, f.name)) for f in dataclasses.fields(v)}
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    seed: int = 0
    shadow: dict | None = None
    k: int = 3
    balance_tol: float = 0.1
    partition_file: str | None = None
    fed: FedConfig = field(default_factory=FedConfig)
    tap: TapConfig = field(default_factory=TapConfig)
    shadow_train_fraction: float = 0.4
    attacker: GnnHyper = field(default_factory=GnnHyper)
    mlp: MlpHyper = field(default_factory=MlpHyper)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    rho: float | None = None
    kl_bins: int = 10
    kl_eps: float = 1e-3
    defense_eta: float = math.inf
    defense_etas: tuple[float, ...] = (math.inf, 8.0, 4.0, 2.0, 1.0)
    defense_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    report_runs: tuple[str, ...] = ()
    base_dir: str = "."

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name, src in (("dataset", self.dataset), ("shadow", self.shadow)):
            if src is None:
                continue
            if set(src) not in ({"sbm"}, {"bundle"}):
                raise ConfigError("invalid_source", f"{name} needs exactly one of 'sbm' or 'bundle'")
            if "bundle" in src and not self.resolve(src["bundle"]).is_dir():
                raise ConfigError("missing_path", f"{name} bundle {src['bundle']} does not exist")
            if "sbm" in src:
                try:
                    SbmParams.from_dict(src["sbm"])
                except (TypeError, ValueError, KeyError) as e:
                    raise ConfigError("invalid_value", f"{name}.sbm: {e}") from None
        if self.partition_file is not None and not self.resolve(self.partition_file).is_file():
            raise ConfigError("missing_path", f"partition file {self.partition_file} does not exist")
        if self.k < 1:
            raise ConfigError("invalid_value", "partition k must be >= 1")
        if self.attacker.hidden != self.fed.hidden:
            raise ConfigError(
                "width_mismatch",
                f"attacker hidden width {self.attacker.hidden} differs from global width {self.fed.hidden}",
            )
        if any(not e > 0 for e in (*self.defense_etas, self.defense_eta)):
            raise ConfigError("invalid_value", "defense etas must be positive")

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "ExperimentConfig":
        d = dict(d)
        known = {"seed", "dataset", "shadow", "partition", "fed", "tap", "membership", "inversion",
                 "prototypes", "defense", "report"}
        extra = set(d) - known
        if extra:
            raise ConfigError("unknown_key", f"unknown top-level keys {sorted(extra)}")
        if "dataset" not in d:
            raise ConfigError("missing_key", "config needs a 'dataset' block")
        part = dict(d.get("partition") or {})
        mem = dict(d.get("membership") or {})
        protos = dict(d.get("prototypes") or {})
        dfn = dict(d.get("defense") or {})
        rep = dict(d.get("report") or {})
        for name, blk, keys in (("partition", part, {"k", "balance_tol", "file"}),
                                ("membership", mem, {"shadow_train_fraction", "attacker", "mlp"}),
                                ("prototypes", protos, {"bins", "eps"}),
                                ("defense", dfn, {"eta", "etas", "seeds"}),
                                ("report", rep, {"runs"})):
            if set(blk) - keys:
                raise ConfigError("unknown_key", f"{name}: unknown keys {sorted(set(blk) - keys)}")
        fed = _build(FedConfig, d.get("fed"), "fed")
        att = dict(mem.get("attacker") or {})
        att.setdefault("hidden", fed.hidden)
        att.setdefault("mode", fed.mode.value)
        inv = dict(d.get("inversion") or {})
        rho = inv.pop("rho", None)
        kw = {}
        if "etas" in dfn:
            kw["defense_etas"] = tuple(_eta(e) for e in dfn["etas"])
        if "eta" in dfn:
            kw["defense_eta"] = _eta(dfn["eta"])
        if "runs" in rep:
            kw["report_runs"] = tuple(str(r) for r in rep["runs"])
        if "seeds" in dfn:
            kw["defense_seeds"] = tuple(int(s) for s in dfn["seeds"])
        return cls(
            dataset=dict(d["dataset"]),
            seed=int(d.get("seed", 0)),
            shadow=None if d.get("shadow") is None else dict(d["shadow"]),
            k=int(part.get("k", 3)),
            balance_tol=float(part.get("balance_tol", 0.1)),
            partition_file=part.get("file"),
            fed=fed,
            tap=_build(TapConfig, d.get("tap"), "tap"),
            shadow_train_fraction=float(mem.get("shadow_train_fraction", 0.4)),
            attacker=_build(GnnHyper, att, "membership.attacker"),
            mlp=_build(MlpHyper, mem.get("mlp"), "membership.mlp"),
            inversion=_build(InversionConfig, inv, "inversion"),
            rho=None if rho is None else float(rho),
            kl_bins=int(protos.get("bins", 10)),
            kl_eps=float(protos.get("eps", 1e-3)),
            base_dir=str(base_dir),
            **kw,
        )

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError("missing_path", f"config file {path} does not exist") from None
        except json.JSONDecodeError as e:
            raise ConfigError("malformed_json", f"{path}: {e}") from None
        if not isinstance(d, dict):
            raise ConfigError("malformed_json", "config must be a JSON object")
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self) -> dict:
        part = {"k": self.k, "balance_tol": self.balance_tol}
        if self.partition_file is not None:
            part["file"] = self.partition_file
        return {
            "seed": self.seed,
            "dataset": self.dataset,
            "shadow": self.shadow,
            "partition": part,
            "fed": _plain(self.fed),
            "tap": _plain(self.tap),
            "membership": {"shadow_train_fraction": self.shadow_train_fraction,
                           "attacker": _plain(self.attacker), "mlp": _plain(self.mlp)},
            "inversion": {**_plain(self.inversion), "rho": self.rho},
            "prototypes": {"bins": self.kl_bins, "eps": self.kl_eps},
            "defense": {"eta": _plain(self.defense_eta), "etas": [_plain(e) for e in self.defense_etas],
                        "seeds": list(self.defense_seeds)},
            "report": {"runs": list(self.report_runs)},
        }

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))

    def stage_seed(self, *keys) -> int:
        return derive_seed(self.seed, *keys)

    @property
    def fed_config(self) -> FedConfig:
        return replace(self.fed, seed=self.stage_seed("fed"))

    @property
    def tap_config(self) -> TapConfig:
        return replace(self.tap, seed=self.stage_seed("tap"))


# ------------------------------------------------------------------ stages


def _graph_from(cfg: ExperimentConfig, src: dict, name: str) -> Graph:
    if "bundle" in src:
        return load_bundle(cfg.resolve(src["bundle"]))
    return gen_sbm(SbmParams.from_dict(src["sbm"]), cfg.stage_seed(name))


def load_target(cfg: ExperimentConfig) -> Graph:
    return _graph_from(cfg, cfg.dataset, "target")


def load_shadow(cfg: ExperimentConfig) -> Graph:
    if cfg.shadow is None:
        raise ConfigError("missing_key", "membership attack needs a 'shadow' graph")
    return _graph_from(cfg, cfg.shadow, "shadow")


def make_partition(cfg: ExperimentConfig, g: Graph) -> Partition:
    if cfg.partition_file is not None:
        return load_partition(cfg.resolve(cfg.partition_file), g, cfg.k)
    return partition(g, cfg.k, cfg.balance_tol, cfg.stage_seed("partition"))


def defended_clients(cfg: ExperimentConfig, part: Partition, eta: float = math.inf) -> list[Graph]:
    """Client graphs after feature perturbation.

    The noise stream of client ``k`` does not depend on ``eta``; the radius
    scales as ``1/eta``, so runs at different budgets share their draws.
    """
    return [perturb_graph(sg, DefenseConfig(eta, seed=cfg.stage_seed("defense", k)))
            for k, sg in enumerate(part.subgraphs)]


def train_federation(cfg: ExperimentConfig, clients: list[Graph], transfer: Graph | None = None) -> FedRun:
    fc = cfg.fed_config
    if fc.strategy is Strategy.FEDDF_SIMPLIFIED and transfer is None:
        if cfg.shadow is None:
            raise ConfigError("missing_key", "feddf_simplified uses the shadow graph as transfer set")
        transfer = load_shadow(cfg)
    return run_federation(clients, fc, transfer)


class MembershipResult(NamedTuple):
    attacker: AttackerGnn
    classifier: MlpParams
    scores: np.ndarray
    members: np.ndarray
    auc: float


def membership_attack(cfg: ExperimentConfig, target: Graph, global_params: ModelParams,
                      shadow: Graph | None = None) -> MembershipResult:
    """Scores every target node; ground truth is the target train mask."""
    shadow = load_shadow(cfg) if shadow is None else shadow
    att = train_attacker_gnn(shadow, cfg.shadow_train_fraction, cfg.attacker, cfg.stage_seed("attacker"))
    ds = build_attack_dataset(att.params, shadow, att.members)
    clf = train_mlp(ds, cfg.mlp, cfg.stage_seed("mlp"))
    scores = infer_membership(clf, global_params, target)
    members = np.asarray(target.train_mask, dtype=bool)
    return MembershipResult(att, clf, scores, members, auc(scores, members))


class ClientInversion(NamedTuple):
    client: int
    round: int
    recon: Reconstruction | None
    edge_auc: float
    edge_auc_null_std: float
    rnmse: float
    rnmse_baseline: float
    kl: float


def invert_client(cfg: ExperimentConfig, k: int, sg: Graph, trace: TapTrace, run: FedRun) -> ClientInversion:
    """Invert the most recent intercepted upload of client ``k``.

    Labels, node count and train mask of the client are attack inputs; ``rho``
    defaults to the true edge density ``|E_k| / N_k``.
    """
    hit = latest_intercepted(trace, run.records, k)
    if hit is None or not sg.train_mask.any():
        return ClientInversion(k, -1, None, math.nan, math.nan, math.nan, math.nan, math.nan)
    snapshot, upload = hit
    rnd = int(np.flatnonzero(trace.intercepted[:, k])[-1])
    icfg = cfg.inversion
    rho = sg.num_edges / sg.num_nodes if cfg.rho is None else cfg.rho
    icfg = replace(icfg, rho=rho, n_hat=sg.num_nodes, seed=cfg.stage_seed("invert", k))
    rec = invert(snapshot, upload, sg.labels, icfg, mask=sg.train_mask)

    n = sg.num_nodes
    base = np.random.default_rng(cfg.stage_seed("baseline", k)).normal(0.0, icfg.init_std, size=sg.features.shape)
    true_adj = sg.adjacency()
    pos = int(np.triu(true_adj, 1).sum())
    neg = n * (n - 1) // 2 - pos
    if pos and neg:
        e_auc, e_sd = edge_auc(true_adj, rec.A_cont), auc_null_std(pos, neg)
    else:
        e_auc, e_sd = math.nan, math.nan
    kl = structural_similarity_kl(rec.to_graph(sg.num_classes), sg, cfg.kl_bins, cfg.kl_eps)
    return ClientInversion(k, rnd, rec, e_auc, e_sd, rnmse(sg.features, rec.X_hat), rnmse(sg.features, base), kl)


def invert_all(cfg: ExperimentConfig, clients: list[Graph], run: FedRun, trace: TapTrace | None = None,
               workers: int = 1) -> tuple[TapTrace, list[ClientInversion]]:
    trace = tap(run.records, cfg.tap_config) if trace is None else trace
    jobs = list(enumerate(clients))
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as ex:
            out = list(ex.map(lambda kv: invert_client(cfg, kv[0], kv[1], trace, run), jobs))
    else:
        out = [invert_client(cfg, k, sg, trace, run) for k, sg in jobs]
    return trace, out


class OwnershipResult(NamedTuple):
    prototypes: list[PrototypeSet]
    pred: np.ndarray
    distances: np.ndarray
    truth: np.ndarray
    accuracy: float


def ownership_attack(cfg: ExperimentConfig, target: Graph, part: Partition, global_params: ModelParams,
                     inversions: list[ClientInversion]) -> OwnershipResult:
    """Prototypes from each reconstruction, then nearest-prototype assignment
    of every target node. A client without a reconstruction offers no
    candidate classes."""
    protos = []
    for inv in inversions:
        if inv.recon is None:
            protos.append(PrototypeSet({}, {}))
        else:
            protos.append(build_prototypes(global_params, [inv.recon.to_graph(target.num_classes)])[0])
    nodes = np.arange(target.num_nodes)
    pred, dist = assign_all(global_params, target, nodes, protos)
    truth = np.asarray(part.assignment)
    return OwnershipResult(protos, pred, dist, truth, ownership_accuracy(pred, truth))


class ExperimentResult(NamedTuple):
    eta: float
    test_acc: float
    mi_auc: float
    own_acc: float
    edge_auc: float
    rnmse: float
    rnmse_baseline: float
    run: FedRun
    membership: MembershipResult | None
    ownership: OwnershipResult | None
    inversions: list[ClientInversion]


def run_experiment(cfg: ExperimentConfig, eta: float = math.inf, membership: bool = True,
                   ownership: bool = True, workers: int = 1) -> ExperimentResult:
    """Whole pipeline in memory: data, partition, (defended) federation, attacks.

    Membership queries and ownership queries use the clean target features.
    """
    target = load_target(cfg)
    part = make_partition(cfg, target)
    clients = defended_clients(cfg, part, eta)
    run = train_federation(cfg, clients)
    test_acc = accuracy(run.params, target) if target.test_mask.any() else math.nan
    mi = membership_attack(cfg, target, run.params) if membership else None
    own, invs = None, []
    if ownership:
        _, invs = invert_all(cfg, clients, run, workers=workers)
        own = ownership_attack(cfg, target, part, run.params, invs)

    def mean(vals):
        v = [x for x in vals if not math.isnan(x)]
        return float(np.mean(v)) if v else math.nan

    return ExperimentResult(
        float(eta), test_acc,
        mi.auc if mi else math.nan,
        own.accuracy if own else math.nan,
        mean([i.edge_auc for i in invs]),
        mean([i.rnmse for i in invs]),
        mean([i.rnmse_baseline for i in invs]),
        run, mi, own, invs,
    )
