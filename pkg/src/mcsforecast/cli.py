"""Command-line pipeline: generate, preprocess, train, evaluate, bench, report.

Every stage reads its inputs from and writes its outputs under one run
directory; the layout is fixed by ``RunPaths``. A missing upstream artifact
exits with code 2 and names the stage that produces it.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import channelsim as cs
from . import evalsim
from . import features as F
from . import ingest
from . import labels
from . import training
from .model import ModelConfig, load_checkpoint, param_count, save_checkpoint
from .timing import ms_to_dl_slots

log = logging.getLogger("mcsforecast")

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3


class MissingArtifactError(FileNotFoundError):
    def __init__(self, path, stage: str):
        super().__init__(f"missing {path}; run the {stage} stage first (cmd_{stage})")
        self.stage = stage


# --- configuration --------------------------------------------------------------

@dataclass
class HorizonConfig:
    window_ms: float = 25.0
    delay_ms: float = 100.0
    gop_ms: float = 500.0

    @property
    def seq_len(self) -> int:
        return ms_to_dl_slots(self.window_ms)

    def spec(self) -> labels.HorizonSpec:
        return labels.HorizonSpec(ms_to_dl_slots(self.delay_ms), ms_to_dl_slots(self.gop_ms))


@dataclass
class DataConfig:
    n_traces: int = 2
    trace_duration_s: float = 625.0
    max_gap: int = ingest.DEFAULT_MAX_GAP
    allowed_pcis: list | None = None
    split: tuple = (0.70, 0.15, 0.15)
    sample_stride: int = 16

    def __post_init__(self):
        self.split = tuple(float(f) for f in self.split)
        if len(self.split) != 3 or min(self.split) <= 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f"split must be three positive fractions summing to 1, got {self.split}")
        if self.n_traces < 1 or self.sample_stride < 1:
            raise ValueError("n_traces and sample_stride must be at least 1")


@dataclass
class EvalConfig:
    gt_threshold: float = 0.9
    proposed_threshold: float = 0.9
    mse_t_threshold: float = 0.9
    deterministic_threshold: float = 0.5
    bench_iters: int = 1000


@dataclass
class RunPaths:
    root: str = "runs/default"
    traces: str = "traces"
    data: str = "data"
    checkpoints: str = "checkpoints"
    reports: str = "reports"

    def dir(self, name: str) -> Path:
        return Path(self.root) / getattr(self, name)


_SECTIONS = {"channel": cs.ChannelSimConfig, "data": DataConfig, "horizon": HorizonConfig,
             "model": ModelConfig, "train": training.TrainConfig, "eval": EvalConfig, "paths": RunPaths}


@dataclass
class RunConfig:
    seed: int = 0
    channel: cs.ChannelSimConfig = field(default_factory=cs.ChannelSimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    horizon: HorizonConfig = field(default_factory=HorizonConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: training.TrainConfig = field(default_factory=training.TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: RunPaths = field(default_factory=RunPaths)

    def __post_init__(self):
        if self.model.seq_len != self.horizon.seq_len:
            raise ValueError(f"model.seq_len {self.model.seq_len} != window of {self.horizon.seq_len} slots")
        if self.model.in_features != F.N_FEATURES:
            raise ValueError(f"model.in_features must be {F.N_FEATURES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel"]["drop_depth_db"] = list(self.channel.drop_depth_db)
        d["data"]["split"] = list(self.data.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"seed", *_SECTIONS}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, typ in _SECTIONS.items():
            sec = d.get(name) or {}
            allowed = {f.name for f in fields(typ)}
            bad = set(sec) - allowed
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = typ(**sec)
        return cls(seed=int(d.get("seed", 0)), **kwargs)

    def dump_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()) or {})

    def fingerprint(self) -> str:
        """Hash of everything that affects results (output locations excluded)."""
        d = self.to_dict()
        d.pop("paths")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def trace_seeds(self) -> list[int]:
        return [int(s) for s in np.random.SeedSequence(self.seed).generate_state(self.data.n_traces)]


def _provenance(cfg: RunConfig, stage: str) -> list[str]:
    return [f"config_fingerprint={cfg.fingerprint()}", f"stage={stage}"]


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(path, stage)
    return path


def _trace_path(cfg, i):
    return cfg.paths.dir("traces") / f"trace_{i:03d}.csv"


def _slots_path(cfg, i):
    return cfg.paths.dir("data") / f"slots_{i:03d}.csv"


def _ckpt_path(cfg, which):
    return cfg.paths.dir("checkpoints") / f"{which}.ckpt"


def _train_log_path(cfg, which):
    return cfg.paths.dir("checkpoints") / f"{which}_train_log.csv"


# --- commands -------------------------------------------------------------------

def cmd_generate(cfg: RunConfig) -> list[Path]:
    out = cfg.paths.dir("traces")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, seed in enumerate(cfg.trace_seeds()):
        ch = replace(cfg.channel, duration_s=cfg.data.trace_duration_s, seed=seed)
        trace = cs.generate_trace(ch)
        path = _trace_path(cfg, i)
        cs.write_log_csv(trace, path, _provenance(cfg, "generate") + [f"trace_seed={seed}"])
        _, pd = trace.select(cs.PDSCH)
        hist = np.bincount(pd[:, 0].astype(int), minlength=cs.N_MCS)
        print(f"{path.name}: {len(pd)} slots, BLER {cs.empirical_bler(trace):.4f}")
        print("  MCS histogram: " + " ".join(f"{m}:{c}" for m, c in enumerate(hist) if c))
        written.append(path)
    return written


def _split_bounds(n: int, split) -> tuple[int, int]:
    a = int(round(split[0] * n))
    b = int(round((split[0] + split[1]) * n))
    return a, b


def _split_anchors(table, lo: int, hi: int, guard_from: int | None, spec, seq_len, stride):
    """Anchors inside rows ``lo..hi``; with ``guard_from`` none closer than delay+gop to that boundary."""
    first = lo if guard_from is None else max(lo, guard_from + spec.delay_dl_slots + spec.gop_dl_slots
                                                 - seq_len + 1)
    return labels.valid_anchors(table, first, hi, spec, seq_len, stride)


def eval_start_row(cfg: RunConfig, n_rows: int) -> int:
    """First slot-table row the GOP simulation may read (window start of its first anchor)."""
    spec = cfg.horizon.spec()
    _, b = _split_bounds(n_rows, cfg.data.split)
    return b + spec.delay_dl_slots + spec.gop_dl_slots - cfg.horizon.seq_len + 1


def cmd_preprocess(cfg: RunConfig) -> dict:
    spec, seq_len, stride = cfg.horizon.spec(), cfg.horizon.seq_len, cfg.data.sample_stride
    out = cfg.paths.dir("data")
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(cfg, "preprocess")
    tables = []
    for i in range(cfg.data.n_traces):
        trace = cs.read_log_csv(_require(_trace_path(cfg, i), "generate"))
        table = ingest.filter_slots(ingest.align_locf(trace), cfg.data.allowed_pcis, cfg.data.max_gap)
        if len(table) == 0:
            raise ingest.EmptyInputError(f"trace {i} has no usable slots after filtering")
        ingest.write_table_csv(table, _slots_path(cfg, i), prov)
        tables.append((table, F.feature_matrix(table)))

    train_rows = [feat[:_split_bounds(len(t), cfg.data.split)[0]] for t, feat in tables]
    norm = F.fit_normalizer(np.concatenate(train_rows))
    norm.save(out / "normalizer.txt", prov)

    parts = {"train": [], "val": [], "test": []}
    split_info = {"fractions": list(cfg.data.split), "guard_slots": spec.delay_dl_slots + spec.gop_dl_slots,
                  "traces": []}
    for i, (table, feat) in enumerate(tables):
        n = len(table)
        a, b = _split_bounds(n, cfg.data.split)
        anchors = {
            "train": _split_anchors(table, 0, a - 1, None, spec, seq_len, stride),
            "val": _split_anchors(table, a, b - 1, a, spec, seq_len, stride),
            "test": _split_anchors(table, b, n - 1, b, spec, seq_len, stride),
        }
        for name, anc in anchors.items():
            parts[name].append(labels.make_sample_set(table, feat, anc, spec, seq_len,
                                                      meta={"trace": i}))
        split_info["traces"].append({"trace": i, "rows": n, "train_rows": [0, a], "val_rows": [a, b],
                                     "test_rows": [b, n], **{f"n_{k}": int(len(v)) for k, v in anchors.items()}})
    counts = {}
    for name, sets in parts.items():
        ss = labels.concat_sample_sets(sets)
        ss.meta = {"split": name, "config_fingerprint": cfg.fingerprint(),
                   "delay_dl_slots": spec.delay_dl_slots, "gop_dl_slots": spec.gop_dl_slots}
        labels.save_samples(ss, out / f"{name}.bin")
        counts[name] = len(ss)
    split_info["config_fingerprint"] = cfg.fingerprint()
    (out / "split.json").write_text(json.dumps(split_info, indent=2) + "\n")
    print("samples: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    return counts


def _load_splits(cfg):
    d = cfg.paths.dir("data")
    norm = F.Normalizer.load(_require(d / "normalizer.txt", "preprocess"))
    tr = labels.load_samples(_require(d / "train.bin", "preprocess"))
    va = labels.load_samples(_require(d / "val.bin", "preprocess"))
    return tr, va, norm


TWINS = {"proposed": training.ASL, "mse": training.MSE}


def cmd_train(cfg: RunConfig, which=tuple(TWINS)) -> dict:
    tr, va, norm = _load_splits(cfg)
    out = cfg.paths.dir("checkpoints")
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(cfg, "train")
    results = {}
    for name in which:
        tcfg = replace(cfg.train, loss_kind=TWINS[name], seed=cfg.seed)
        log.info("training %s (%s) on %d samples", name, tcfg.loss_kind, len(tr))
        res = training.train(tr, va, norm, cfg.model, tcfg, _train_log_path(cfg, name), prov)
        save_checkpoint(_ckpt_path(cfg, name), res.params,
                        {"config_fingerprint": cfg.fingerprint(), "loss": tcfg.loss_kind, "lam": tcfg.lam,
                         "best_epoch": res.best_epoch, "best_val_loss": res.best_val_loss})
        print(f"{name}: best epoch {res.best_epoch}, val loss {res.best_val_loss:.6f}")
        results[name] = res
    return results


def build_policies(cfg: RunConfig, norm) -> list[evalsim.Policy]:
    ckpt = {name: load_checkpoint(_require(_ckpt_path(cfg, name), "train"))[0] for name in TWINS}
    e = cfg.eval
    return [
        evalsim.Policy(evalsim.PROPOSED, e.proposed_threshold, ckpt["proposed"]),
        evalsim.Policy(evalsim.LRA, normalizer=norm),
        evalsim.Policy(evalsim.MAW, normalizer=norm),
        evalsim.Policy(evalsim.DETERMINISTIC, e.deterministic_threshold, ckpt["mse"]),
        evalsim.Policy(evalsim.MSE_T, e.mse_t_threshold, ckpt["mse"]),
    ]


def cmd_evaluate(cfg: RunConfig) -> evalsim.EvalReport:
    d = cfg.paths.dir("data")
    norm = F.Normalizer.load(_require(d / "normalizer.txt", "preprocess"))
    policies = build_policies(cfg, norm)
    spec, seq_len = cfg.horizon.spec(), cfg.horizon.seq_len
    parts = []
    for i in range(cfg.data.n_traces):
        table = ingest.read_table_csv(_require(_slots_path(cfg, i), "preprocess"))
        feat = F.feature_matrix(table)
        start = eval_start_row(cfg, len(table))
        dec, _ = evalsim.run_simulation(table[start:], feat[start:], policies, norm, spec,
                                        cfg.eval.gt_threshold, seq_len)
        for ds in dec.values():
            for g in ds:
                g.decision_anchor += start
        parts.append(dec)
    decisions = evalsim.merge_decisions(parts)
    report = evalsim.report_from_decisions(decisions)
    out = cfg.paths.dir("reports")
    out.mkdir(parents=True, exist_ok=True)
    prov = _provenance(cfg, "evaluate")
    report.write_csv(out / "eval_report.csv", prov)
    _write_decisions(decisions, out / "gop_decisions.csv", prov)
    print(report.to_text(), end="")
    return report


def _write_decisions(decisions, path, comments) -> None:
    with Path(path).open("w") as fh:
        fh.writelines(f"# {c}\n" for c in comments)
        fh.write("policy,gop_index,decision_anchor,selected_mcs,gt_mcs\n")
        for name, ds in decisions.items():
            fh.writelines(f"{name},{g.gop_index},{g.decision_anchor},{g.selected_mcs},{g.gt_mcs}\n" for g in ds)


def cmd_bench(cfg: RunConfig) -> dict:
    params, _ = load_checkpoint(_require(_ckpt_path(cfg, "proposed"), "train"))
    stats = evalsim.bench_inference(params, cfg.eval.bench_iters, seed=cfg.seed)
    stats["param_count"] = param_count(params.config)
    stats["config_fingerprint"] = cfg.fingerprint()
    out = cfg.paths.dir("reports")
    out.mkdir(parents=True, exist_ok=True)
    (out / "bench.json").write_text(json.dumps(stats, indent=2) + "\n")
    print(f"forward latency over {stats['n_iters']} runs: mean {stats['mean_ms']:.4f} ms, "
          f"sd {stats['sd_ms']:.4f} ms, pct_of_tti {stats['pct_of_tti']:.2f}%, "
          f"{stats['param_count']} parameters")
    return stats


def cmd_report(cfg: RunConfig) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rep_dir = cfg.paths.dir("reports")
    report = evalsim.EvalReport.read_csv(_require(rep_dir / "eval_report.csv", "evaluate"))
    logs = {name: training.read_train_log(_require(_train_log_path(cfg, name), "train")) for name in TWINS}

    text = report.to_text()
    bench_path = rep_dir / "bench.json"
    if bench_path.exists():
        b = json.loads(bench_path.read_text())
        text += (f"\nInference: mean {b['mean_ms']:.4f} ms (sd {b['sd_ms']:.4f}) over {b['n_iters']} runs, "
                 f"{b['pct_of_tti']:.2f}% of a 0.5 ms TTI, {b['param_count']} parameters\n")
    text = f"config_fingerprint={cfg.fingerprint()}\n\n" + text
    (rep_dir / "summary.txt").write_text(text)
    report.write_csv(rep_dir / "summary.csv", _provenance(cfg, "report"))

    fig, ax = plt.subplots(figsize=(7, 4))
    for name, rows in logs.items():
        steps = [r["step"] for r in rows]
        ax.plot(steps, [r["train_loss"] for r in rows], lw=0.6, alpha=0.6, label=f"{name} train")
        val = [(r["step"], r["val_loss"]) for r in rows if r["val_loss"] == r["val_loss"]]
        ax.plot(*zip(*val), "o-", label=f"{name} val")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(rep_dir / "loss_curve.png", dpi=120)
    plt.close(fig)

    names = list(report.rows)
    metrics = [("rmse", "RMSE"), ("reliability_pct", "Reliability (%)"), ("avg_bias", "Avg. bias"), ("mae", "MAE")]
    fig, axes = plt.subplots(1, 4, figsize=(14, 3.5))
    for ax, (attr, title) in zip(axes, metrics):
        ax.bar([evalsim.DISPLAY_NAME.get(n, n) for n in names], [getattr(report.rows[n], attr) for n in names])
        ax.set_title(title)
        ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(rep_dir / "metrics.png", dpi=120)
    plt.close(fig)
    print(text, end="")
    return rep_dir / "summary.txt"


COMMANDS = {"generate": cmd_generate, "preprocess": cmd_preprocess, "train": cmd_train,
            "evaluate": cmd_evaluate, "bench": cmd_bench, "report": cmd_report}


def run_pipeline(cfg: RunConfig) -> evalsim.EvalReport:
    """All stages in order; returns the evaluation report."""
    cmd_generate(cfg)
    cmd_preprocess(cfg)
    cmd_train(cfg)
    report = cmd_evaluate(cfg)
    cmd_bench(cfg)
    cmd_report(cfg)
    return report


# --- entry point ------------------------------------------------------------------

class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mcsforecast", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=list(COMMANDS) + ["show-config"])
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--out", type=Path, help="override the run directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(config_path=None, seed=None, out=None) -> RunConfig:
    cfg = RunConfig.load(config_path) if config_path is not None else RunConfig()
    if seed is not None:
        cfg.seed = seed
    if out is not None:
        cfg.paths.root = str(out)
    return cfg


def _check_root(cfg: RunConfig) -> None:
    root = Path(cfg.paths.root)
    root.mkdir(parents=True, exist_ok=True)
    probe = root / ".write_probe"
    probe.write_text("")
    probe.unlink()


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.config, args.seed, args.out)
        if args.command == "show-config":
            print(cfg.dump_yaml(), end="")
            return EXIT_OK
        _check_root(cfg)
        COMMANDS[args.command](cfg)
    except MissingArtifactError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FloatingPointError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, yaml.YAMLError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
