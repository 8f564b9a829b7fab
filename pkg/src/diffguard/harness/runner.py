"""Experiment orchestration: one function per experiment kind, plus the ablation suite.

Every random quantity comes from a named stream derived from the master
seed, and per-example streams are keyed by example index, so results do not
depend on ``threads`` or on batching.
"""

from __future__ import annotations

import platform
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .. import __version__
from ..attack import AttackConfig, perturbation_norm, pgd_attack
from ..certify import SmoothedPipeline, certify, soundness_probe
from ..data import GENERATORS
from ..diffusion import GuidanceTrace, NumericError, PurifyConfig, guided_purify, unguided_purify
from ..neural import Mlp, TrainingError, load_checkpoint, predict_labels, save_checkpoint
from ..neural import train_classifier, train_denoiser
from ..rng import StreamBank
from ..schedule import make_linear_schedule
from ..theory import bound_sweep
from . import io
from .config import ConfigError, config_hash

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_CHECKPOINT = 3
EXIT_NUMERIC = 4


class MissingCheckpoint(FileNotFoundError):
    pass


def derive_seed(master: int, name: str) -> int:
    """Stable 32-bit seed for the named stream under ``master``."""
    ss = np.random.SeedSequence([int(master), zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0])


@dataclass
class Context:
    cfg: dict
    seed: int
    threads: int
    base_dir: Path
    seeds: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def stream_seed(self, name):
        s = derive_seed(self.seed, name)
        self.seeds[name] = s
        return s


@dataclass
class Outcome:
    header: list
    rows: list
    report: dict = field(default_factory=dict)
    extra_csv: dict = field(default_factory=dict)  # file name -> (header, rows)
    checkpoint: tuple | None = None  # (model, training_seed)


@dataclass
class EvalReport:
    standard_acc: float
    robust_acc: float | None
    rows: list
    seconds_per_purification: float | None
    config_hash: str
    baseline_standard_acc: float = float("nan")

    def summary(self) -> dict:
        out = {"standard_acc": self.standard_acc, "baseline_standard_acc": self.baseline_standard_acc,
               "seconds_per_purification": self.seconds_per_purification, "config_hash": self.config_hash}
        if self.robust_acc is not None:
            out["robust_acc"] = self.robust_acc
        return out


# ---------------------------------------------------------------- plumbing

def _make_dataset(spec: dict, field_name: str):
    spec = dict(spec)
    name = spec.pop("name")
    try:
        return GENERATORS[name](**spec)
    except TypeError as exc:
        raise ConfigError(field_name, f"bad parameters for {name!r}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(field_name, str(exc)) from None


def _schedule(cfg):
    s = cfg["schedule"]
    try:
        return make_linear_schedule(s["T"], s["beta_start"], s["beta_end"])
    except ValueError as exc:
        raise ConfigError("schedule", str(exc)) from None


def _eval_data(ctx):
    ds = _make_dataset(ctx.cfg.get("eval_dataset", ctx.cfg["dataset"]),
                       "eval_dataset" if "eval_dataset" in ctx.cfg else "dataset")
    n = min(ctx.cfg["num_examples"], len(ds))
    if n < len(ds):
        # seeded subset, restored to index order
        idx = np.sort(np.random.default_rng(ctx.stream_seed("eval-subset")).permutation(len(ds))[:n])
        ds = ds.subset(idx)
    return ds


def _load_models(ctx):
    models = {}
    for role in ("denoiser", "classifier"):
        path = Path(ctx.cfg["checkpoints"][role])
        if not path.is_absolute():
            path = ctx.base_dir / path
        if not path.exists():
            raise MissingCheckpoint(f"checkpoints.{role}: {path} does not exist")
        models[role] = load_checkpoint(path)
    return models["denoiser"], models["classifier"]


def _purify_config(cfg_section: dict, **overrides) -> PurifyConfig:
    fields = dict(cfg_section)
    fields.update(overrides)
    try:
        return PurifyConfig(**fields)
    except ValueError as exc:
        raise ConfigError("purify", str(exc)) from None


def _attack_config(ctx) -> AttackConfig:
    a = ctx.cfg["attack"]
    return AttackConfig(norm=a["norm"], epsilon=a["epsilon"], steps=a["steps"],
                        step_size=a["step_size"], random_start=a["random_start"],
                        seed=ctx.stream_seed("attack"))


def _chunks(n, threads):
    if threads <= 1 or n < 2 * threads:
        return [np.arange(n)]
    return np.array_split(np.arange(n), threads)


def _parallel(fn, n, threads):
    """Apply ``fn(idx)`` to index chunks and stack results in index order."""
    chunks = _chunks(n, threads)
    if len(chunks) == 1:
        return fn(chunks[0])
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(fn, chunks))
    if isinstance(parts[0], list):
        return [item for part in parts for item in part]
    return np.concatenate(parts)


def _attack(ctx, classifier, x, y):
    cfg = _attack_config(ctx)
    seed = cfg.seed

    def work(idx):
        return pgd_attack(classifier, x[idx], y[idx], cfg, StreamBank.for_items(seed, idx))

    return _parallel(work, len(y), ctx.threads)


def _purify(ctx, denoiser, schedule, x, pcfg: PurifyConfig, stream_name="purify"):
    """Purify every row with its own stream; returns the array and seconds per example."""
    seed = ctx.stream_seed(stream_name)
    respaced = pcfg.sampling_schedule(schedule)

    def work(idx):
        rng = StreamBank.for_items(seed, idx)
        if pcfg.guided:
            return guided_purify(denoiser, respaced, x[idx], pcfg, rng)[0]
        return unguided_purify(denoiser, respaced, x[idx], pcfg, rng)

    t0 = time.perf_counter()
    out = _parallel(work, len(x), ctx.threads)
    return out, (time.perf_counter() - t0) / max(len(x), 1)


def _trace_first(ctx, denoiser, schedule, x, pcfg, stream_name="purify") -> GuidanceTrace:
    """Guidance diagnostics of example 0, replayed alone on its own stream."""
    rng = StreamBank.for_items(derive_seed(ctx.seed, stream_name), [0])
    return guided_purify(denoiser, pcfg.sampling_schedule(schedule), x[:1], pcfg, rng)[1]


def _accuracy(pred, y):
    return float(np.mean(np.asarray(pred) == np.asarray(y)))


# ---------------------------------------------------------------- experiments

def _train(ctx, role):
    cfg = ctx.cfg
    net = cfg[role]
    ds = _make_dataset(cfg["dataset"], "dataset")
    init_seed = ctx.stream_seed(f"{role}-init")
    train_seed = ctx.stream_seed(f"{role}-train")
    if role == "denoiser":
        schedule = _schedule(cfg)
        emb = net["time_embedding_dim"] or 8
        model = Mlp.init([ds.dim, *net["hidden"], ds.dim], time_embedding_dim=emb,
                         time_scale=float(schedule.total_steps), seed=init_seed)
        rep = train_denoiser(model, ds.inputs, schedule, net["epochs"], net["lr"], train_seed,
                             batch_size=net["batch_size"])
        report = {"final_loss": rep.final_loss, "num_parameters": model.num_parameters}
    else:
        model = Mlp.init([ds.dim, *net["hidden"], ds.num_classes], seed=init_seed)
        rep = train_classifier(model, ds.inputs, ds.labels, net["epochs"], net["lr"], train_seed,
                               batch_size=net["batch_size"])
        report = {"final_loss": rep.final_loss, "num_parameters": model.num_parameters,
                  "train_acc": _accuracy(predict_labels(model, ds.inputs), ds.labels)}
    rows = [[k + 1, loss] for k, loss in enumerate(rep.loss_curve)]
    return Outcome(["epoch", "loss"], rows, report, checkpoint=(model, train_seed))


def run_train_denoiser(ctx):
    return _train(ctx, "denoiser")


def run_train_classifier(ctx):
    return _train(ctx, "classifier")


def run_attack(ctx):
    _, clf = _load_models(ctx)
    ds = _eval_data(ctx)
    x, y = ds.inputs, ds.labels
    if ctx.cfg.get("attack") is None:
        raise ConfigError("attack", "required for kind 'attack'")
    xa = _attack(ctx, clf, x, y)
    clean = predict_labels(clf, x)
    adv = predict_labels(clf, xa)
    norms = perturbation_norm(xa, x, ctx.cfg["attack"]["norm"])
    rows = [[i, int(y[i]), int(clean[i]), int(adv[i]), float(norms[i])] for i in range(len(y))]
    report = {"clean_acc": _accuracy(clean, y), "adversarial_acc": _accuracy(adv, y),
              "max_perturbation": float(norms.max())}
    extra = {"adversarial.csv": (io.array_header(ds.dim), io.array_rows(xa, y))}
    return Outcome(["example_id", "label", "clean_pred", "adv_pred", "perturbation_norm"], rows, report, extra)


def run_purify(ctx):
    den, clf = _load_models(ctx)
    ds = _eval_data(ctx)
    x, y = ds.inputs, ds.labels
    src = _attack(ctx, clf, x, y) if ctx.cfg.get("attack") is not None else x
    pcfg = _purify_config(ctx.cfg["purify"])
    schedule = _schedule(ctx.cfg)
    out, per = _purify(ctx, den, schedule, src, pcfg)
    ctx.timings["seconds_per_purification"] = per
    before = predict_labels(clf, src)
    after = predict_labels(clf, out)
    change = np.linalg.norm(out - src, axis=1)
    rows = [[i, int(y[i]), int(before[i]), int(after[i]), float(change[i])] for i in range(len(y))]
    report = {"input_acc": _accuracy(before, y), "purified_acc": _accuracy(after, y)}
    extra = {"purified.csv": (io.array_header(ds.dim), io.array_rows(out, y))}
    if pcfg.guided:
        trace = _trace_first(ctx, den, schedule, src, pcfg)
        extra["trace.csv"] = (["t", "scale", "distance", "shift_norm"], trace.rows())
    return Outcome(["example_id", "label", "input_pred", "purified_pred", "l2_change"], rows, report, extra)


def evaluate(ctx, den, clf, schedule, ds, pcfg: PurifyConfig | None, x_adv=None) -> EvalReport:
    """Standard and robust accuracy of ``classify(purify(.))``; robust only when ``x_adv`` is given."""
    x, y = ds.inputs, ds.labels
    baseline = predict_labels(clf, x)
    per = None
    if pcfg is None:
        clean_pred = baseline
        adv_pred = None if x_adv is None else predict_labels(clf, x_adv)
    else:
        xp, per = _purify(ctx, den, schedule, x, pcfg, "purify-clean")
        clean_pred = predict_labels(clf, xp)
        adv_pred = None
        if x_adv is not None:
            xq, per_adv = _purify(ctx, den, schedule, x_adv, pcfg, "purify-adv")
            adv_pred = predict_labels(clf, xq)
            per = 0.5 * (per + per_adv)
    rows = []
    for i in range(len(y)):
        row = {"example_id": i, "label": int(y[i]), "baseline_correct": bool(baseline[i] == y[i]),
               "clean_correct": bool(clean_pred[i] == y[i])}
        if adv_pred is not None:
            row["robust_correct"] = bool(adv_pred[i] == y[i])
        rows.append(row)
    robust = None if adv_pred is None else _accuracy(adv_pred, y)
    return EvalReport(_accuracy(clean_pred, y), robust, rows, per, config_hash(ctx.cfg),
                      baseline_standard_acc=_accuracy(baseline, y))


def run_evaluate(ctx):
    den, clf = _load_models(ctx)
    ds = _eval_data(ctx)
    pcfg = None if ctx.cfg.get("purify") is None else _purify_config(ctx.cfg["purify"])
    x_adv = _attack(ctx, clf, ds.inputs, ds.labels) if ctx.cfg.get("attack") is not None else None
    rep = evaluate(ctx, den, clf, _schedule(ctx.cfg), ds, pcfg, x_adv)
    ctx.timings["seconds_per_purification"] = rep.seconds_per_purification
    header = ["example_id", "label", "baseline_correct", "clean_correct"]
    if rep.robust_acc is not None:
        header.append("robust_correct")
    summary = rep.summary()
    summary.pop("seconds_per_purification")
    return Outcome(header, rep.rows, summary)


def run_certify(ctx):
    den, clf = _load_models(ctx)
    ds = _eval_data(ctx)
    c = ctx.cfg["certify"]
    pcfg = _purify_config(ctx.cfg["purify"] or {"T": ctx.cfg["schedule"]["T"]}, guided=False)
    pipe = SmoothedPipeline(den, clf, _schedule(ctx.cfg), pcfg, num_classes=ds.num_classes,
                            batch_size=c["batch_size"])
    seed = ctx.stream_seed("certify")
    probe_seed = ctx.stream_seed("probe")
    probe = c.get("probe")

    def one(i):
        rng = np.random.default_rng([seed, int(i)])
        res = certify(pipe, ds.inputs[i], c["n0"], c["n"], c["alpha"], rng)
        pr = None
        if probe is not None:
            pr = soundness_probe(pipe, ds.inputs[i], res, probe.get("directions", 64),
                                 probe.get("draws", 2000), probe.get("fraction", 0.9),
                                 np.random.default_rng([probe_seed, int(i)]))
        return res, pr

    def work(idx):
        return [one(i) for i in idx]

    results = _parallel(work, len(ds), ctx.threads)
    header = ["example_id", "label", "prediction", "abstain", "pA_lower", "radius"]
    if probe is not None:
        header += ["probe_radius", "probe_flips"]
    rows = []
    for i, (res, pr) in enumerate(results):
        row = [i, int(ds.labels[i]), res.prediction, res.abstained, res.pA_lower, res.radius]
        if probe is not None:
            row += [None, None] if pr is None else [pr.radius, pr.flips]
        rows.append(row)
    correct = np.array([res.prediction == ds.labels[i] for i, (res, _) in enumerate(results)])
    radius = np.array([res.radius for res, _ in results])
    grid = c["radii"]
    # at r = 0 certified accuracy is plain smoothed accuracy (abstentions count as wrong)
    cert_rows = [[r, float(np.mean(correct & ((radius > r) | (r == 0))))] for r in grid]
    certified = int(np.sum([not res.abstained for res, _ in results]))
    report = {"noise_scale": pipe.noise_scale, "certified_examples": certified,
              "certified_accuracy": {str(r): a for r, a in cert_rows}}
    if probe is not None:
        flipped = sum(1 for _, pr in results if pr is not None and pr.flips > 0)
        report["probe_flipped_examples"] = flipped
    extra = {"certified_accuracy.csv": (["radius", "certified_accuracy"], cert_rows)}
    return Outcome(header, rows, report, extra)


def run_bounds(ctx):
    b = ctx.cfg["bounds"]
    if "T_values" in b:
        sched = _schedule(ctx.cfg)
        abars = [float(sched.alpha_bar(t)) for t in b["T_values"]]
        labels = list(b["T_values"])
    else:
        abars = list(b["alpha_bars"])
        labels = [None] * len(abars)
    grid, Ts = [], []
    for eps in b["epsilons"]:
        for r in b["radii"]:
            for ab, T in zip(abars, labels):
                grid.append((eps, r, ab))
                Ts.append(T)
    rows = bound_sweep(grid, n_samples=b["n_samples"], seed=ctx.stream_seed("bounds"), d=b["d"])
    header = ["epsilon", "r", "T", "alpha_bar_T", "paper_bound", "exact", "bad_event_prob",
              "mc_estimate", "ci_lo", "ci_hi", "paper_ge_exact", "exact_ge_ci_lo", "ci_hi_ge_exact"]
    for row, T in zip(rows, Ts):
        row["T"] = T
    report = {
        "points": len(rows),
        "paper_ge_exact_all": all(r["paper_ge_exact"] for r in rows),
        "exact_ge_ci_lo_all": all(r["exact_ge_ci_lo"] for r in rows),
        "ci_hi_ge_exact_all": all(r["ci_hi_ge_exact"] for r in rows),
        "bad_event_ge_exact_all": all(r["bad_event_prob"] >= r["exact"] for r in rows),
    }
    return Outcome(header, rows, report)


def _robust_acc(ctx, den, clf, schedule, ds, x_adv, pcfg):
    xp, _ = _purify(ctx, den, schedule, x_adv, pcfg, "purify-adv")
    return _accuracy(predict_labels(clf, xp), ds.labels)


def _ablation_setup(ctx):
    den, clf = _load_models(ctx)
    ds = _eval_data(ctx)
    x_adv = _attack(ctx, clf, ds.inputs, ds.labels)
    return den, clf, _schedule(ctx.cfg), ds, x_adv


def _non_decreasing(values, jitter):
    return all(b >= a - jitter - 1e-12 for a, b in zip(values, values[1:]))


def run_ablate_start(ctx, setup=None):
    den, clf, sched, ds, x_adv = setup or _ablation_setup(ctx)
    base = ctx.cfg["purify"]
    variants = [
        ("guided-from-noise", dict(guided=True, start_from_noise=True)),
        ("guided-from-adv", dict(guided=True, start_from_noise=False)),
        ("unguided", dict(guided=False)),
    ]
    accs = {name: _robust_acc(ctx, den, clf, sched, ds, x_adv, _purify_config(base, **kw))
            for name, kw in variants}
    rows = [[name, accs[name]] for name, _ in variants]
    verdict = accs["guided-from-noise"] >= accs["guided-from-adv"] >= accs["unguided"]
    return Outcome(["variant", "robust_acc"], rows, {"robust_acc": accs, "verdict": verdict})


def run_ablate_eta(ctx, setup=None):
    den, clf, sched, ds, x_adv = setup or _ablation_setup(ctx)
    ab = ctx.cfg["ablation"]
    etas = sorted(set(ab["etas"]) | set(ab["trend_etas"]))
    accs = {eta: _robust_acc(ctx, den, clf, sched, ds, x_adv, _purify_config(ctx.cfg["purify"], eta=eta))
            for eta in etas}
    trend = [accs[e] for e in sorted(ab["trend_etas"])]
    verdict = _non_decreasing(trend, ab["jitter"])
    rows = [[eta, accs[eta], eta in ab["trend_etas"]] for eta in etas]
    return Outcome(["eta", "robust_acc", "in_trend"], rows,
                   {"robust_acc": {str(k): v for k, v in accs.items()}, "verdict": verdict,
                    "jitter": ab["jitter"]})


def run_ablate_respace(ctx, setup=None):
    den, clf, sched, ds, x_adv = setup or _ablation_setup(ctx)
    ab = ctx.cfg["ablation"]
    T = ctx.cfg["purify"]["T"]
    steps = sorted({s for s in ab["respace_steps"] if s <= T} | {T})
    accs = {S: _robust_acc(ctx, den, clf, sched, ds, x_adv,
                           _purify_config(ctx.cfg["purify"], respace_steps=S)) for S in steps}
    full = accs[T]
    within = {S: abs(accs[S] - full) <= ab["jitter"] + 1e-12 for S in steps}
    collapsed = {S: accs[S] <= full - ab["collapse_drop"] for S in steps}
    # smallest grid point from which every finer grid point stays within the jitter band
    s_star = None
    for S in reversed(steps):
        if not within[S]:
            break
        s_star = S
    moderate_ok = s_star is not None and s_star < T
    collapse = any(collapsed.values())
    rows = [[S, T / S, accs[S], within[S], collapsed[S]] for S in steps]
    report = {"robust_acc": {str(k): v for k, v in accs.items()}, "full_steps_acc": full,
              "s_star": s_star, "collapse_exists": collapse, "moderate_within_jitter": moderate_ok,
              "verdict": bool(collapse and moderate_ok)}
    return Outcome(["steps", "acceleration", "robust_acc", "within_jitter", "collapsed"], rows, report)


def make_context(cfg: dict, seed=None, threads=None) -> Context:
    seed = cfg["seed"] if seed is None else int(seed)
    threads = cfg.get("threads", 1) if threads is None else int(threads)
    return Context(dict(cfg, seed=seed, threads=threads), seed, threads, Path(cfg.get("_base_dir", ".")))


def ablation_suite(cfg: dict, seed=None, threads=None) -> dict:
    """Run the three ablations on one shared attacked set; returns ``{"start"|"eta"|"respace": Outcome}``.

    Each outcome's ``report["verdict"]`` says whether the expected trend held.
    """
    ctx = make_context(cfg, seed, threads)
    setup = _ablation_setup(ctx)
    return {
        "start": run_ablate_start(ctx, setup),
        "eta": run_ablate_eta(ctx, setup),
        "respace": run_ablate_respace(ctx, setup),
    }


EXPERIMENTS = {
    "train-denoiser": run_train_denoiser,
    "train-classifier": run_train_classifier,
    "attack": run_attack,
    "purify": run_purify,
    "evaluate": run_evaluate,
    "certify": run_certify,
    "bounds": run_bounds,
    "ablate-eta": run_ablate_eta,
    "ablate-respace": run_ablate_respace,
    "ablate-start": run_ablate_start,
}


# ---------------------------------------------------------------- entry point

def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def execute(cfg: dict, out_dir, seed: int | None = None, threads: int | None = None):
    """Run one experiment and write its artifacts. Exceptions propagate to the caller."""
    ctx = make_context(cfg, seed, threads)
    cfg = ctx.cfg
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = config_hash(cfg)
    started = _now()
    t0 = time.perf_counter()
    outcome = EXPERIMENTS[cfg["kind"]](ctx)
    elapsed = time.perf_counter() - t0
    files = [io.RESULTS_NAME]
    io.write_csv(out / io.RESULTS_NAME, outcome.header, outcome.rows, digest)
    for name, (header, rows) in outcome.extra_csv.items():
        io.write_csv(out / name, header, rows, digest)
        files.append(name)
    if outcome.checkpoint is not None:
        model, training_seed = outcome.checkpoint
        save_checkpoint(model, out / io.CHECKPOINT_NAME, training_seed)
        files.append(io.CHECKPOINT_NAME)
    manifest = {
        "schema_version": cfg["schema_version"],
        "kind": cfg["kind"],
        "config": {k: v for k, v in cfg.items() if not k.startswith("_")},
        "config_sha1": digest,
        "seeds": {"master": ctx.seed, **ctx.seeds},
        "report": outcome.report,
        "outputs": files,
        "started_at": started,
        "finished_at": _now(),
        "wall_clock_seconds": elapsed,
        "timings": ctx.timings,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    io.write_manifest(out / io.MANIFEST_NAME, manifest)
    return outcome, manifest


def run(cfg: dict, out_dir, seed=None, threads=None, err=None) -> int:
    """:func:`execute` with failures mapped onto exit statuses; messages go to ``err``."""
    import sys

    err = sys.stderr if err is None else err
    try:
        execute(cfg, out_dir, seed, threads)
    except ConfigError as exc:
        print(f"config error: {exc}", file=err)
        return EXIT_SCHEMA
    except MissingCheckpoint as exc:
        print(f"missing checkpoint: {exc}", file=err)
        return EXIT_CHECKPOINT
    except (NumericError, TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=err)
        return EXIT_NUMERIC
    return EXIT_OK
