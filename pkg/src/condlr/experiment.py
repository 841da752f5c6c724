"""End-to-end runs: training with metrics, comparisons, attacks, audits and the verify suite."""

from __future__ import annotations

import csv
import io
import json
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import conditioning, data, lowrank, verify
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, dump_config
from .errors import ConfigError, NumericalError
from .nn import IDENTITY, Activation, Network, cross_entropy, forward, loss_and_grads
from .robustness import AttackSpec, CondTrace, clean_accuracy, cond_report, robust_accuracy
from .svg import line_chart


def eps_label(eps):
    return f"{eps:g}"


def metrics_header(num_layers, epsilons):
    return (["epoch", "loss", "acc"] + [f"racc_eps_{eps_label(e)}" for e in epsilons]
            + [f"cond_layer_{i + 1}" for i in range(num_layers)] + ["cond_prod", "secs"])


# ----------------------------------------------------------------------------- setup

def load_datasets(cfg):
    if cfg.dataset == "mnist":
        return (data.load_mnist("train", cfg.train_limit, cfg.root),
                data.load_mnist("test", cfg.test_limit, cfg.root))
    ds = data.synth_blobs(cfg.blobs_per_class, cfg.num_classes, cfg.blobs_dim,
                          cfg.blobs_separation, cfg.seed)
    return data.split(ds, 0.2, cfg.data_seed)


def layer_ranks(cfg):
    """Per-layer ranks: explicit, or the largest rank meeting the compression target."""
    variant = cfg.variant
    if variant in ("full", "projected_sgd"):
        return [None] * (len(cfg.widths) - 1)
    if cfg.ranks is not None:
        return list(cfg.ranks)
    return [lowrank.select_rank(n, m, cfg.alpha, name=f"layer {i + 1}")
            for i, (m, n) in enumerate(zip(cfg.widths, cfg.widths[1:]))]


def build_network(cfg):
    """Initialized network for ``cfg``; hidden layers use cfg.activation, the last is linear."""
    variant = lowrank.TrainVariant.parse(cfg.variant, cfg.tau)
    hidden = Activation.parse(cfg.activation)
    rng = np.random.default_rng(cfg.seed)
    ranks = layer_ranks(cfg)
    layers = []
    pairs = list(zip(cfg.widths, cfg.widths[1:]))
    for i, ((m, n), r) in enumerate(zip(pairs, ranks)):
        act = hidden if i < len(pairs) - 1 else IDENTITY
        layers.append(lowrank.build_layer(variant, n, m, r, cfg.init, rng, act, cfg.bias))
    return Network(layers, cfg.widths[-1]), variant


def parameter_summary(net):
    rows = []
    for i, layer in enumerate(net.layers):
        n, m = layer.out_features, layer.in_features
        bias = 0 if layer.bias is None else layer.bias.size
        stored = layer.num_params()
        rows.append({"layer": i + 1, "kind": layer.kind, "shape": [n, m],
                     "rank": getattr(layer, "rank", None), "params": stored,
                     "dense_params": n * m + bias,
                     "compression": 1.0 - (stored - bias) / (n * m)})
    total = sum(r["params"] for r in rows)
    dense = sum(r["dense_params"] for r in rows)
    return rows, total, dense


# ----------------------------------------------------------------------------- training

@dataclass
class RunResult:
    config: TrainConfig
    net: Network
    rows: list
    summary: dict
    trace: CondTrace = field(default_factory=CondTrace)


def evaluate(net, train, test, spec):
    logits = forward(net, train.features)[0]
    loss = cross_entropy(logits, train.labels)[0]
    report = robust_accuracy(net, test, spec)
    return loss, clean_accuracy(net, test), report


def _check_finite(loss, net):
    if not math.isfinite(loss):
        raise NumericalError("training loss became non-finite")
    for layer in net.layers:
        for name in ("W", "U", "S", "V", "bias"):
            arr = getattr(layer, name, None)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise NumericalError(f"non-finite entries in {name} after a training step")


def run_train(cfg, on_step=None, datasets=None, write=True, log=None):
    """Train one configuration; returns a RunResult and optionally writes
    metrics.csv, summary.json, config.ini and checkpoint.npz into cfg.out_dir.

    ``on_step(epoch, step_index, net)`` is called after every optimizer step.
    If a step produces non-finite values the run restarts from scratch with
    the learning rate multiplied by ``cfg.backoff``, at most
    ``cfg.divergence_retries`` times; the rate actually used is in the summary.
    """
    datasets = datasets or load_datasets(cfg)
    lr, failures = cfg.lr, []
    for attempt in range(cfg.divergence_retries + 1):
        try:
            result = _train_once(cfg.replace(lr=lr), on_step, datasets, log)
            break
        except NumericalError as exc:
            failures.append({"lr": lr, "error": str(exc)})
            if attempt == cfg.divergence_retries:
                raise
            if log:
                log(f"diverged at lr {lr:g} ({exc}); restarting with lr {lr * cfg.backoff:g}")
            lr *= cfg.backoff
    result.config = cfg
    result.summary.update(lr_requested=cfg.lr, lr_used=lr, diverged_attempts=failures)
    if write:
        write_run(result)
    return result


def _train_once(cfg, on_step, datasets, log):
    train, test = datasets
    if train.dim != cfg.widths[0] or train.num_classes != cfg.widths[-1]:
        raise ConfigError(f"widths {cfg.widths} do not fit data with {train.dim} features "
                          f"and {train.num_classes} classes")
    net, variant = build_network(cfg)
    spec = AttackSpec(cfg.epsilons)
    opts = [lowrank.OptState(cfg.lr, cfg.momentum) for _ in net.layers]
    plan = data.BatchPlan(cfg.batch_size, cfg.data_seed)
    trace = CondTrace()
    rows = []
    header = metrics_header(len(net.layers), spec.epsilons)
    clock = time.perf_counter()

    def record(epoch):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            loss, acc, report = evaluate(net, train, test, spec)
        conds = cond_report(net)
        trace.record(epoch, conds)
        secs = time.perf_counter() - clock if cfg.timing else 0.0
        row = [epoch, loss, acc, *report.accuracy, *conds.per_layer, conds.product, secs]
        rows.append(dict(zip(header, row)))
        if log:
            log(f"epoch {epoch:3d}  loss {loss:.4f}  acc {acc:.4f}  "
                f"racc@{eps_label(spec.epsilons[-1])} {report.accuracy[-1]:.4f}  "
                f"cond_prod {conds.product:.4g}")
        return report

    report = record(0)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        for opt in opts:
            opt.lr = lr
        for k, (X, y) in enumerate(data.batches(train, plan, epoch)):
            # Overflow shows up as non-finite values, which _check_finite reports.
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads, _ = loss_and_grads(net, X, y)
                for layer, grad, opt in zip(net.layers, grads, opts):
                    lowrank.step(layer, grad.weight, opt, variant, grad.bias)
            _check_finite(loss, net)
            if on_step is not None:
                on_step(epoch, k, net)
        report = record(epoch)

    params, total, dense = parameter_summary(net)
    last = rows[-1]
    summary = {
        "variant": variant.label, "tau": cfg.tau if variant.tag == "condlr" else None,
        "init": cfg.init, "epochs": cfg.epochs, "ranks": layer_ranks(cfg),
        "alpha_requested": cfg.alpha if variant.tag not in ("full", "projected_sgd") else None,
        "layers": params, "params_total": total, "params_dense": dense,
        "compression_total": 1.0 - total / dense,
        "final_loss": last["loss"], "final_clean_acc": last["acc"],
        "final_robust_acc": report.as_dict(),
        "final_cond_layers": [last[f"cond_layer_{i + 1}"] for i in range(len(net.layers))],
        "final_cond_prod": last["cond_prod"], "max_cond_prod": max(trace.products),
        "ridge_hits": sum(getattr(layer, "ridge_hits", 0) for layer in net.layers),
    }
    return RunResult(cfg, net, rows, summary, trace)


def _format(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(rows[0]))
    for row in rows:
        writer.writerow([_format(v) for v in row.values()])
    return buf.getvalue()


def write_run(result):
    out = Path(result.config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(result.rows))
    (out / "summary.json").write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    (out / "config.ini").write_text(dump_config(result.config))
    save_checkpoint(result.net, out / "checkpoint.npz",
                    extra={"variant": result.summary["variant"], "widths": list(result.config.widths)})


# ----------------------------------------------------------------------------- compare

def run_compare(configs, out_dir, labels=None, log=None):
    """Train several configurations on shared data; write compare.csv and SVG charts."""
    if not configs:
        raise ConfigError("nothing to compare")
    first = configs[0]
    for cfg in configs[1:]:
        if cfg.widths != first.widths or cfg.epsilons != first.epsilons:
            raise ConfigError("compared runs must share the architecture and attack budgets")
        if (cfg.dataset, cfg.train_limit, cfg.test_limit, cfg.root) != (
                first.dataset, first.train_limit, first.test_limit, first.root):
            raise ConfigError("compared runs must share the dataset")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets = load_datasets(first)
    labels = labels or [f"{cfg.variant}" + (f"-tau{cfg.tau:g}" if cfg.variant == "condlr" else "")
                        for cfg in configs]
    if len(set(labels)) != len(labels):
        labels = [f"{lab}-{i}" for i, lab in enumerate(labels)]
    results = {}
    for label, cfg in zip(labels, configs):
        if log:
            log(f"== {label}")
        cfg = cfg.replace(out_dir=str(out / label))
        results[label] = run_train(cfg, datasets=datasets, log=log)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = list(next(iter(results.values())).rows[0])
    writer.writerow(["run"] + header)
    for label, res in results.items():
        for row in res.rows:
            writer.writerow([label] + [_format(row[h]) for h in header])
    (out / "compare.csv").write_text(buf.getvalue())
    write_compare_charts(results, out)
    return results


def write_compare_charts(results, out):
    def series(key):
        return {lab: ([r["epoch"] for r in res.rows], [r[key] for r in res.rows])
                for lab, res in results.items()}

    (out / "cond_vs_epoch.svg").write_text(
        line_chart(series("cond_prod"), "Product of layer condition numbers", "epoch",
                   "prod cond2(W_i)", logy=True))
    (out / "loss_vs_epoch.svg").write_text(
        line_chart(series("loss"), "Training loss", "epoch", "loss"))
    (out / "acc_vs_epoch.svg").write_text(
        line_chart(series("acc"), "Clean test accuracy", "epoch", "accuracy"))
    racc = {}
    for lab, res in results.items():
        eps = list(res.config.epsilons)
        racc[lab] = (eps, [res.rows[-1][f"racc_eps_{eps_label(e)}"] for e in eps])
    (out / "racc_vs_eps.svg").write_text(
        line_chart(racc, "Robust accuracy under FGSM (final epoch)", "epsilon", "accuracy"))


# ----------------------------------------------------------------------------- attack / audit

def run_attack(checkpoint, dataset, epsilons):
    net, _ = load_checkpoint(checkpoint)
    return robust_accuracy(net, dataset, AttackSpec(tuple(epsilons)))


@dataclass
class AuditReport:
    rows: list
    bound: float | None
    bound_applies: bool
    empirical_max: float | None
    num_points: int

    def csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        keys = ["layer", "kind", "shape", "rank", "cond2", "activation", "act_const", "cumulative_bound"]
        writer.writerow(keys)
        for row in self.rows:
            writer.writerow([_format(row[k]) for k in keys])
        return buf.getvalue()

    def text(self):
        lines = [f"{'layer':>5} {'kind':>10} {'shape':>10} {'rank':>5} {'cond2':>10} "
                 f"{'activation':>20} {'C':>8} {'bound':>12}"]
        for row in self.rows:
            lines.append(f"{row['layer']:>5} {row['kind']:>10} {row['shape']:>10} "
                         f"{str(row['rank']):>5} {row['cond2']:>10.5g} {row['activation']:>20} "
                         f"{_short(row['act_const']):>8} {_short(row['cumulative_bound']):>12}")
        lines.append(f"network bound: {_short(self.bound) if self.bound else 'unbounded'}")
        if self.empirical_max is not None:
            lines.append(f"largest sampled local condition number over {self.num_points} points: "
                         f"{self.empirical_max:.5g}")
            if not self.bound_applies:
                lines.append("note: the layerwise product is guaranteed only for square invertible "
                             "linear layers or scalar chains; the comparison is informational")
        return "\n".join(lines) + "\n"


def _short(v):
    if isinstance(v, str):
        return v
    return f"{v:.5g}"


def run_audit(checkpoint, points=None, num_dirs=20, epsilon=1e-5, seed=0):
    """Per-layer cond2, activation constants and the cumulative network bound.

    With ``points`` (an array of inputs), the sampled local condition number
    of the whole network is reported next to the bound.
    """
    net, _ = load_checkpoint(checkpoint) if not isinstance(checkpoint, Network) else (checkpoint, {})
    conds = cond_report(net)
    rows, log_bound, bounded = [], 0.0, True
    for i, (layer, c) in enumerate(zip(net.layers, conds.per_layer)):
        try:
            const = conditioning.activation_cond_closed_form(layer.activation).value
        except conditioning.UnboundedConstantError:
            const, bounded = "unbounded", False
        if bounded:
            log_bound += math.log(c) + math.log(const)
        rows.append({"layer": i + 1, "kind": layer.kind,
                     "shape": f"{layer.out_features}x{layer.in_features}",
                     "rank": getattr(layer, "rank", None), "cond2": c,
                     "activation": layer.activation.tag, "act_const": const,
                     "cumulative_bound": math.exp(log_bound) if bounded else "unbounded"})
    bound = math.exp(log_bound) if bounded else None
    emp = None
    count = 0
    if points is not None:
        f = conditioning.net_function(net)
        ests = []
        for k, x in enumerate(np.asarray(points)):
            if np.linalg.norm(x) == 0 or np.linalg.norm(f(x)) == 0:
                continue
            ests.append(conditioning.empirical_cond_at(f, x, epsilon, num_dirs, seed + k).estimate)
        count = len(ests)
        emp = max(ests) if ests else None
    return AuditReport(rows, bound, conditioning.bound_applies(net), emp, count)


# ----------------------------------------------------------------------------- verify

SUITES = ("constants", "composition", "curvature", "theorem2", "gradients", "tangent")
CHECKED_ACTIVATIONS = ("leaky_relu(0.01)", "leaky_relu(0.5)", "leaky_relu(2)", "tanh", "hardtanh(1)",
                       "sigmoid", "softplus", "silu")


@dataclass(frozen=True)
class CheckResult:
    suite: str
    name: str
    value: float
    threshold: float
    status: str  # pass | fail | not_certified | report

    @property
    def failed(self):
        return self.status == "fail"


def _check(suite, name, value, threshold, ok):
    return CheckResult(suite, name, float(value), float(threshold), "pass" if ok else "fail")


def verify_constants():
    out = []
    for tag in CHECKED_ACTIVATIONS:
        act = Activation.parse(tag)
        closed = conditioning.activation_cond_closed_form(act)
        emp = conditioning.activation_cond_empirical(act).value
        # One-sided: the sampled sup never exceeds a valid closed form.
        out.append(_check("constants", f"{tag} sampled<=closed", emp, closed.value,
                          emp <= closed.value + 1e-6))
        if closed.tight:
            gap = abs(closed.value - emp)
            out.append(_check("constants", f"{tag} |closed-sampled|", gap, 1e-3, gap <= 1e-3))
        else:
            out.append(CheckResult("constants", f"{tag} closed-sampled (loose bound)",
                                   closed.value - emp, 0.0, "report"))
    return out


def verify_composition(trials=20, seed=0):
    """Pointwise composition: cond(phi o psi; x) <= cond(phi; psi(x)) cond(psi; x)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(trials):
        psi = conditioning.single_layer(rng.standard_normal((4, 4)), Activation("tanh"),
                                        rng.standard_normal(4) * 0.1)
        phi = conditioning.single_layer(rng.standard_normal((3, 4)), Activation("leaky_relu", 0.5))
        x = rng.standard_normal(4)
        inner = conditioning.net_function(psi)(x)
        lhs = conditioning.jacobian_cond_at(conditioning.compose(phi, psi), x)
        rhs = conditioning.jacobian_cond_at(phi, inner) * conditioning.jacobian_cond_at(psi, x)
        worst = max(worst, lhs / rhs)
    return [_check("composition", "max cond(phi o psi)/(cond(phi) cond(psi))", worst, 1.0,
                   worst <= 1.0 + 1e-9)]


def verify_curvature(seed=0):
    rows = verify.curvature_check(seed=seed)
    out = [CheckResult("curvature", f"rho at s_min={row.s_min:g}", row.rho_median, 0.0, "report")
           for row in rows]
    spread = verify.curvature_spread(rows)
    out.append(_check("curvature", "spread of rho*s_min", spread, 10.0, spread <= 10.0))
    return out


def verify_theorem2(seeds=range(5), lam=None):
    out = []
    worst = 0.0
    for seed in seeds:
        res = verify.theorem2_check(verify.TheoremCheckSpec(seed=seed, lam=lam))
        if not res.certified:
            out.append(CheckResult("theorem2", f"seed {seed} ({res.notes[0]})",
                                   res.max_error, res.bound, "not_certified"))
            continue
        worst = max(worst, float(np.max(res.errors[1:] / res.bounds[1:])))
        out.append(_check("theorem2", f"seed {seed} max error vs 3 t eta", res.max_error,
                          res.bound, res.passed))
    control = verify.theorem2_check(verify.TheoremCheckSpec(seed=0, eta=0.0, lam=5.0))
    out.append(_check("theorem2", "eta=0 tracking error", control.max_error, 1e-8,
                      control.max_error <= 1e-8))
    if worst:
        out.append(CheckResult("theorem2", "worst error/bound ratio", worst, 1.0, "report"))
    return out


def verify_gradients(seeds=range(5)):
    worst = np.zeros(4)
    for seed in seeds:
        worst = np.maximum(worst, [*verify.finite_difference_check(seed),
                                   verify.factor_gradient_check(seed)])
    names = ("weight", "bias", "input", "factor")
    return [_check("gradients", f"{n} vs central differences", w, 1e-4, w <= 1e-4)
            for n, w in zip(names, worst)]


def verify_tangent(seeds=range(5)):
    worst = max(verify.tangent_bridge_check(seed, tau=tau) for seed in seeds for tau in (0.0, 0.1, 0.5))
    return [_check("tangent", "flow fields vs tangent projector", worst, 1e-10, worst <= 1e-10)]


_RUNNERS = {"constants": verify_constants, "composition": verify_composition,
            "curvature": verify_curvature, "theorem2": verify_theorem2,
            "gradients": verify_gradients, "tangent": verify_tangent}


def run_verify(suites=SUITES, lam=None):
    results = []
    for suite in suites:
        if suite not in _RUNNERS:
            raise ConfigError(f"unknown verify suite {suite!r}; choose from {', '.join(SUITES)}")
        results += _RUNNERS[suite](lam=lam) if suite == "theorem2" else _RUNNERS[suite]()
    return results


def verify_csv(results):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["suite", "check", "value", "threshold", "status"])
    for r in results:
        writer.writerow([r.suite, r.name, repr(r.value), repr(r.threshold), r.status])
    return buf.getvalue()
