"""Experiment front door: flat-file manifests, the train -> score -> evaluate
pipeline, and CSV/SVG artifact emission.

Manifests are `key = value` files with `#` comments and dotted section
prefixes (train.alpha, data.kind, mixup.alpha, ...).  Every command writes
its artifacts under <out>/<hash>/ where <hash> keys the canonical manifest
text, so reruns with unchanged inputs land on byte-identical files and never
mutate their inputs.  VRL_DETERMINISTIC=1 forces single-worker execution and
zeroes wall-clock fields.
"""

import argparse
import concurrent.futures
import csv
import hashlib
import io
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .datagen import (
    CorruptionSpec,
    Dataset,
    apply_normalizer,
    corrupt,
    fit_normalizer,
    load_cifar_binary,
    load_csv,
    make_blob,
    make_gaussian_blobs,
    make_two_moons,
    make_uniform_box,
    split,
)
from .evalkit import (
    BinningSpec,
    adaece,
    apply_temperature,
    auroc,
    barrier_statistic,
    ece,
    entropy_profile,
    fisher_criterion,
    fit_temperature,
    heatmap_svg,
    reliability_svg,
)
from .tensor import RngState
from .trainer import (
    STRATEGIES,
    ExperimentRecord,
    TrainConfig,
    accuracy_from_logits,
    deterministic_mode,
    train,
)
from .uncertainty import (
    ds_score,
    energy_score,
    entropy_score,
    fit_class_gaussians,
    mahalanobis_score,
    mps_score,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_MISSING_INPUT = 2
EXIT_SCHEMA = 3
EXIT_INCOMPATIBLE = 4


class ManifestError(Exception):
    """Config file missing keys or holding out-of-schema values."""


class MissingInputError(Exception):
    """A required input file or prior artifact does not exist."""


class IncompatibleError(Exception):
    """Checkpoint and dataset shapes do not line up."""


def parse_config(text: str) -> dict:
    """Parse `key = value` lines; `#` starts a comment."""
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ManifestError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ManifestError(f"line {lineno}: empty key")
        cfg[key] = value.strip()
    return cfg


@dataclass
class RunManifest:
    """One experiment: dataset recipe, strategy grid, seeds, output root."""

    config: dict
    out_dir: Path
    seeds: list
    strategies: list

    def __post_init__(self):
        if not self.seeds:
            raise ManifestError("need at least one seed")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ManifestError(f"unknown strategy {s!r}")

    def canonical_text(self) -> str:
        keyed = dict(self.config)
        keyed["seeds"] = ",".join(str(s) for s in self.seeds)
        keyed["strategies"] = ",".join(self.strategies)
        return "".join(f"{k} = {keyed[k]}\n" for k in sorted(keyed))

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:12]

    def run_dir(self) -> Path:
        return self.out_dir / self.content_hash()


def _get(cfg, key, default=None, required=False):
    if key in cfg:
        return cfg[key]
    if required:
        raise ManifestError(f"missing required key {key!r}")
    return default


def _get_float(cfg, key, default=None, required=False):
    v = _get(cfg, key, default, required)
    if v is None:
        return None
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ManifestError(f"key {key!r}: expected a number, got {v!r}")


def _get_int(cfg, key, default=None, required=False):
    v = _get(cfg, key, default, required)
    if v is None:
        return None
    try:
        return int(v)
    except (TypeError, ValueError):
        raise ManifestError(f"key {key!r}: expected an integer, got {v!r}")


def _get_floats(cfg, key, default=None):
    v = _get(cfg, key, default)
    if v is None:
        return None
    if isinstance(v, str):
        return [float(p) for p in v.split(",") if p.strip()]
    return list(v)


def load_manifest(config_path, out_override=None, seeds_override=None) -> RunManifest:
    path = Path(config_path)
    if not path.exists():
        raise MissingInputError(f"config file not found: {path}")
    cfg = parse_config(path.read_text())
    out_dir = Path(out_override) if out_override else Path(_get(cfg, "out", "runs"))
    cfg.pop("out", None)  # output location never participates in the hash
    if seeds_override is not None:
        seeds = list(range(int(seeds_override)))
    else:
        seeds = [int(s) for s in _get(cfg, "seeds", "0,1,2,3,4").split(",") if s.strip()]
    strategies = [
        s.strip() for s in _get(cfg, "strategies", required=True).split(",") if s.strip()
    ]
    return RunManifest(cfg, out_dir, seeds, strategies)


def train_config_for(manifest: RunManifest, strategy: str, seed: int) -> TrainConfig:
    """Resolve train.* defaults with per-strategy overrides (mixup.alpha etc.)."""
    cfg = manifest.config

    def opt(name, default=None):
        return _get(cfg, f"{strategy}.{name}", _get(cfg, f"train.{name}", default))

    hidden = opt("hidden", "32,32")
    try:
        return TrainConfig(
            strategy=strategy,
            hidden_dims=tuple(int(h) for h in str(hidden).split(",") if h.strip()),
            activation=opt("activation", "relu"),
            alpha=_maybe_float(opt("alpha")),
            eta=_maybe_float(opt("eta")),
            epochs=int(opt("epochs", 40)),
            batch_size=int(opt("batch_size", 64)),
            learning_rate=float(opt("lr", 0.1)),
            momentum=float(opt("momentum", 0.9)),
            weight_decay=float(opt("weight_decay", 5e-4)),
            schedule=opt("schedule", "cosine"),
            seed=seed,
            lambda_mode=opt("lambda_mode", "per_batch"),
        )
    except ValueError as err:
        raise ManifestError(str(err))


def _maybe_float(v):
    return None if v in (None, "", "none") else float(v)


def _base_dataset(cfg) -> Dataset:
    kind = _get(cfg, "data.kind", required=True)
    seed = _get_int(cfg, "data.seed", 12345)
    rng = RngState(seed).split(100)
    if kind == "moons":
        return make_two_moons(
            _get_int(cfg, "data.n", 1000), _get_float(cfg, "data.noise_sd", 0.1), rng
        )
    if kind == "blobs":
        return make_gaussian_blobs(
            _get_int(cfg, "data.n", 1000),
            _get_int(cfg, "data.k", 3),
            _get_float(cfg, "data.separation", 8.0),
            rng,
            noise_sd=_get_float(cfg, "data.noise_sd", 1.0),
        )
    if kind == "csv":
        path = Path(_get(cfg, "data.path", required=True))
        if not path.exists():
            raise MissingInputError(f"dataset file not found: {path}")
        return load_csv(path)
    if kind == "cifar":
        path = Path(_get(cfg, "data.path", required=True))
        if not path.exists():
            raise MissingInputError(f"dataset file not found: {path}")
        return load_cifar_binary(
            path, max_per_class=_get_int(cfg, "data.max_per_class"), normalize=False
        )
    raise ManifestError(f"unknown data.kind {kind!r}")


def _ood_dataset(cfg, d: int) -> Dataset | None:
    kind = _get(cfg, "ood.kind", "none")
    if kind == "none":
        return None
    seed = _get_int(cfg, "data.seed", 12345)
    rng = RngState(seed).split(200)
    n = _get_int(cfg, "ood.n", 400)
    if kind == "blob":
        center = _get_floats(cfg, "ood.center", ",".join(["30.0"] * d))
        if len(center) != d:
            raise ManifestError("ood.center dimension does not match the data")
        return make_blob(n, center, _get_float(cfg, "ood.noise_sd", 1.0), rng, name="ood_blob")
    if kind == "uniform_box":
        low = _get_floats(cfg, "ood.low", ",".join(["-20.0"] * d))
        high = _get_floats(cfg, "ood.high", ",".join(["20.0"] * d))
        if len(low) != d or len(high) != d:
            raise ManifestError("ood.low/high dimension does not match the data")
        return make_uniform_box(n, low, high, rng, name="ood_box")
    raise ManifestError(f"unknown ood.kind {kind!r}")


def parse_corruptions(value: str) -> list:
    """'gaussian_noise:1-5,rotation2d:3' -> list of CorruptionSpec."""
    specs = []
    for part in value.split(","):
        part = part.strip()
        if not part:
            continue
        kind, _, levels = part.partition(":")
        if not levels:
            raise ManifestError(f"corruption {part!r} needs kind:levels")
        if "-" in levels:
            lo, _, hi = levels.partition("-")
            rng = range(int(lo), int(hi) + 1)
        else:
            rng = [int(levels)]
        for level in rng:
            try:
                specs.append(CorruptionSpec(kind, level))
            except ValueError as err:
                raise ManifestError(str(err))
    return specs


@dataclass
class Pipeline:
    """Datasets of one experiment, normalized by train-split statistics."""

    train: Dataset
    val: Dataset
    test: Dataset
    ood: Dataset | None
    corrupted: list  # [(CorruptionSpec, Dataset)]


def build_pipeline(manifest: RunManifest) -> Pipeline:
    cfg = manifest.config
    base = _base_dataset(cfg)
    seed = _get_int(cfg, "data.seed", 12345)
    test_frac = _get_float(cfg, "data.test_frac", 0.25)
    val_frac = _get_float(cfg, "data.val_frac", 0.1)
    pool, test_raw = split(
        base, 1.0 - test_frac, stratified=True, rng=RngState(seed).split(101)
    )
    train_raw, val_raw = split(
        pool, 1.0 - val_frac, stratified=True, rng=RngState(seed).split(102)
    )
    stats = fit_normalizer(train_raw)
    corrupted = []
    corr_value = _get(cfg, "corruptions", "")
    if corr_value:
        for i, spec in enumerate(parse_corruptions(corr_value)):
            raw = corrupt(test_raw, spec, RngState(seed).split(103, i))
            corrupted.append((spec, apply_normalizer(raw, stats)))
    ood_raw = _ood_dataset(cfg, base.d)
    return Pipeline(
        train=apply_normalizer(train_raw, stats),
        val=apply_normalizer(val_raw, stats),
        test=apply_normalizer(test_raw, stats),
        ood=apply_normalizer(ood_raw, stats) if ood_raw is not None else None,
        corrupted=corrupted,
    )


def _record_path(run_dir: Path, strategy: str, seed: int) -> Path:
    return run_dir / "records" / f"{strategy}_seed{seed}.record"


def _ckpt_path(run_dir: Path, strategy: str, seed: int) -> Path:
    return run_dir / "checkpoints" / f"{strategy}_seed{seed}.ckpt"


def _train_job(payload):
    strategy, seed, config, train_ds, val_ds = payload
    net, record = train(config, train_ds, val_ds)
    return strategy, seed, net, record


def load_records(manifest: RunManifest) -> list:
    """All (strategy, seed, record) triples for the manifest, sorted."""
    run_dir = manifest.run_dir()
    out = []
    for strategy in sorted(manifest.strategies):
        for seed in sorted(manifest.seeds):
            path = _record_path(run_dir, strategy, seed)
            if not path.exists():
                raise MissingInputError(
                    f"record not found (run `vrl train` first): {path}"
                )
            out.append((strategy, seed, ExperimentRecord.from_text(path.read_text())))
    return out


def _load_net(manifest: RunManifest, strategy: str, seed: int, expect_dim: int) -> nn.Network:
    path = _ckpt_path(manifest.run_dir(), strategy, seed)
    if not path.exists():
        raise MissingInputError(f"checkpoint not found: {path}")
    net = nn.load_checkpoint(path)
    if net.in_dim != expect_dim:
        raise IncompatibleError(
            f"checkpoint expects {net.in_dim} features, dataset has {expect_dim}"
        )
    return net


def write_csv(path: Path, header: list, rows: list):
    """RFC-4180-style CSV with a mandatory header; rows sorted upstream."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="") as f:
        f.write(",".join(header) + "\r\n")
        for row in rows:
            f.write(",".join(_csv_cell(v) for v in row) + "\r\n")


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(float(v))
    s = str(v)
    if any(c in s for c in ',"\r\n'):
        s = '"' + s.replace('"', '""') + '"'
    return s


def cmd_train(manifest: RunManifest, jobs: int = 1) -> Path:
    """Train the full strategy x seed grid and persist records + checkpoints."""
    pipe = build_pipeline(manifest)
    run_dir = manifest.run_dir()
    (run_dir / "records").mkdir(parents=True, exist_ok=True)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "manifest.txt").write_text(manifest.canonical_text())
    payloads = [
        (s, seed, train_config_for(manifest, s, seed), pipe.train, pipe.val)
        for s in sorted(manifest.strategies)
        for seed in sorted(manifest.seeds)
    ]
    if deterministic_mode() or jobs <= 1:
        results = [_train_job(p) for p in payloads]
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_job, payloads))
    for strategy, seed, net, record in sorted(results, key=lambda r: (r[0], r[1])):
        ckpt = _ckpt_path(run_dir, strategy, seed)
        nn.save_checkpoint(net, ckpt)
        record.checkpoint = str(ckpt.relative_to(run_dir))
        _record_path(run_dir, strategy, seed).write_text(record.to_text())
    return run_dir


def cmd_eval(manifest: RunManifest) -> Path:
    """Accuracy on the test split and every corrupted variant."""
    pipe = build_pipeline(manifest)
    rows = []
    for strategy, seed, _ in load_records(manifest):
        net = _load_net(manifest, strategy, seed, pipe.test.d)
        targets = [("test", pipe.test)]
        targets += [(ds.name, ds) for _, ds in pipe.corrupted]
        for name, ds in targets:
            logits, _, _ = nn.forward(net, ds.x)
            rows.append(
                (strategy, seed, name, "accuracy", "-",
                 accuracy_from_logits(logits, ds.labels))
            )
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3], r[4]))
    path = manifest.run_dir() / "eval.csv"
    write_csv(path, ["strategy", "seed", "dataset", "metric", "measure", "value"], rows)
    return path


_LOGIT_MEASURES = (("ds", ds_score), ("energy", energy_score))
_PROB_MEASURES = (("entropy", entropy_score), ("mps_uncertainty", mps_score))


def cmd_ood(manifest: RunManifest) -> Path:
    """AUROC of in-distribution test vs the OOD set, per uncertainty measure."""
    pipe = build_pipeline(manifest)
    if pipe.ood is None:
        raise ManifestError("manifest has no ood.* section")
    rows = []
    for strategy, seed, _ in load_records(manifest):
        net = _load_net(manifest, strategy, seed, pipe.test.d)
        logits_in, feat_in, _ = nn.forward(net, pipe.test.x)
        logits_out, feat_out, _ = nn.forward(net, pipe.ood.x)
        probs_in, probs_out = nn.softmax(logits_in), nn.softmax(logits_out)
        scored = []
        for name, fn in _LOGIT_MEASURES:
            scored.append((name, fn(logits_in), fn(logits_out)))
        for name, fn in _PROB_MEASURES:
            scored.append((name, fn(probs_in), fn(probs_out)))
        logits_tr, feat_tr, _ = nn.forward(net, pipe.train.x)
        gauss = fit_class_gaussians(feat_tr, pipe.train.labels)
        scored.append(
            ("mahalanobis", mahalanobis_score(gauss, feat_in),
             mahalanobis_score(gauss, feat_out))
        )
        for name, s_in, s_out in scored:
            rows.append(
                (strategy, seed, pipe.ood.name, "auroc", name, auroc(s_in, s_out))
            )
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3], r[4]))
    path = manifest.run_dir() / "ood.csv"
    write_csv(path, ["strategy", "seed", "dataset", "metric", "measure", "value"], rows)
    return path


def cmd_calibrate(manifest: RunManifest) -> Path:
    """Fit the temperature on validation logits; report pre/post calibration."""
    pipe = build_pipeline(manifest)
    ew = BinningSpec("equal_width", 15)
    em = BinningSpec("equal_mass", 15)
    run_dir = manifest.run_dir()
    rows = []
    for strategy, seed, _ in load_records(manifest):
        net = _load_net(manifest, strategy, seed, pipe.test.d)
        logits_val, _, _ = nn.forward(net, pipe.val.x)
        logits_test, _, _ = nn.forward(net, pipe.test.x)
        temp = fit_temperature(logits_val, pipe.val.labels, ew)
        pre = nn.softmax(logits_test)
        post = apply_temperature(logits_test, temp)
        reliability_svg(
            post, pipe.test.labels, ew,
            run_dir / f"reliability_{strategy}_seed{seed}.svg",
        )
        for metric, value in (
            ("temperature", temp.T),
            ("ece_pre_t", ece(pre, pipe.test.labels, ew)),
            ("ece_post_t", ece(post, pipe.test.labels, ew)),
            ("adaece_pre_t", adaece(pre, pipe.test.labels, em)),
            ("adaece_post_t", adaece(post, pipe.test.labels, em)),
        ):
            rows.append((strategy, seed, "test", metric, "-", value))
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3], r[4]))
    path = manifest.run_dir() / "calibrate.csv"
    write_csv(path, ["strategy", "seed", "dataset", "metric", "measure", "value"], rows)
    return path


def cmd_heatmap(manifest: RunManifest) -> Path:
    """Entropy-profile heatmap SVG per run, plus a barrier-statistic CSV."""
    pipe = build_pipeline(manifest)
    cfg = manifest.config
    source_name = _get(cfg, "heatmap.source", "train")
    if source_name not in ("train", "test"):
        raise ManifestError("heatmap.source must be train or test")
    source = pipe.train if source_name == "train" else pipe.test
    n_pairs = _get_int(cfg, "heatmap.pairs", 1000)
    run_dir = manifest.run_dir()
    rows = []
    for strategy, seed, _ in load_records(manifest):
        net = _load_net(manifest, strategy, seed, source.d)
        profile = entropy_profile(
            net, source, n_pairs=n_pairs, rng=RngState(seed).split(300)
        )
        heatmap_svg(profile, run_dir / f"heatmap_{strategy}_seed{seed}.svg")
        rows.append(
            (strategy, seed, source.name, "barrier", "-", barrier_statistic(profile))
        )
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3], r[4]))
    path = run_dir / "barrier.csv"
    write_csv(path, ["strategy", "seed", "dataset", "metric", "measure", "value"], rows)
    return path


def cmd_fisher(manifest: RunManifest) -> Path:
    """Fisher criterion of network features per corruption kind x intensity."""
    pipe = build_pipeline(manifest)
    rows = []
    for strategy, seed, _ in load_records(manifest):
        net = _load_net(manifest, strategy, seed, pipe.test.d)
        targets = [("test", pipe.test)]
        targets += [(ds.name, ds) for _, ds in pipe.corrupted]
        for name, ds in targets:
            _, feats, _ = nn.forward(net, ds.x)
            value = fisher_criterion(feats, ds.labels, epsilon=1e-9)
            rows.append((strategy, seed, name, "fisher", "-", value))
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3], r[4]))
    path = manifest.run_dir() / "fisher.csv"
    write_csv(path, ["strategy", "seed", "dataset", "metric", "measure", "value"], rows)
    return path


def cmd_compare(manifests: list) -> list:
    """Aggregate per-seed CSVs into (strategy, dataset, metric) mean +- sd rows."""
    rows = []
    for manifest in manifests:
        run_dir = manifest.run_dir()
        found = False
        groups = {}
        for name in ("eval.csv", "ood.csv", "calibrate.csv", "fisher.csv", "barrier.csv"):
            path = run_dir / name
            if not path.exists():
                continue
            found = True
            reader = csv.reader(io.StringIO(path.read_text()))
            next(reader)  # header
            for strategy, seed, dataset, metric, measure, value in reader:
                groups.setdefault((strategy, dataset, metric, measure), []).append(
                    float(value)
                )
        if not found:
            raise MissingInputError(
                f"no metric CSVs under {run_dir}; run eval/ood/calibrate first"
            )
        for (strategy, dataset, metric, measure), values in sorted(groups.items()):
            arr = np.asarray(values)
            rows.append(
                (manifest.content_hash(), strategy, dataset, metric, measure,
                 float(arr.mean()), float(arr.std()))
            )
    return rows


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vrl",
        description="Train and evaluate ERM / Mixup-family classifiers.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("train", "eval", "ood", "calibrate", "heatmap", "fisher"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seeds", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1)
    p = sub.add_parser("compare")
    p.add_argument("--config", required=True, nargs="+")
    p.add_argument("--out", default=None)
    p.add_argument("--seeds", type=int, default=None)
    p.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args(argv)
    try:
        if args.command == "compare":
            manifests = [
                load_manifest(c, args.out, args.seeds) for c in args.config
            ]
            rows = cmd_compare(manifests)
            combined = hashlib.sha256(
                "".join(m.content_hash() for m in manifests).encode()
            ).hexdigest()[:12]
            path = manifests[0].out_dir / f"compare_{combined}.csv"
            write_csv(
                path,
                ["manifest", "strategy", "dataset", "metric", "measure", "mean", "stddev"],
                rows,
            )
            print(path)
            return EXIT_OK
        manifest = load_manifest(args.config, args.out, args.seeds)
        handler = {
            "train": lambda: cmd_train(manifest, jobs=args.jobs),
            "eval": lambda: cmd_eval(manifest),
            "ood": lambda: cmd_ood(manifest),
            "calibrate": lambda: cmd_calibrate(manifest),
            "heatmap": lambda: cmd_heatmap(manifest),
            "fisher": lambda: cmd_fisher(manifest),
        }[args.command]
        print(handler())
        return EXIT_OK
    except MissingInputError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except ManifestError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_SCHEMA
    except IncompatibleError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INCOMPATIBLE
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
