"""Flat ``key = value`` run configuration with manifest snapshots.

Unknown keys are rejected, duplicates are errors naming both lines, and CLI
overrides win over file values.  ``resolve_config`` produces a fully
concrete snapshot (every key present, schedule drops made explicit), which
``write_manifest`` persists; feeding a manifest back in as the config file
reproduces the run bitwise.
"""

from __future__ import annotations

from types import SimpleNamespace

from .data import load_cifar10, load_cifar100, load_dataset, gcn_normalize, make_synthetic
from .fusion import FUSION_KINDS
from .graph import build_cfn_cifar, build_generic_cfn, build_plain_cifar_cnn
from .train import TrainConfig


class ConfigError(ValueError):
    pass


MODELS = ("cifar-cnn", "cifar-cfn", "generic")

# Defaults describe the desk-scale run; full_schedule=1 swaps in the full
# CIFAR protocol (lr 0.1, x0.1 drop at 100k iterations, stop at 120k).
DEFAULTS = {
    "model": "cifar-cfn",
    "widths": "96,96,192,192,192,192",
    "pools": "2,4,6",
    "branch_points": "pool2,pool3",
    "fusion": "lc",
    "K": "192",
    "C": "10",
    "seed": "0",
    "lr": "0.05",
    "momentum": "0.9",
    "wd": "0.0001",
    "batch": "100",
    "iters": "600",
    "drops": "",
    "augment": "0",
    "gcn": "1",
    "full_schedule": "0",
    "eval_every": "0",
    "data": "",
    "eval_data": "",
    "init": "he-uniform",
}

_FULL_SCHEDULE = {"lr": "0.1", "drops": "100000", "iters": "120000", "batch": "100"}


def parse_config_file(path):
    """Parse a flat key=value file into a raw string dict."""
    values = {}
    first_line = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(
                    f"{path}:{lineno}: duplicate key {key!r} "
                    f"(first set on line {first_line[key]})")
            values[key] = value
            first_line[key] = lineno
    return values


def resolve_config(file_values=None, overrides=None):
    """Merge defaults < file < overrides into a concrete snapshot."""
    file_values = dict(file_values or {})
    overrides = {k: v for k, v in dict(overrides or {}).items() if v is not None}
    for source in (file_values, overrides):
        for key in source:
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
    resolved = dict(DEFAULTS)
    schedule_flag = overrides.get("full_schedule",
                                  file_values.get("full_schedule",
                                                  resolved["full_schedule"]))
    if _parse_bool("full_schedule", schedule_flag):
        resolved.update(_FULL_SCHEDULE)
        resolved["full_schedule"] = "1"
    resolved.update(file_values)
    resolved.update(overrides)
    if resolved["drops"] == "":
        iters = _parse_int("iters", resolved["iters"], minimum=1)
        resolved["drops"] = str(max(1, (2 * iters) // 3))
    return resolved


def write_manifest(path, resolved):
    with open(path, "w") as fh:
        for key in DEFAULTS:
            fh.write(f"{key} = {resolved[key]}\n")


def _parse_int(key, value, minimum=None):
    try:
        out = int(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected an integer, got {value!r}") from None
    if minimum is not None and out < minimum:
        raise ConfigError(f"key {key!r}: {out} below minimum {minimum}")
    return out


def _parse_float(key, value):
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected a number, got {value!r}") from None


def _parse_bool(key, value):
    if value in ("0", "1"):
        return value == "1"
    raise ConfigError(f"key {key!r}: expected 0 or 1, got {value!r}")


def _parse_int_list(key, value):
    if not value:
        return ()
    return tuple(_parse_int(key, part.strip()) for part in value.split(","))


def _parse_str_list(value):
    if not value:
        return ()
    return tuple(part.strip() for part in value.split(","))


def typed_config(resolved):
    """Convert a resolved snapshot into validated, typed settings."""
    t = SimpleNamespace()
    t.model = resolved["model"]
    if t.model not in MODELS:
        raise ConfigError(f"key 'model': expected one of {MODELS}, got {t.model!r}")
    t.widths = _parse_int_list("widths", resolved["widths"])
    t.pools = _parse_int_list("pools", resolved["pools"])
    t.branch_points = _parse_str_list(resolved["branch_points"])
    t.fusion = resolved["fusion"]
    if t.fusion not in FUSION_KINDS:
        raise ConfigError(f"key 'fusion': expected one of {FUSION_KINDS}, got {t.fusion!r}")
    t.fuse_channels = _parse_int("K", resolved["K"], minimum=1)
    t.num_classes = _parse_int("C", resolved["C"], minimum=2)
    t.seed = _parse_int("seed", resolved["seed"])
    t.lr = _parse_float("lr", resolved["lr"])
    t.momentum = _parse_float("momentum", resolved["momentum"])
    t.wd = _parse_float("wd", resolved["wd"])
    t.batch = _parse_int("batch", resolved["batch"], minimum=1)
    t.iters = _parse_int("iters", resolved["iters"], minimum=1)
    t.drops = _parse_int_list("drops", resolved["drops"])
    t.augment = _parse_bool("augment", resolved["augment"])
    t.gcn = _parse_bool("gcn", resolved["gcn"])
    t.full_schedule = _parse_bool("full_schedule", resolved["full_schedule"])
    t.eval_every = _parse_int("eval_every", resolved["eval_every"], minimum=0)
    t.data = resolved["data"]
    t.eval_data = resolved["eval_data"]
    t.init = resolved["init"]
    if t.init != "he-uniform":
        raise ConfigError(f"key 'init': only 'he-uniform' is implemented, got {t.init!r}")
    return t


def build_graph(t):
    if t.model == "cifar-cnn":
        return build_plain_cifar_cnn(t.num_classes)
    if t.model == "cifar-cfn":
        return build_cfn_cifar(t.num_classes, t.fusion)
    return build_generic_cfn(t.widths, t.pools, t.branch_points,
                             fusion=t.fusion, fuse_channels=t.fuse_channels,
                             num_classes=t.num_classes)


def build_train_config(t):
    return TrainConfig(learning_rate=t.lr, momentum=t.momentum,
                       weight_decay=t.wd, batch_size=t.batch,
                       lr_drops=t.drops, max_iters=t.iters, seed=t.seed,
                       augment=t.augment, eval_every=t.eval_every)


def parse_data_spec(spec):
    """Split a data spec ``kind:detail`` string; see load_data_spec."""
    if not spec:
        raise ConfigError("no data source configured (set the 'data' key)")
    kind, _, detail = spec.partition(":")
    if kind not in ("synth", "cifar10", "cifar100", "container"):
        raise ConfigError(f"unknown data spec kind {kind!r} in {spec!r}")
    return kind, detail


def load_data_spec(spec, split="train", gcn=True):
    """Materialize a dataset from a spec string.

    Forms: ``synth:C,N,H,seed`` generates gratings; ``cifar10:PATH`` /
    ``cifar100:PATH`` read the binary batches for ``split``; and
    ``container:PATH`` loads a saved dataset file.  GCN is applied after
    loading when ``gcn`` is set.
    """
    kind, detail = parse_data_spec(spec)
    if kind == "synth":
        parts = _parse_int_list("data", detail)
        if len(parts) != 4:
            raise ConfigError(f"synth spec needs C,N,H,seed, got {detail!r}")
        ds = make_synthetic(*parts)
    elif kind == "cifar10":
        ds = load_cifar10(detail, split)
    elif kind == "cifar100":
        ds = load_cifar100(detail, split)
    else:
        ds = load_dataset(detail)
    if gcn:
        ds.images = gcn_normalize(ds.images)
    return ds
