"""Command-line entry point: ``gridflow <subcommand> [--config FILE] [--set section.key=value]``.

The run configuration is an INI file with the sections ``[run]``, ``[city]``,
``[scenario]``, ``[arch]``, ``[train]`` and ``[paths]``. Every key has a
default, unknown keys are rejected, and ``--set`` overrides win over the
file. Each invocation prints the resolved configuration and root seed and
writes its outputs under ``<run_root>/<config-hash>-<timestamp>/``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import io
import logging
import shutil
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import train as tr
from .formats import FormatError
from .roadmask import compute_masks, read_masks, write_masks
from .synth import MANIFEST_NAME, CitySpec, generate_scenario, read_manifest
from .data import read_movie, split_dataset
from .unet import ArchConfig, ArchitectureError, ModelParams, predict

logger = logging.getLogger("gridflow")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(ValueError):
    pass


# section -> key -> default; types are taken from the defaults
_CITY_KEYS = [f.name for f in dataclasses.fields(CitySpec) if f.name not in ("seed", "seasonal_regime")]
DEFAULTS: dict[str, dict[str, object]] = {
    "run": {"seed": 0},
    "city": {k: getattr(CitySpec(), k) for k in _CITY_KEYS},
    "scenario": {"n_days_first_half": 18, "n_days_second_half": 2},
    "arch": {"depth": 3, "growth": 8, "layers_per_block": 4, "base_channels": 16},
    "train": {
        "learning_rate": 3e-4,
        "pretrain_epochs": 5,
        "finetune_epochs": 1,
        "batch_size": 2,
        "train_stride": 10,
        "val_stride": 1,
        "test_stride": 1,
    },
    "paths": {
        "data_dir": "data",
        "masks": "",  # empty: <data_dir>/<city>.gfmk
        "checkpoint": "",  # empty: <data_dir>/model.gfck
        "run_root": "runs",
    },
}


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration for one invocation."""

    values: dict[str, dict[str, object]]

    @property
    def seed(self) -> int:
        return int(self.values["run"]["seed"])

    def city_spec(self) -> CitySpec:
        return CitySpec(seed=self.seed, **self.values["city"])

    def arch(self) -> ArchConfig:
        return ArchConfig(**self.values["arch"])

    def train_config(self, use_mask: bool = False, use_two_stage: bool = False) -> tr.TrainConfig:
        t = self.values["train"]
        return tr.TrainConfig(
            learning_rate=t["learning_rate"],
            pretrain_epochs=t["pretrain_epochs"],
            finetune_epochs=t["finetune_epochs"],
            batch_size=t["batch_size"],
            seed=self.seed,
            arch=self.arch(),
            use_mask=use_mask,
            use_two_stage=use_two_stage,
        )

    @property
    def data_dir(self) -> Path:
        return Path(str(self.values["paths"]["data_dir"]))

    @property
    def masks_path(self) -> Path:
        p = str(self.values["paths"]["masks"])
        return Path(p) if p else self.data_dir / f"{self.city_spec().city}.gfmk"

    @property
    def checkpoint_path(self) -> Path:
        p = str(self.values["paths"]["checkpoint"])
        return Path(p) if p else self.data_dir / "model.gfck"

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        for section, kv in self.values.items():
            parser[section] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in kv.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:12]


def _coerce(section: str, key: str, raw: str, default: object) -> object:
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    """Merge defaults, the INI file at ``path`` and ``section.key=value`` overrides."""
    values = {s: dict(kv) for s, kv in DEFAULTS.items()}
    pairs: list[tuple[str, str, str]] = []
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser[section].items():
                pairs.append((section, key, raw))
    for item in overrides:
        name, sep, raw = item.partition("=")
        section, dot, key = name.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        pairs.append((section.strip(), key.strip(), raw))
    for section, key, raw in pairs:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        values[section][key] = _coerce(section, key, raw, DEFAULTS[section][key])
    cfg = RunConfig(values)
    try:
        cfg.city_spec().validate()
        cfg.arch().validate()
        cfg.train_config().validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    for key in ("train_stride", "val_stride", "test_stride"):
        if values["train"][key] < 1:
            raise ConfigError(f"[train] {key} must be >= 1")
    return cfg


def make_run_dir(cfg: RunConfig, command: str) -> Path:
    """Create ``<run_root>/<hash>-<timestamp>`` and echo the config into it."""
    root = Path(str(cfg.values["paths"]["run_root"]))
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime())
    base = f"{cfg.digest()}-{stamp}"
    run_dir = root / base
    n = 1
    while run_dir.exists():
        run_dir = root / f"{base}.{n}"
        n += 1
    run_dir.mkdir(parents=True)
    (run_dir / "config.ini").write_text(f"# command: {command}\n" + cfg.to_ini(), encoding="utf-8")
    return run_dir


def _load_data(cfg: RunConfig) -> tr.ScenarioData:
    t = cfg.values["train"]
    return tr.load_scenario(cfg.data_dir, t["train_stride"], t["val_stride"], t["test_stride"])


# ---------------------------------------------------------------------------
# subcommands; each returns None and writes into run_dir


def cmd_generate(cfg: RunConfig, args, run_dir: Path) -> None:
    s = cfg.values["scenario"]
    manifest = generate_scenario(cfg.city_spec(), s["n_days_first_half"], s["n_days_second_half"], cfg.data_dir)
    shutil.copyfile(cfg.data_dir / MANIFEST_NAME, run_dir / MANIFEST_NAME)
    print(f"wrote {len(manifest.records)} movies to {cfg.data_dir}")


def cmd_mask(cfg: RunConfig, args, run_dir: Path) -> None:
    manifest = read_manifest(cfg.data_dir / MANIFEST_NAME)
    splits = split_dataset(manifest.records, regimes=manifest.regimes())
    masks = compute_masks(read_movie(cfg.data_dir / r.filename) for r in splits["train"])
    write_masks(masks, cfg.masks_path)
    write_masks(masks, run_dir / cfg.masks_path.name)
    counts = ", ".join(str(int(m.sum())) for m in masks.masks)
    print(f"wrote {cfg.masks_path} (on-mask pixels per direction: {counts})")


def _save_model(
    params: ModelParams, cfg: RunConfig, run_dir: Path, curves: dict[str, list[float]], out: Optional[str]
) -> None:
    path = Path(out) if out else cfg.checkpoint_path
    path.parent.mkdir(parents=True, exist_ok=True)
    params.save(path)
    params.save(run_dir / "model.gfck")
    (run_dir / "loss_curve.csv").write_text(tr.loss_curve_csv(curves), encoding="utf-8")
    print(f"wrote checkpoint {path}")


def cmd_train(cfg: RunConfig, args, run_dir: Path) -> None:
    data = _load_data(cfg)
    params, curves = tr.train_model(cfg.train_config(use_two_stage=args.two_stage), data)
    _save_model(params, cfg, run_dir, curves, args.out)


def cmd_finetune(cfg: RunConfig, args, run_dir: Path) -> None:
    data = _load_data(cfg)
    result = tr.finetune(cfg.train_config(use_two_stage=True), _checkpoint(cfg, args), data.validation)
    _save_model(result.params, cfg, run_dir, {"finetune": result.losses}, args.out)


def _checkpoint(cfg: RunConfig, args) -> ModelParams:
    src = Path(args.checkpoint) if args.checkpoint else cfg.checkpoint_path
    return ModelParams.load(src, cfg.arch())


def _masks(cfg: RunConfig, args):
    return read_masks(cfg.masks_path) if args.mask else None


def _test_sample(data: tr.ScenarioData, index: int):
    if not 0 <= index < len(data.test):
        raise IndexError(f"sample index {index} out of range for {len(data.test)} test samples")
    return data.test[index]


def cmd_predict(cfg: RunConfig, args, run_dir: Path) -> None:
    data = _load_data(cfg)
    params = _checkpoint(cfg, args)
    sample = _test_sample(data, args.sample)
    pred = predict(params, sample.input, _masks(cfg, args))
    out = run_dir / f"{sample.sample_id}_prediction.npy"
    np.save(out, pred)
    print(f"wrote {out} shape={pred.shape}")


def cmd_evaluate(cfg: RunConfig, args, run_dir: Path) -> None:
    data = _load_data(cfg)
    params = _checkpoint(cfg, args)
    report = tr.evaluate(params, data.test, _masks(cfg, args), cfg.values["train"]["batch_size"])
    (run_dir / "evaluation.csv").write_text(report.to_csv(), encoding="utf-8")
    print(report.to_text(), end="")


def cmd_ablate(cfg: RunConfig, args, run_dir: Path) -> None:
    data = _load_data(cfg)
    table = tr.run_ablation(cfg.train_config(), data)
    (run_dir / "ablation.csv").write_text(table.to_csv(), encoding="utf-8")
    (run_dir / "ablation.txt").write_text(table.to_text(), encoding="utf-8")
    (run_dir / "loss_curve.csv").write_text(table.loss_curve_csv(), encoding="utf-8")
    print(table.to_text(), end="")


def cmd_report(cfg: RunConfig, args, run_dir: Path) -> None:
    data = _load_data(cfg)
    params = _checkpoint(cfg, args)
    sample = _test_sample(data, args.sample)
    paths = tr.emit_visual_report(params, sample, _masks(cfg, args), run_dir / "heatmaps")
    print(f"wrote {len(paths)} heatmaps to {run_dir / 'heatmaps'}")


COMMANDS = {
    "generate": (cmd_generate, "write a synthetic scenario (movies + manifest) to paths.data_dir"),
    "mask": (cmd_mask, "compute road masks from the scenario's training movies"),
    "train": (cmd_train, "pretrain a model (and fine-tune with --two-stage)"),
    "finetune": (cmd_finetune, "fine-tune an existing checkpoint on the validation days"),
    "predict": (cmd_predict, "predict one test sample and save it as .npy"),
    "evaluate": (cmd_evaluate, "test-set MSE per horizon and channel"),
    "ablate": (cmd_ablate, "run the four-row mask / two-stage ablation"),
    "report": (cmd_report, "write ground-truth / prediction / difference heatmaps"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="INI run configuration")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable; wins over the file)",
    )
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="gridflow", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    subs = {name: sub.add_parser(name, parents=[common], help=text, description=text) for name, (_, text) in COMMANDS.items()}

    subs["train"].add_argument("--two-stage", action="store_true", help="fine-tune on the validation days after pretraining")
    for name in ("train", "finetune"):
        subs[name].add_argument("--out", metavar="FILE", help="checkpoint destination (default: paths.checkpoint)")
    for name in ("finetune", "predict", "evaluate", "report"):
        subs[name].add_argument("--checkpoint", metavar="FILE", help="checkpoint to load (default: paths.checkpoint)")
    for name in ("predict", "evaluate", "report"):
        subs[name].add_argument("--mask", action="store_true", help="apply the road masks from paths.masks")
    for name in ("predict", "report"):
        subs[name].add_argument("--sample", type=int, default=0, metavar="N", help="test sample index (default 0)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"gridflow: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    print(f"# gridflow {args.command}  seed={cfg.seed}")
    print(cfg.to_ini(), end="")
    func = COMMANDS[args.command][0]
    try:
        run_dir = make_run_dir(cfg, args.command)
        print(f"# run directory: {run_dir}")
        func(cfg, args, run_dir)
    except (OSError, FormatError, ArchitectureError, ValueError, IndexError, FloatingPointError) as exc:
        print(f"gridflow: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
