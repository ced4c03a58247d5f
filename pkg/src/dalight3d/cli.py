"""Command-line entry point: synth, params, train, eval, gradcheck, ablate.

Every command takes its settings from an optional JSON ``--config`` file,
overridden by flags, and writes the effective configuration next to its
outputs. Exit codes: 0 success, 1 validation error, 2 non-finite numerics,
3 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import generate_phantom, load_cases, phantom_rng, scanner_bucket, write_case, zscore_normalize
from .errors import ConfigError, FormatError, NonFiniteError, ShapeError
from .metrics import ConfusionMatrix, accumulate, ece, dice_per_million, metrics_json, per_class
from .model import VARIANTS, DALightModel, ModelConfig, count_params, separable_report, variant_config
from .tensor import Tensor
from .train import TrainConfig, mean_tumor_dice, save_training, train, validation_patches

log = logging.getLogger("dalight3d")

COMMANDS = ("synth", "params", "train", "eval", "gradcheck", "ablate")
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


@dataclass
class RunConfig:
    command: str
    seed: int = 0
    data: str | None = None
    out: str | None = None
    variant: str = "full"
    checkpoint: str | None = None
    n_cases: int = 4
    extents: list[int] = field(default_factory=lambda: [32, 32, 32])
    val_cases: int = 1
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    gradcheck_instances: int = 5
    gradcheck_end_to_end: bool = False

    def validate(self) -> None:
        problems = []
        if self.command not in COMMANDS:
            problems.append(f"command: unknown {self.command!r}")
        if self.variant not in VARIANTS:
            problems.append(f"variant: unknown {self.variant!r}, choose from {sorted(VARIANTS)}")
        if self.n_cases < 0:
            problems.append("n_cases: must be >= 0")
        if len(self.extents) != 3 or min(self.extents, default=0) < 16:
            problems.append("extents: need three values, each >= 16")
        if self.val_cases < 1:
            problems.append("val_cases: must be >= 1")
        if self.gradcheck_instances < 1:
            problems.append("gradcheck_instances: must be >= 1")
        needs = {"synth": ["out"], "train": ["data", "out"], "eval": ["data"], "ablate": ["data", "out"]}
        for name in needs.get(self.command, []):
            if getattr(self, name) is None:
                problems.append(f"{name}: required by {self.command}")
        builders = [("train", self.train_config)]
        if self.variant in VARIANTS:
            builders.insert(0, ("model", self.model_config))
        for sub, build in builders:
            try:
                build()
            except ConfigError as exc:
                problems += [f"{sub}.{p}" for p in exc.problems]
            except TypeError as exc:
                problems.append(f"{sub}: {exc}")
        if problems:
            raise ConfigError(problems)

    def model_config(self) -> ModelConfig:
        cfg = variant_config(self.variant, ModelConfig.from_dict(self.model))
        cfg.validate()
        return cfg

    def train_config(self) -> TrainConfig:
        cfg = TrainConfig.from_dict({**self.train, "seed": self.seed})
        cfg.validate()
        return cfg

    def effective(self) -> dict:
        doc = asdict(self)
        doc["model"] = self.model_config().to_dict()
        doc["train"] = self.train_config().to_dict()
        return doc


def build_config(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if args.config:
        text = Path(args.config).read_text()
        try:
            base = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: not valid JSON ({exc})") from exc
        if not isinstance(base, dict):
            raise ConfigError("config: top level must be an object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(base) - known)
    if unknown:
        raise ConfigError([f"config: unknown field {k!r}" for k in unknown])
    # a saved effective config may be replayed under any command
    base = {k: v for k, v in base.items() if k != "command"}
    base["model"] = dict(base.get("model", {}))
    base["train"] = dict(base.get("train", {}))
    base["train"].pop("seed", None)  # the run seed is the single source
    for flag in ("seed", "data", "out", "variant", "checkpoint"):
        value = getattr(args, flag)
        if value is not None:
            base[flag] = value
    if args.n is not None:
        base["n_cases"] = args.n
    if args.epochs is not None:
        base["train"]["epochs"] = args.epochs
    if args.patch is not None:
        base["train"]["patch"] = args.patch
    cfg = RunConfig(command=args.command, **base)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# output helpers


def _out_dir(cfg: RunConfig) -> Path | None:
    if cfg.out is None:
        return None
    path = Path(cfg.out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_effective(out: Path | None, cfg: RunConfig) -> None:
    if out is not None:
        _write_json(out / "config.json", cfg.effective())


def _cases(cfg: RunConfig, num_buckets: int):
    if not Path(cfg.data).is_dir():
        raise FileNotFoundError(f"data directory not found: {cfg.data}")
    return load_cases(cfg.data, num_buckets)


def _load_split(cfg: RunConfig):
    cases = _cases(cfg, cfg.model_config().num_buckets)
    if len(cases) < cfg.val_cases + 1:
        raise ConfigError(f"data: need at least {cfg.val_cases + 1} cases in {cfg.data}, found {len(cases)}")
    return cases[:-cfg.val_cases], cases[-cfg.val_cases:]


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    entries = []
    for i in range(cfg.n_cases):
        cid = f"case_{i:03d}"
        case = generate_phantom(phantom_rng(cfg.seed, cid), tuple(cfg.extents), cid)
        write_case(out / f"{cid}.dl3d", case)
        entries.append({"id": cid, "bucket": scanner_bucket(cid, 8), "file": f"{cid}.dl3d"})
    _write_json(out / "manifest.json", {"seed": cfg.seed, "extents": list(cfg.extents), "cases": entries})
    _write_effective(out, cfg)
    log.info("wrote %d cases to %s", len(entries), out)
    return EXIT_OK


def params_report(variant: str, base: ModelConfig | None = None) -> dict:
    model = DALightModel(variant_config(variant, base), seed=0)
    counts = count_params(model)
    return {"variant": variant, "total": counts["total"], "per_stage": counts["per_stage"],
            "separable_vs_dense": separable_report(model)}


def cmd_params(cfg: RunConfig) -> int:
    report = params_report(cfg.variant, ModelConfig.from_dict(cfg.model))
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    out = _out_dir(cfg)
    if out is not None:
        (out / "params.json").write_text(text + "\n")
        _write_effective(out, cfg)
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    from .checkpoint import save_checkpoint

    out = _out_dir(cfg)
    _write_effective(out, cfg)
    tcfg = cfg.train_config()
    train_cases, val_cases = _load_split(cfg)
    model = DALightModel(cfg.model_config(), seed=cfg.seed)
    result = train(model, train_cases, val_cases, tcfg)
    (out / "history.csv").write_text(result.history_csv())
    save_training(out / "final.ckpt", model, result, tcfg)
    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    save_checkpoint(out / "best.ckpt", model, extra={"best_val": result.best_val})
    log.info("trained %d epochs; best validation tumor Dice %s", result.epochs_done, result.best_val)
    return EXIT_OK


def _crop8(case):
    # largest centred crop whose extents are divisible by 8
    ext = np.array(case.extents)
    keep = ext - ext % 8
    if (keep < 8).any():
        raise ShapeError(f"case {case.case_id} is smaller than 8 voxels along an axis")
    lo = (ext - keep) // 2
    sl = tuple(slice(a, a + k) for a, k in zip(lo, keep))
    return sl


def evaluate_cases(model: DALightModel, cases) -> tuple[ConfusionMatrix, np.ndarray, np.ndarray]:
    """Whole-volume inference per case; returns the pooled matrix and per-voxel confidence/correctness."""
    cm = ConfusionMatrix.empty(model.cfg.num_classes)
    conf, correct = [], []
    for case in cases:
        sl = _crop8(case)
        image = zscore_normalize(case.image)[(slice(None),) + sl]
        truth = case.labels[sl]
        probs = model(Tensor(image[None]), case.bucket).data[0]
        pred = np.argmax(probs, axis=0)
        cm = accumulate(cm, pred, truth)
        conf.append(probs.max(axis=0).ravel())
        correct.append((pred == truth).ravel())
    return cm, np.concatenate(conf), np.concatenate(correct)


def eval_documents(model: DALightModel, cases) -> dict[str, str]:
    cm, conf, correct = evaluate_cases(model, cases)
    metrics = per_class(cm)
    calib = ece(conf, correct)
    params = model.param_count
    macro = metrics.macro["dice_f1"]
    dpm = None if macro is None else dice_per_million(macro, params)
    return {
        "metrics.json": metrics_json(metrics, calib, params=params, dice_per_million=dpm,
                                     cases=[c.case_id for c in cases], voxels=cm.total) + "\n",
        "confusion.csv": cm.to_csv(),
        "calibration.json": json.dumps(calib.to_dict(), indent=2, sort_keys=True) + "\n",
    }


def cmd_eval(cfg: RunConfig) -> int:
    from .checkpoint import load_checkpoint

    if cfg.checkpoint is not None:
        model, _, _ = load_checkpoint(cfg.checkpoint, cfg.seed)
    else:
        model = DALightModel(cfg.model_config(), seed=cfg.seed)
    cases = _cases(cfg, model.cfg.num_buckets)
    if not cases:
        raise ConfigError(f"data: no .dl3d cases in {cfg.data}")
    docs = eval_documents(model, cases)
    out = _out_dir(cfg)
    if out is None:
        print(docs["metrics.json"], end="")
    else:
        for name, text in docs.items():
            (out / name).write_text(text)
        _write_effective(out, cfg)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    from .gradsuite import TOLERANCE, run_suite

    results = run_suite(cfg.gradcheck_instances, cfg.gradcheck_end_to_end)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["entry", "instances", "max_rel_error", "status"])
    for r in results:
        w.writerow([r.name, r.instances, f"{r.max_rel_error:.3e}", "PASS" if r.passed else "FAIL"])
    print(buf.getvalue(), end="")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} entries within {TOLERANCE:g}")
    out = _out_dir(cfg)
    if out is not None:
        (out / "gradcheck.csv").write_text(buf.getvalue())
        _write_effective(out, cfg)
    return EXIT_NUMERIC if failed else EXIT_OK


ABLATION_ROWS = ("full", "no_sepconv", "no_scanner_norm", "no_csa", "no_ssfb")


def cmd_ablate(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    _write_effective(out, cfg)
    tcfg = cfg.train_config()
    train_cases, val_cases = _load_split(cfg)
    val = validation_patches(val_cases, tcfg)
    base = ModelConfig.from_dict(cfg.model)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "mean_tumor_dice", "params"])
    for variant in ABLATION_ROWS:
        model = DALightModel(variant_config(variant, base), seed=cfg.seed)
        result = train(model, train_cases, val_cases, tcfg)
        if result.best_state is not None:
            model.load_state_dict(result.best_state)
        dice = mean_tumor_dice(model, val)
        w.writerow([variant, "" if dice is None else repr(dice), model.param_count])
        log.info("%s: dice %s, %d params", variant, dice, model.param_count)
    (out / "ablation.csv").write_text(buf.getvalue())
    print(buf.getvalue(), end="")
    return EXIT_OK


HANDLERS = {"synth": cmd_synth, "params": cmd_params, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; here 2 means non-finite numerics
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dalight3d", description="DALight-3D desk-scale experiments.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON file with run settings; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", help="full, no_sepconv, no_scanner_norm, no_csa or no_ssfb")
    p.add_argument("--data", help="directory of <case_id>.dl3d files")
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--patch", type=int)
    p.add_argument("--n", type=int, help="number of cases for synth")
    p.add_argument("--checkpoint", help="checkpoint for eval")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = build_config(args)
        return HANDLERS[cfg.command](cfg)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_VALIDATION
    except NonFiniteError as exc:
        print(f"error: non-finite value: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ShapeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
