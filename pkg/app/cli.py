"""Command-line entry point: gradcheck | recover | tam-toy | eval | render."""
import argparse
import json
import logging
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from pydantic import BaseModel, ValidationError, root_validator, validator

from app.diff import AdamConfig, RecoverConfig, TamToyConfig, optimize_depth_pose, train_tam_toy
from app.errors import DepthcastError, DivergenceError, DomainError
from app.evaluation import (
    METRIC_COLUMNS,
    EvalConfig,
    ate,
    depth_metrics,
    range_filtered_metrics,
)
from app.formats import (
    read_depth,
    read_poses_csv,
    write_checkpoint,
    write_depth,
    write_poses_csv,
    write_ppm,
    write_rows_csv,
)
from app.geometry import rotation_angle_deg, translation_angle_deg
from app.gradcheck import GradcheckConfig, run_suite
from app.loss import LossConfig
from app.synth import load_scene, make_forecast_dataset, scene_sequence
from app.tam import TamConfig
from config import settings

logger = logging.getLogger(__name__)

SCENES_DIR = Path(__file__).resolve().parent.parent / "scenes"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_DIVERGED = 3


class Thresholds(BaseModel):
    abs_rel_max: Optional[float] = None
    direction_max_deg: Optional[float] = None
    mse_ratio_max: Optional[float] = None

    class Config:
        extra = "forbid"


class RunConfig(BaseModel):
    out: str = settings.out_dir
    seed: int = settings.seed
    scene: Optional[str] = None
    steps: int = 5000
    log_every: int = 500
    context: Optional[int] = None
    horizon: Optional[int] = None
    loss: LossConfig = LossConfig()
    adam: AdamConfig = AdamConfig()
    tam: TamConfig = TamConfig(k=4, d_model=16, heads=4, layers=2)
    tam_adam: AdamConfig = AdamConfig(lr=3e-3)
    tam_steps: int = 1500
    tam_sequences: int = 384
    tam_grid: Tuple[int, int] = (4, 12)
    holdout_fraction: float = 0.25
    shuffle_labels: bool = False
    evaluation: EvalConfig = EvalConfig()
    gradcheck: GradcheckConfig = GradcheckConfig()
    thresholds: Thresholds = Thresholds()
    pred: Optional[str] = None
    gt: Optional[str] = None

    class Config:
        extra = "forbid"

    @validator("seed")
    def _seed_non_negative(cls, value):
        if value < 0:
            raise ValueError("seed must be a non-negative integer")
        return value

    @root_validator(skip_on_failure=True)
    def _files_exist(cls, values):
        for key in ("scene", "pred", "gt"):
            path = values.get(key)
            if path is not None and not Path(path).is_file():
                raise ValueError(f"{key} file not found: {path}")
        return values


# ---------------------------------------------------------------- helpers

def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_report(cfg: RunConfig, command: str, passed: Optional[bool], results: Dict) -> Path:
    """``passed`` is ``None`` when the command ran without any configured threshold."""
    report = {
        "command": command,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "config": json.loads(cfg.json()),
        "passed": passed,
        "results": results,
    }
    path = _out_dir(cfg) / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    logger.info(f"Report written: {path}")
    return path


def _scene_path(cfg: RunConfig, default: str) -> Path:
    return Path(cfg.scene) if cfg.scene else SCENES_DIR / default


def _verdict(checks: Dict[str, bool]) -> Optional[bool]:
    if not checks:
        logger.warning("⚠️ No thresholds configured; the report records passed=null")
        return None
    failed = [name for name, ok in checks.items() if not ok]
    if failed:
        logger.warning(f"Threshold checks failed: {', '.join(failed)}")
    return not failed


def _marker(passed: Optional[bool]) -> str:
    return {True: "✅", False: "❌", None: "⚠️"}[passed]


# ---------------------------------------------------------------- commands

def cmd_gradcheck(cfg: RunConfig) -> int:
    check_cfg = GradcheckConfig.parse_obj({**cfg.gradcheck.dict(), "seed": cfg.seed})
    suite = run_suite(check_cfg)
    results = {
        "kernels": {r.name: json.loads(r.json(exclude={"name"})) for r in suite.kernels},
        "failing_kernels": [r.name for r in suite.kernels if not r.passed],
    }
    write_report(cfg, "gradcheck", suite.passed, results)
    return EXIT_OK if suite.passed else EXIT_CHECK_FAILED


def cmd_recover(cfg: RunConfig) -> int:
    scene = load_scene(_scene_path(cfg, "plane_box.json"))
    context = cfg.context or scene.context
    horizon = cfg.horizon or scene.horizon
    sequence = scene_sequence(scene)
    target = context - 1 + horizon
    if target >= len(sequence.items):
        raise DomainError(f"trajectory has {len(sequence.items)} poses; need {target + 1} "
                          f"for {context} context frames and horizon {horizon}")

    recover_cfg = RecoverConfig(loss=cfg.loss, adam=cfg.adam, steps=cfg.steps, log_every=cfg.log_every)
    frames = sequence.frames
    result = optimize_depth_pose(frames[:context], frames[target], sequence.K, recover_cfg)

    gt_depth = sequence.depths[target]
    valid = ~sequence.attached
    metrics = depth_metrics(result.depth, gt_depth, valid, cfg.evaluation)
    ranges = range_filtered_metrics(result.depth, gt_depth, valid, cfg.evaluation)
    copy_last = depth_metrics(sequence.depths[context - 1], gt_depth, valid, cfg.evaluation)

    pose_errors = []
    for i, (pred, truth) in enumerate(zip(result.poses, sequence.relative_poses(target))):
        moving = float(abs(truth.translation).sum()) > 0 and float(abs(pred.translation).sum()) > 0
        pose_errors.append({
            "context": i,
            "direction_deg": translation_angle_deg(pred.translation, truth.translation) if moving else None,
            "rotation_deg": rotation_angle_deg(pred.rotation, truth.rotation),
        })

    out = _out_dir(cfg)
    write_depth(out / "depth.pfm", result.depth)
    write_poses_csv(out / "poses.csv", result.poses)
    write_rows_csv(out / "loss.csv", ["step", "total", "photometric", "smoothness", "lr"],
                   [(r.step, r.total, r.photometric, r.smoothness, r.lr) for r in result.history])
    write_rows_csv(out / "metrics.csv", METRIC_COLUMNS, [metrics.row()])

    checks = {}
    limits = cfg.thresholds
    if limits.abs_rel_max is not None:
        checks["abs_rel"] = bool(metrics.abs_rel < limits.abs_rel_max)
    if limits.direction_max_deg is not None:
        directions = [e["direction_deg"] for e in pose_errors]
        checks["direction_deg"] = all(d is not None and d < limits.direction_max_deg for d in directions)
    passed = _verdict(checks)

    first, last = result.history[0].total, result.history[-1].total
    results = {
        "scene": scene.name,
        "context_frames": context,
        "horizon": horizon,
        "metrics": metrics.dict(),
        "range_metrics": json.loads(ranges.json()),
        "copy_last_baseline": copy_last.dict(),
        "pose_errors": pose_errors,
        "masked_fraction": result.breakdown.masked_fraction,
        "initial_loss": first,
        "final_loss": last,
        "loss_reduction": 1.0 - last / first if first > 0 else 0.0,
        "checks": checks,
    }
    logger.info(f"{_marker(passed)} recover {scene.name}: abs_rel={metrics.abs_rel:.4f} "
                f"masked={result.breakdown.masked_fraction:.3f}")
    write_report(cfg, "recover", passed, results)
    return EXIT_CHECK_FAILED if passed is False else EXIT_OK


def cmd_tam_toy(cfg: RunConfig) -> int:
    scene = load_scene(_scene_path(cfg, "tam_toy.json"))
    dataset = make_forecast_dataset(scene, cfg.tam_sequences, cfg.tam.k, tuple(cfg.tam_grid), seed=cfg.seed)
    toy_cfg = TamToyConfig(
        tam=cfg.tam, adam=cfg.tam_adam, steps=cfg.tam_steps, holdout_fraction=cfg.holdout_fraction,
        seed=cfg.seed, shuffle_labels=cfg.shuffle_labels, log_every=cfg.log_every,
    )
    result = train_tam_toy(dataset.features, dataset.targets, toy_cfg)

    out = _out_dir(cfg)
    write_checkpoint(out / "tam.ckpt", result.tensors(), {"tam": cfg.tam.dict(), "seed": cfg.seed})
    every = max(1, cfg.log_every)
    curve = [
        {"step": step, "train_mse": result.train_history[step], "heldout_mse": result.heldout_history[step]}
        for step in range(0, len(result.train_history), every)
    ]
    checks = {}
    if cfg.thresholds.mse_ratio_max is not None:
        checks["mse_ratio"] = bool(result.mse_ratio < cfg.thresholds.mse_ratio_max)
    passed = _verdict(checks)
    results = {
        "layers": cfg.tam.layers,
        "heldout_mse": result.heldout_mse,
        "target_variance": result.target_variance,
        "mse_ratio": result.mse_ratio,
        "curve": curve,
        "checks": checks,
    }
    logger.info(f"{_marker(passed)} tam-toy layers={cfg.tam.layers}: held-out MSE ratio {result.mse_ratio:.4f}")
    write_report(cfg, "tam-toy", passed, results)
    return EXIT_CHECK_FAILED if passed is False else EXIT_OK


def cmd_eval(cfg: RunConfig) -> int:
    if cfg.pred is None or cfg.gt is None:
        raise DomainError("eval needs both --pred and --gt")
    pred_path, gt_path = Path(cfg.pred), Path(cfg.gt)
    suffixes = {pred_path.suffix.lower(), gt_path.suffix.lower()}
    out = _out_dir(cfg)
    if suffixes == {".pfm"}:
        pred, gt = read_depth(pred_path), read_depth(gt_path)
        metrics = depth_metrics(pred, gt, cfg=cfg.evaluation)
        ranges = range_filtered_metrics(pred, gt, cfg=cfg.evaluation)
        write_rows_csv(out / "metrics.csv", METRIC_COLUMNS, [metrics.row()])
        results = {"kind": "depth", "metrics": metrics.dict(), "range_metrics": json.loads(ranges.json())}
    elif suffixes == {".csv"}:
        result = ate(read_poses_csv(pred_path), read_poses_csv(gt_path),
                     align_scale=cfg.evaluation.align_scale, snippet=cfg.evaluation.ate_snippet)
        write_rows_csv(out / "metrics.csv", ["ate_mean", "ate_std", "snippets"],
                       [(result.mean, result.std, result.snippets)])
        results = {"kind": "trajectory", "ate": result.dict()}
    else:
        raise DomainError(f"cannot evaluate {pred_path.name} against {gt_path.name}: expected two .pfm or two .csv")
    write_report(cfg, "eval", True, results)
    return EXIT_OK


def cmd_render(cfg: RunConfig) -> int:
    scene = load_scene(_scene_path(cfg, "plane_box.json"))
    sequence = scene_sequence(scene)
    out = _out_dir(cfg)
    for i, item in enumerate(sequence.items):
        write_ppm(out / f"frame_{i:03d}.ppm", item.frame)
        write_depth(out / f"depth_{i:03d}.pfm", item.depth)
    write_poses_csv(out / "poses.csv", [item.pose for item in sequence.items])
    results = {"scene": scene.name, "frames": len(sequence.items),
               "height": scene.camera.height, "width": scene.camera.width}
    write_report(cfg, "render", True, results)
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "recover": cmd_recover,
    "tam-toy": cmd_tam_toy,
    "eval": cmd_eval,
    "render": cmd_render,
}


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="depthcast", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--scene", help="scene JSON file")

    sub = parser.add_subparsers(dest="command", required=True)
    check = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every kernel")
    check.add_argument("--plant-bug", metavar="KERNEL", help="double one kernel's analytic gradient")

    recover = sub.add_parser("recover", parents=[common], help="recover depth and pose on a synthetic scene")
    recover.add_argument("--steps", type=int)
    recover.add_argument("--scales", type=int)
    recover.add_argument("--no-automask", action="store_true")
    recover.add_argument("--context", type=int)
    recover.add_argument("--horizon", type=int)

    tam = sub.add_parser("tam-toy", parents=[common], help="train the aggregation module on toy forecasting")
    tam.add_argument("--steps", type=int)
    tam.add_argument("--layers", type=int)
    tam.add_argument("--shuffle-labels", action="store_true")

    evaluate = sub.add_parser("eval", parents=[common], help="depth metrics or trajectory error")
    evaluate.add_argument("--pred")
    evaluate.add_argument("--gt")
    evaluate.add_argument("--align-scale", action=argparse.BooleanOptionalAction,
                          help="similarity (default) or rigid alignment before ATE")
    evaluate.add_argument("--no-median-scaling", action="store_true")

    sub.add_parser("render", parents=[common], help="render a scene's trajectory")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file (if any) with command-line overrides applied on top."""
    base = RunConfig.parse_file(args.config) if args.config else RunConfig()
    data = json.loads(base.json())
    for key in ("out", "seed", "scene", "context", "horizon", "pred", "gt"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    steps = getattr(args, "steps", None)
    if steps is not None:
        data["tam_steps" if args.command == "tam-toy" else "steps"] = steps
    if getattr(args, "scales", None) is not None:
        data["loss"]["scales"] = args.scales
    if getattr(args, "no_automask", False):
        data["loss"]["automask_enabled"] = False
    if getattr(args, "layers", None) is not None:
        data["tam"]["layers"] = args.layers
    if getattr(args, "shuffle_labels", False):
        data["shuffle_labels"] = True
    if getattr(args, "plant_bug", None) is not None:
        data["gradcheck"]["plant_bug"] = args.plant_bug
    if getattr(args, "align_scale", None) is not None:
        data["evaluation"]["align_scale"] = args.align_scale
    if getattr(args, "no_median_scaling", False):
        data["evaluation"]["median_scaling"] = False
    return RunConfig.parse_obj(data)


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=settings.log_level, format=LOG_FORMAT)
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ValidationError, ValueError, OSError) as e:
        logger.error(f"❌ Invalid configuration: {e}")
        return EXIT_INPUT_ERROR

    started = time.perf_counter()
    try:
        code = COMMANDS[args.command](cfg)
    except DivergenceError as e:
        logger.error(f"❌ {args.command} diverged: {e}")
        write_report(cfg, args.command, False, {"error": str(e), "step": e.step, "segment": e.segment})
        return EXIT_DIVERGED
    except (DepthcastError, ValidationError, OSError) as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return EXIT_INPUT_ERROR
    logger.info(f"{args.command} finished in {time.perf_counter() - started:.1f}s with exit code {code}")
    return code
