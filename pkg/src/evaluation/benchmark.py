"""
Ablation runner comparing attention-mask regimes and joint designs.

Every leg fine-tunes the same base checkpoint on the same dataset with the same
budget, samples the same condition ids and seeds, and is scored with the flow
and alignment metrics.
"""
import json
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from src.cli.commands import evaluate_video_dirs, sample_videos
from src.cli.experiment import ExperimentConfig, ExperimentPaths, RunManifest
from src.data.collectors.scene_generator import NUM_CONDITIONS
from src.data.database.frame_store import load_token_dataset
from src.evaluation.metrics import VideoMetrics
from src.models.attention import MaskMode
from src.models.checkpoint import load_checkpoint
from src.models.dit import JointDesign
from src.models.training import finetune_rgba
from src.utils.exceptions import AblationError
from src.utils.helpers import atomic_write_json, directory_hash, ensure_dir, file_hash
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

REPORT_COLUMNS = [
    "leg",
    "design",
    "mask_mode",
    "flow_difference",
    "alignment_iou",
    "trainable_params",
    "wall_time",
    "dataset_hash",
    "base_checkpoint_hash",
    "status",
    "error",
]


@dataclass(frozen=True)
class AblationLeg:
    name: str
    design: JointDesign
    mode: MaskMode


ABLATION_LEGS = [
    AblationLeg("ours", JointDesign.SEQUENCE_EXTENSION, MaskMode.TEXT_TO_ALPHA_BLOCKED),
    AblationLeg("all_alpha_keys_blocked", JointDesign.SEQUENCE_EXTENSION, MaskMode.ALL_ALPHA_KEYS_BLOCKED),
    AblationLeg("unmasked", JointDesign.SEQUENCE_EXTENSION, MaskMode.UNMASKED),
    AblationLeg("batch_extension", JointDesign.BATCH_EXTENSION, MaskMode.UNMASKED),
    AblationLeg("latent_dim_extension", JointDesign.LATENT_DIM_EXTENSION, MaskMode.UNMASKED),
]


def run_leg(config_payload: Dict, leg_name: str, dataset_hash: str, base_hash: str) -> Dict:
    """
    Fine-tune, sample and score one leg. Module-level so worker processes can run it.

    Returns:
        One report row; failures are reported in the row instead of raised
    """
    config = ExperimentConfig.model_validate(config_payload)
    leg = next(leg for leg in ABLATION_LEGS if leg.name == leg_name)
    paths = ExperimentPaths(config.output_dir)
    leg_dir = ensure_dir(paths.ablation / leg.name)
    row = {
        "leg": leg.name,
        "design": leg.design.value,
        "mask_mode": leg.mode.value,
        "dataset_hash": dataset_hash,
        "base_checkpoint_hash": base_hash,
        "status": "ok",
        "error": None,
    }
    started = time.perf_counter()
    try:
        base = load_checkpoint(paths.base_checkpoint)
        dataset = load_token_dataset(
            paths.dataset, config.model.patch, doubled=True, preprocess=config.dataset.preprocess
        )
        run = finetune_rgba(
            base, dataset, leg.mode, leg.design, config.objective, config.training,
            checkpoint_path=leg_dir / "model.pt",
        )
        cond_ids = [i % NUM_CONDITIONS for i in range(config.evaluation.n_videos)]
        written = sample_videos(
            run.model, leg.design, leg.mode, config.sampler, cond_ids, leg_dir / "samples", config.dataset.fps
        )
        record = evaluate_video_dirs(
            written, VideoMetrics(config.evaluation.flow, config.evaluation.iou_threshold)
        )
        atomic_write_json(leg_dir / "metrics.json", record)
        row.update(
            flow_difference=record["aggregate"]["flow_difference"],
            alignment_iou=record["aggregate"]["alignment_iou"],
            trainable_params=run.trainable_count,
        )
    except Exception as e:
        logger.error(f"Ablation leg {leg.name} failed: {e}")
        row.update(status="failed", error=f"{type(e).__name__}: {e}", trace=traceback.format_exc())
    row["wall_time"] = round(time.perf_counter() - started, 3)
    return row


def trend_summary(report: pd.DataFrame) -> Dict[str, Optional[float]]:
    """Directional comparison of the text-to-alpha-blocked leg against the all-alpha-blocked leg."""
    rows = report.set_index("leg")
    if not {"ours", "all_alpha_keys_blocked"} <= set(rows.index):
        return {}
    ours, blocked = rows.loc["ours"], rows.loc["all_alpha_keys_blocked"]
    if pd.isna(ours["flow_difference"]) or pd.isna(blocked["flow_difference"]):
        return {}
    summary = {
        "flow_difference_gap": float(blocked["flow_difference"] - ours["flow_difference"]),
        "ours_lower_flow_difference": bool(ours["flow_difference"] < blocked["flow_difference"]),
    }
    if not pd.isna(ours["alignment_iou"]) and not pd.isna(blocked["alignment_iou"]):
        summary["alignment_iou_gain"] = float(ours["alignment_iou"] - blocked["alignment_iou"])
    return summary


class AblationRunner:
    """Runs the five-leg ablation matrix and writes the comparative report."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.paths = ExperimentPaths(config.output_dir)

    def _run_legs(self, workers: int, dataset_hash: str, base_hash: str) -> List[Dict]:
        payload = self.config.echo()
        names = [leg.name for leg in ABLATION_LEGS]
        if workers <= 1:
            return [run_leg(payload, name, dataset_hash, base_hash) for name in names]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_leg, payload, name, dataset_hash, base_hash) for name in names]
            return [future.result() for future in futures]

    def write_report(self, rows: List[Dict]) -> pd.DataFrame:
        """Write report.csv, report.json and report.txt below the ablation directory."""
        report = pd.DataFrame(rows)
        for column in REPORT_COLUMNS:
            if column not in report.columns:
                report[column] = None
        report = report[REPORT_COLUMNS]

        out = ensure_dir(self.paths.ablation)
        report.to_csv(out / "report.csv", index=False)
        atomic_write_json(
            out / "report.json",
            {
                "rows": json.loads(report.to_json(orient="records")),
                "trend": trend_summary(report),
                "config": self.config.echo(),
            },
        )
        columns = ["leg", "flow_difference", "alignment_iou", "trainable_params", "wall_time", "status"]
        (out / "report.txt").write_text(report[columns].to_string(index=False) + "\n", encoding="utf-8")
        return report

    def run(self, workers: int = 1) -> Dict:
        """
        Execute every leg, write the report and raise ``AblationError`` if any leg failed.

        Returns:
            The report as records plus the trend summary
        """
        dataset_hash = directory_hash(self.paths.dataset)
        base_hash = file_hash(self.paths.base_checkpoint)
        logger.info(f"Running {len(ABLATION_LEGS)} ablation legs with {workers} worker(s)")

        manifest = RunManifest(command="ablate", config=self.config.echo())
        manifest.inputs = {"dataset": dataset_hash, "base_checkpoint": base_hash}
        rows = self._run_legs(workers, dataset_hash, base_hash)
        report = self.write_report(rows)

        result = {
            "rows": json.loads(report.to_json(orient="records")),
            "trend": trend_summary(report),
        }
        manifest.metrics = result["trend"]
        manifest.details["rows"] = result["rows"]
        manifest.outputs["report"] = file_hash(self.paths.ablation / "report.csv")
        manifest.finish(self.paths)

        failed = [row["leg"] for row in rows if row["status"] != "ok"]
        if failed:
            raise AblationError(f"Ablation legs failed: {failed}; partial report in {self.paths.ablation}")
        logger.info(f"Ablation complete: {result['trend']}")
        return result
