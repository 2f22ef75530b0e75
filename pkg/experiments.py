"""
Desk-scale studies: stage-count sweep, wiring-variant ablation, single-shot
baseline, frame-drop robustness and per-stage intermediate dumps.

Every study is a pure function of (config, seed, corpora): the evaluation
batch is drawn from a generator seeded from the config seed.
"""
import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from carrier import CarrierFrame, grid_to_frame
from config import config
from corpora import AudioCorpus, ImageCorpus
from metrics import QualityReport, quality_report
from networks import SingleShotModels, StageModels, parameter_count
from pipeline import RevealState, SecretImage, hide_all, reveal_all, save_image
from results_store import ResultsStore, StoredResult, config_hash
from training import Batch, TrainingConfig, sample_batch, train

Models = Union[StageModels, SingleShotModels]

PASSED = "passed"
FAILED = "failed"
NOT_APPLICABLE = "not-applicable"

# Seed offset of the evaluation batch, kept apart from the training crop schedule.
_EVAL_SEED_OFFSET = 1_000_003


@dataclass
class SweepRecord:
    """One trained configuration and its evaluation."""
    label: str
    stages: int
    variant: str
    config_hash: str
    audio_mse: float
    psnr: float
    ssim: float
    ms_ssim: float
    per_stage_psnr: List[float] = field(default_factory=list)
    parameters: int = 0
    independence: str = NOT_APPLICABLE
    final_loss: float = math.nan
    wall_clock: float = 0.0
    saturated: bool = False

    CSV_FIELDS = ('label', 'stages', 'variant', 'config_hash', 'audio_mse', 'psnr', 'ssim', 'ms_ssim',
                  'per_stage_psnr', 'parameters', 'independence', 'final_loss', 'wall_clock', 'saturated')

    def to_dict(self) -> Dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of every reproducible field (wall clock excluded)."""
        values = self.to_dict()
        values.pop('wall_clock')
        return config_hash(values)

    def csv_row(self) -> List[str]:
        row = []
        for name in self.CSV_FIELDS:
            value = getattr(self, name)
            if name == 'per_stage_psnr':
                value = " ".join(f"{v:.6f}" for v in value)
            elif isinstance(value, float):
                value = f"{value:.10g}"
            row.append(str(value))
        return row


@dataclass
class SweepResult:
    """Records of one study, in run order."""
    experiment: str
    records: List[SweepRecord] = field(default_factory=list)

    @property
    def saturation(self) -> Optional[str]:
        """Label of the first record flagged as saturated, if any."""
        for record in self.records:
            if record.saturated:
                return record.label
        return None

    def record(self, label: str) -> SweepRecord:
        for record in self.records:
            if record.label == label:
                return record
        raise KeyError(f"No record labelled {label!r} in {self.experiment}")

    def write_csv(self, path: str) -> None:
        try:
            with open(path, 'w', newline='', encoding='utf-8') as f:
                writer = csv.writer(f)
                writer.writerow(SweepRecord.CSV_FIELDS)
                for record in self.records:
                    writer.writerow(record.csv_row())
        except Exception as e:
            logging.error(f"Failed to write {path}: {e}")
            raise

    def write_plot_data(self, path: str, x: str = 'stages', y: str = 'psnr') -> None:
        """Two whitespace-separated columns, one row per record."""
        with open(path, 'w', encoding='utf-8') as f:
            f.write(f"# {x} {y}\n")
            for record in self.records:
                f.write(f"{getattr(record, x)} {getattr(record, y)}\n")

    def write_stage_curves(self, path: str) -> None:
        """Per-stage PSNR curves: label, stage index, PSNR(C_i)."""
        with open(path, 'w', encoding='utf-8') as f:
            f.write("# label stage psnr\n")
            for record in self.records:
                for stage, value in enumerate(record.per_stage_psnr, start=1):
                    f.write(f"{record.label} {stage} {value}\n")


def evaluation_batch(images: ImageCorpus, audio: AudioCorpus, cfg: TrainingConfig,
                     samples: int = config.EVAL_SAMPLES) -> Batch:
    """Fixed evaluation batch derived from the config seed."""
    rng = np.random.default_rng(cfg.seed + _EVAL_SEED_OFFSET)
    return sample_batch(images, audio, replace(cfg, batch_size=samples), rng)


def _sample_frames(batch: Batch, n: int) -> List[CarrierFrame]:
    frame_size = batch.secrets.shape[-2] * batch.secrets.shape[-1]
    return [grid_to_frame(carrier[n, 0].numpy(), stage * frame_size)
            for stage, carrier in enumerate(batch.carriers)]


def _mean_report(reports: Sequence[QualityReport]) -> QualityReport:
    return QualityReport(
        audio_mse=float(np.mean([r.audio_mse for r in reports])),
        psnr=float(np.mean([r.psnr for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
        ms_ssim=float(np.mean([r.ms_ssim for r in reports])),
        ms_ssim_levels=reports[0].ms_ssim_levels,
        per_stage_psnr=list(np.mean([r.per_stage_psnr for r in reports], axis=0))
        if reports[0].per_stage_psnr else [],
    )


def sample_state(models: StageModels, batch: Batch, n: int,
                 mask: Optional[Sequence[bool]] = None):
    """Run the inference path for sample n; returns (secret, frames, containers, state)."""
    secret = SecretImage(batch.secrets[n].numpy())
    frames = _sample_frames(batch, n)
    containers, state = hide_all(secret, frames, models)
    if mask is not None and not all(mask):
        state = reveal_all(containers, models, mask)
    return secret, frames, containers, state


def _stream_of(frames: Sequence[CarrierFrame]) -> np.ndarray:
    return np.concatenate([frame.flat for frame in frames])


def _stage_report(secret: SecretImage, frames, containers, state: RevealState) -> QualityReport:
    stage_images = [state.clamped_partial(i).cpu().numpy() for i in range(1, state.stages + 1)]
    return quality_report(_stream_of(frames), _stream_of(containers), secret.pixels,
                          state.final.cpu().numpy(), stage_images)


def _single_shot_reports(models: SingleShotModels, batch: Batch) -> List[QualityReport]:
    like = next(models.parameters())
    stack = torch.cat(batch.carriers, dim=1).to(device=like.device, dtype=like.dtype)
    models.eval()
    with torch.no_grad():
        container, _ = models.hiding(batch.secrets.to(device=like.device, dtype=like.dtype), stack)
        container = container.clamp(-1.0, 1.0).to(torch.float32).to(like.dtype)
        revealed, _ = models.revealing(container)
    container = container.cpu().numpy()
    revealed = revealed.clamp(0.0, 1.0).cpu().numpy()
    stack = stack.cpu().numpy()
    return [quality_report(stack[n], container[n], batch.secrets[n].numpy(), revealed[n])
            for n in range(batch.size)]


def evaluate(models: Models, images: ImageCorpus, audio: AudioCorpus, cfg: TrainingConfig,
             samples: int = config.EVAL_SAMPLES,
             mask: Optional[Sequence[bool]] = None) -> QualityReport:
    """Average QualityReport over the fixed evaluation batch.

    Args:
        models: Trained stage models or single-shot baseline.
        images: Image corpus.
        audio: Audio corpus.
        cfg: Config whose seed, patch and stage count define the batch.
        samples: Evaluation batch size.
        mask: Optional availability mask for dropped frames (stage models only).
    """
    batch = evaluation_batch(images, audio, replace(cfg, stages=models.stages), samples)
    if isinstance(models, SingleShotModels):
        if mask is not None:
            raise ValueError("Frame drop is not defined for the single-shot baseline")
        return _mean_report(_single_shot_reports(models, batch))

    reports = []
    for n in range(batch.size):
        secret, frames, containers, state = sample_state(models, batch, n, mask)
        reports.append(_stage_report(secret, frames, containers, state))
    return _mean_report(reports)


def residual_norms(models: StageModels, images: ImageCorpus, audio: AudioCorpus,
                   cfg: TrainingConfig, samples: int = config.EVAL_SAMPLES) -> List[float]:
    """Mean L1 norm of the hidden residuals S_1..S_t over the evaluation batch."""
    batch = evaluation_batch(images, audio, replace(cfg, stages=models.stages), samples)
    totals = np.zeros(models.stages)
    for n in range(batch.size):
        secret, _, _, state = sample_state(models, batch, n)
        for i in range(models.stages):
            target = secret.as_tensor(state.partials[i]) - state.partials[i]
            totals[i] += target.abs().sum().item()
    return list(totals / batch.size)


def check_stage_independence(models: StageModels, containers: Sequence[CarrierFrame],
                             trials: int = config.INDEPENDENCE_TRIALS,
                             rng: Optional[np.random.Generator] = None) -> str:
    """Perturb one container at a time and verify every other revealed residual is bit-identical.

    Returns:
        "passed", "failed", or "not-applicable" for connected revealing variants.
    """
    if models.revealing_connected:
        return NOT_APPLICABLE
    rng = rng or np.random.default_rng(0)
    baseline = reveal_all(containers, models).residuals

    for _ in range(trials):
        j = int(rng.integers(len(containers)))
        frame = containers[j]
        noise = rng.normal(0.0, 0.01, frame.size).astype(np.float32)
        perturbed = CarrierFrame(offset=frame.offset, flat=np.clip(frame.flat + noise, -1.0, 1.0),
                                 w=frame.w, h=frame.h)
        trial = list(containers)
        trial[j] = perturbed
        residuals = reveal_all(trial, models).residuals
        for i, (before, after) in enumerate(zip(baseline, residuals)):
            if i != j and not torch.equal(before, after):
                logging.warning(f"Perturbing container {j + 1} changed revealed residual {i + 1}")
                return FAILED
    return PASSED


def _independence(models: Models, images: ImageCorpus, audio: AudioCorpus, cfg: TrainingConfig) -> str:
    if isinstance(models, SingleShotModels):
        return NOT_APPLICABLE
    batch = evaluation_batch(images, audio, replace(cfg, stages=models.stages), samples=1)
    _, _, containers, _ = sample_state(models, batch, 0)
    return check_stage_independence(models, containers, rng=np.random.default_rng(cfg.seed))


def _run(label: str, cfg: TrainingConfig, images: ImageCorpus, audio: AudioCorpus) -> SweepRecord:
    started = time.perf_counter()
    result = train(cfg, images, audio)
    report = evaluate(result.models, images, audio, cfg)
    record = SweepRecord(
        label=label,
        stages=cfg.stages,
        variant=cfg.variant,
        config_hash=config_hash(cfg.to_dict()),
        audio_mse=report.audio_mse,
        psnr=report.psnr,
        ssim=report.ssim,
        ms_ssim=report.ms_ssim,
        per_stage_psnr=list(report.per_stage_psnr),
        parameters=parameter_count(result.models),
        independence=_independence(result.models, images, audio, cfg),
        final_loss=result.final_loss,
        wall_clock=time.perf_counter() - started,
    )
    logging.info(f"{label}: psnr={record.psnr:.2f} dB ssim={record.ssim:.4f} "
                 f"audio_mse={record.audio_mse:.3e} params={record.parameters}")
    return record


def _store(store: Optional[ResultsStore], result: SweepResult, configs: Sequence[TrainingConfig]) -> None:
    if store is None:
        return
    for record, cfg in zip(result.records, configs):
        entry = StoredResult.create(result.experiment, record.label, cfg.to_dict(), record.to_dict())
        previous = store.latest(entry.key)
        if previous is not None:
            logging.info(f"{record.label}: psnr {record.psnr:.2f} dB, "
                         f"previous run of this config {previous.record['psnr']:.2f} dB")
        store.append(entry)


def _config_for(base: TrainingConfig, **changes) -> TrainingConfig:
    """Copy of base with one lambda replicated across the new stage count."""
    if len(set(base.lambdas)) > 1:
        logging.warning(f"Per-stage lambdas {base.lambdas} cannot follow a changing stage count; "
                        f"using lambda={base.lambdas[0]} for every stage")
    return replace(base, lambdas=(base.lambdas[0],), **changes)


def flag_saturation(records: Sequence[SweepRecord],
                    threshold: float = config.SATURATION_GAIN_DB) -> None:
    """Mark the first record whose PSNR gain over its predecessor is below threshold."""
    for previous, current in zip(records, records[1:]):
        if current.psnr - previous.psnr < threshold:
            current.saturated = True
            logging.info(f"Saturation at {current.label}: gain {current.psnr - previous.psnr:.3f} dB")
            return


def sweep_stages(t_values: Sequence[int], base: TrainingConfig, images: ImageCorpus,
                 audio: AudioCorpus, store: Optional[ResultsStore] = None) -> SweepResult:
    """Train and evaluate one model per stage count, sharing seed and corpora."""
    if not t_values:
        raise ValueError("t_values must not be empty")
    configs = [_config_for(base, stages=int(t)) for t in t_values]
    result = SweepResult(experiment="sweep_stages")
    for cfg in configs:
        result.records.append(_run(f"t={cfg.stages}", cfg, images, audio))
    flag_saturation(result.records)
    _store(store, result, configs)
    return result


def ablate_variants(variants: Sequence[str], base: TrainingConfig, images: ImageCorpus,
                    audio: AudioCorpus, store: Optional[ResultsStore] = None) -> SweepResult:
    """Train every wiring variant (and optionally the single-shot baseline) on one setup."""
    if not variants:
        raise ValueError("variants must not be empty")
    configs = [_config_for(base, variant=variant) for variant in variants]
    result = SweepResult(experiment="ablate_variants")
    for cfg in configs:
        result.records.append(_run(cfg.variant, cfg, images, audio))
    _store(store, result, configs)
    return result


def baseline_single_shot(cfg: TrainingConfig, images: ImageCorpus, audio: AudioCorpus) -> SweepRecord:
    """Train and evaluate the single-shot baseline with the same block budget."""
    return _run(config.SINGLE_SHOT_VARIANT, replace(cfg, variant=config.SINGLE_SHOT_VARIANT),
                images, audio)


@dataclass
class DropRow:
    """Reconstruction quality under one availability mask."""
    mask: List[bool]
    available: int
    psnr: float

    def to_tsv(self) -> str:
        pattern = "".join('1' if m else '0' for m in self.mask)
        return f"{pattern}\t{self.available}\t{self.psnr:.6f}"


def robustness_drop(models: StageModels, images: ImageCorpus, audio: AudioCorpus,
                    cfg: TrainingConfig, drop_patterns: Sequence[Sequence[bool]],
                    samples: int = config.EVAL_SAMPLES) -> List[DropRow]:
    """PSNR of clamp(C_t) per availability mask.

    Raises:
        ValueError: If a mask length differs from the stage count.
    """
    for mask in drop_patterns:
        if len(mask) != models.stages:
            raise ValueError(f"Mask {list(mask)} has {len(mask)} entries for t={models.stages}")
    rows = []
    for mask in drop_patterns:
        mask = [bool(m) for m in mask]
        report = evaluate(models, images, audio, cfg, samples, mask)
        rows.append(DropRow(mask=mask, available=sum(mask), psnr=report.psnr))
        logging.info(f"Drop pattern {rows[-1].to_tsv()}")
    return rows


def write_drop_table(rows: Sequence[DropRow], path: str) -> None:
    with open(path, 'w', encoding='utf-8') as f:
        f.write("mask\tavailable\tpsnr\n")
        for row in rows:
            f.write(row.to_tsv() + "\n")


@dataclass
class IntermediateDump:
    """Files written by dump_intermediates and the L1 norms of S_1..S_t."""
    paths: List[str]
    residual_l1: List[float]
    revealed: np.ndarray


def _encode_residual(values: np.ndarray) -> np.ndarray:
    return np.clip(0.5 + values / 2.0, 0.0, 1.0)


def dump_intermediates(models: StageModels, secret: SecretImage, frames: Sequence[CarrierFrame],
                       out_dir: str) -> IntermediateDump:
    """Write S_i, R_i and clamp(C_i) images per stage plus ranges.tsv.

    Residual images use the encoding 0.5 + x/2 clamped to [0, 1]; partial
    reconstructions are written clamped.
    """
    os.makedirs(out_dir, exist_ok=True)
    _, state = hide_all(secret, frames, models)
    paths, ranges, norms = [], [], []
    original = secret.as_tensor(state.partials[0])

    def write(name: str, raw: np.ndarray, image: np.ndarray, encoding: str) -> None:
        path = os.path.join(out_dir, f"{name}.png")
        save_image(image, path)
        paths.append(path)
        ranges.append(f"{name}\t{raw.min():.6g}\t{raw.max():.6g}\t{encoding}")

    for i in range(1, state.stages + 1):
        target = (original - state.partials[i - 1]).cpu().numpy()
        residual = state.residuals[i - 1].cpu().numpy()
        partial = state.partials[i].cpu().numpy()
        norms.append(float(np.abs(target).sum()))
        write(f"S{i}", target, _encode_residual(target), "0.5+x/2")
        write(f"R{i}", residual, _encode_residual(residual), "0.5+x/2")
        write(f"C{i}", partial, np.clip(partial, 0.0, 1.0), "clamp")

    ranges_path = os.path.join(out_dir, "ranges.tsv")
    with open(ranges_path, 'w', encoding='utf-8') as f:
        f.write("name\tmin\tmax\tencoding\n")
        f.write("\n".join(ranges) + "\n")
    paths.append(ranges_path)
    logging.info(f"Wrote {len(paths)} intermediate files to {out_dir}")
    return IntermediateDump(paths=paths, residual_l1=norms, revealed=state.final.cpu().numpy())
