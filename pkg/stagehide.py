"""
Command-line entry point: train, embed, extract, eval, sweep, ablate, dump.

Every run logs its fully resolved config before executing and prints one
JSON summary line on success. Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Any, Callable, Dict, List, Optional, Sequence

from carrier import CarrierFormatError, Manifest, StegoBundle, frame_offsets, load_float_wav, load_pcm, \
    select_frames
from config import config
from experiments import (ablate_variants, dump_intermediates, evaluate, robustness_drop, sweep_stages,
                         write_drop_table)
from metrics import QualityReport, quality_report
from networks import StageModels, load_checkpoint, save_checkpoint
from pipeline import drop_mask, embed, extract_state, load_secret, save_image
from results_store import ResultsStore
from settings import load_environment, settings_manager
from training import TrainingConfig, load_corpora, train

VERBS = ('train', 'embed', 'extract', 'eval', 'sweep', 'ablate', 'dump')

_REQUIRED = {
    'embed': ('checkpoint', 'secret', 'cover', 'out'),
    'extract': ('checkpoint', 'bundle', 'out'),
    'eval': ('checkpoint',),
    'dump': ('checkpoint', 'secret', 'cover', 'out'),
}


class UsageError(ValueError):
    """Bad command-line input that can only be checked once the models are loaded."""


def setup_logging(level: Optional[str] = None) -> None:
    """Setup application logging."""
    level = (level or os.getenv('STAGEHIDE_LOG_LEVEL', 'INFO')).upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format='%(asctime)s - %(levelname)s - %(name)s - %(message)s',
        handlers=[
            logging.FileHandler(config.LOG_FILE),
            logging.StreamHandler()
        ]
    )


def _stage_list(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated stage numbers, got {text!r}")
    if not values:
        raise argparse.ArgumentTypeError("expected at least one stage number")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='stagehide',
                                     description="Multi-stage residual image-in-audio steganography")
    parser.add_argument('verb', choices=VERBS)
    parser.add_argument('--config', help="flat key=value config file")
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help="override one config key (repeatable; wins over --config)")
    parser.add_argument('--secret', help="secret image")
    parser.add_argument('--cover', help="cover WAV")
    parser.add_argument('--bundle', help="container WAV (manifest read from <bundle>.manifest)")
    parser.add_argument('--checkpoint', help="model checkpoint")
    parser.add_argument('--out', help="output file or directory")
    parser.add_argument('--drop', type=_stage_list, default=[], metavar='I,J,...',
                        help="1-based stages treated as lost")
    parser.add_argument('--pcm-bits', choices=config.PCM_BITS_CHOICES, default="16",
                        help="container WAV representation written by embed")
    parser.add_argument('--framing', choices=config.FRAMING_POLICIES, default="contiguous")
    parser.add_argument('--values', help="sweep: stage counts (1,2,3); ablate: variants (M,S,...)")
    return parser


def _drop_mask(stages: int, dropped: Sequence[int]) -> List[bool]:
    try:
        return drop_mask(stages, dropped)
    except ValueError as e:
        raise UsageError(f"--drop: {e}") from e


def _load_cover(path: str):
    try:
        return load_pcm(path)
    except CarrierFormatError:
        return load_float_wav(path)


def _load_stage_models(path: str) -> StageModels:
    models = load_checkpoint(path)
    if not isinstance(models, StageModels):
        raise ValueError(f"{path} holds a {models.variant} model; embedding and extraction "
                         f"need multi-stage models")
    return models


def _out_dir(args) -> str:
    path = args.out or "."
    os.makedirs(path, exist_ok=True)
    return path


def _report_summary(report: QualityReport) -> Dict[str, Any]:
    return {'audio_mse': report.audio_mse, 'psnr': report.psnr, 'ssim': report.ssim,
            'ms_ssim': report.ms_ssim, 'ms_ssim_levels': report.ms_ssim_levels,
            'per_stage_psnr': report.per_stage_psnr}


def cmd_train(args, cfg: TrainingConfig) -> Dict[str, Any]:
    out = _out_dir(args)
    images, audio = load_corpora(cfg)
    settings_manager.save(cfg, os.path.join(out, "config.txt"))
    result = train(cfg, images, audio, metrics_log=os.path.join(out, config.METRICS_LOG_FILE),
                   checkpoint_dir=out)
    path = args.checkpoint or os.path.join(out, config.CHECKPOINT_NAME)
    ident = save_checkpoint(result.models, path)
    report = evaluate(result.models, images, audio, cfg)
    return {'checkpoint': path, 'checkpoint_id': ident, 'initial_loss': result.initial_loss,
            'final_loss': result.final_loss, 'steps': len(result.step_losses), 'psnr': report.psnr}


def cmd_embed(args, cfg: TrainingConfig) -> Dict[str, Any]:
    models = _load_stage_models(args.checkpoint)
    secret = load_secret(args.secret, cfg.patch, cfg.patch)
    cover = _load_cover(args.cover)
    offsets = frame_offsets(cover.length, models.stages, secret.w, secret.h, args.framing)
    manifest = Manifest(w=secret.w, h=secret.h, t=models.stages, offsets=offsets, pcm_bits=args.pcm_bits)
    bundle = embed(secret, cover, models, manifest)
    bundle.save(args.out)
    return {'bundle': args.out, 'manifest': StegoBundle.manifest_path(args.out),
            'offsets': bundle.manifest.offsets, 'checkpoint_id': bundle.manifest.checkpoint_id}


def cmd_extract(args, cfg: TrainingConfig) -> Dict[str, Any]:
    models = _load_stage_models(args.checkpoint)
    bundle = StegoBundle.load(args.bundle)
    mask = _drop_mask(models.stages, args.drop)
    state = extract_state(bundle, models, mask)
    save_image(state.final, args.out)
    return {'out': args.out, 'available': state.available_count, 'stages': state.stages}


def cmd_eval(args, cfg: TrainingConfig) -> Dict[str, Any]:
    models = load_checkpoint(args.checkpoint)
    if args.bundle:
        if not args.secret or not args.cover:
            raise ValueError("eval --bundle needs --secret and --cover")
        bundle = StegoBundle.load(args.bundle)
        manifest = bundle.manifest
        secret = load_secret(args.secret, manifest.w, manifest.h)
        state = extract_state(bundle, models, _drop_mask(models.stages, args.drop))
        stage_images = [state.clamped_partial(i).cpu().numpy() for i in range(1, state.stages + 1)]
        report = quality_report(_load_cover(args.cover), bundle.stream, secret.pixels,
                                state.final.cpu().numpy(), stage_images)
        summary = _report_summary(report)
    else:
        cfg = replace(cfg, stages=models.stages, lambdas=(cfg.lambdas[0],))
        images, audio = load_corpora(cfg)
        report = evaluate(models, images, audio, cfg)
        summary = _report_summary(report)
        if args.drop:
            patterns = [[True] * models.stages, _drop_mask(models.stages, args.drop),
                        [False] * models.stages]
            rows = robustness_drop(models, images, audio, cfg, patterns)
            summary['drop_psnr'] = [row.psnr for row in rows]
            if args.out:
                write_drop_table(rows, os.path.splitext(args.out)[0] + "_drop.tsv")

    if args.out:
        with open(args.out, 'w', encoding='utf-8') as f:
            f.write(QualityReport.tsv_header(len(report.per_stage_psnr)) + "\n")
            f.write(report.to_tsv() + "\n")
        summary['out'] = args.out
    return summary


def _write_sweep(result, out: str, x: str) -> Dict[str, Any]:
    csv_path = os.path.join(out, f"{result.experiment}.csv")
    result.write_csv(csv_path)
    result.write_plot_data(os.path.join(out, f"{result.experiment}_psnr.dat"), x=x, y='psnr')
    result.write_stage_curves(os.path.join(out, f"{result.experiment}_stages.dat"))
    return {'csv': csv_path, 'saturation': result.saturation,
            'records': {r.label: {'psnr': r.psnr, 'audio_mse': r.audio_mse, 'parameters': r.parameters,
                                  'independence': r.independence} for r in result.records}}


def cmd_sweep(args, cfg: TrainingConfig) -> Dict[str, Any]:
    out = _out_dir(args)
    t_values = _stage_list(args.values) if args.values else list(range(1, cfg.stages + 1))
    longest = replace(cfg, stages=max(t_values), lambdas=(cfg.lambdas[0],))
    images, audio = load_corpora(longest)
    store = ResultsStore(os.path.join(out, config.RESULTS_FILE))
    return _write_sweep(sweep_stages(t_values, cfg, images, audio, store), out, x='stages')


def cmd_ablate(args, cfg: TrainingConfig) -> Dict[str, Any]:
    out = _out_dir(args)
    variants = [v.strip() for v in args.values.split(',')] if args.values else list(config.VARIANTS)
    images, audio = load_corpora(cfg)
    store = ResultsStore(os.path.join(out, config.RESULTS_FILE))
    return _write_sweep(ablate_variants(variants, cfg, images, audio, store), out, x='parameters')


def cmd_dump(args, cfg: TrainingConfig) -> Dict[str, Any]:
    models = _load_stage_models(args.checkpoint)
    secret = load_secret(args.secret, cfg.patch, cfg.patch)
    frames = select_frames(_load_cover(args.cover), models.stages, secret.w, secret.h, args.framing)
    dump = dump_intermediates(models, secret, frames, args.out)
    return {'out': args.out, 'files': len(dump.paths), 'residual_l1': dump.residual_l1}


COMMANDS: Dict[str, Callable[[argparse.Namespace, TrainingConfig], Dict[str, Any]]] = {
    'train': cmd_train,
    'embed': cmd_embed,
    'extract': cmd_extract,
    'eval': cmd_eval,
    'sweep': cmd_sweep,
    'ablate': cmd_ablate,
    'dump': cmd_dump,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, dispatch the verb and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    missing = [f"--{name}" for name in _REQUIRED.get(args.verb, ()) if not getattr(args, name)]
    if missing:
        parser.print_usage(sys.stderr)
        print(f"stagehide {args.verb}: missing {', '.join(missing)}", file=sys.stderr)
        return 2
    try:
        cfg = settings_manager.resolve(args.config, args.overrides)
    except (ValueError, FileNotFoundError) as e:
        parser.print_usage(sys.stderr)
        print(f"stagehide: config error: {e}", file=sys.stderr)
        return 2

    logging.info(f"stagehide {args.verb} with seed {cfg.seed}, resolved config:\n"
                 f"{settings_manager.to_text(cfg)}")
    try:
        summary = COMMANDS[args.verb](args, cfg)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"stagehide {args.verb}: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logging.error(f"{args.verb} failed: {e}")
        print(f"stagehide {args.verb}: error: {e}", file=sys.stderr)
        return 1

    print(json.dumps({'verb': args.verb, 'status': 'ok', **summary}))
    return 0


def main():
    """Command-line entry point."""
    load_environment()
    setup_logging()
    sys.exit(run())


if __name__ == "__main__":
    main()
