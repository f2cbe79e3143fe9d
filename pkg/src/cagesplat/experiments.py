"""Zero-shot experiment driver: train on the flat-sheet proxy, deploy on an
unseen geometry, score against the analytic oracle, and run the
direct-regression ablation under the identical protocol.
"""

from __future__ import annotations

import os

import numpy as np

from . import sensor as sn
from .config import PipelineConfig
from .metrics import bend_angle, chamfer
from .pipeline import (
    center_mask,
    cmd_fit_labels,
    cmd_gen,
    cmd_infer,
    cmd_train,
    dataset_sequence_dirs,
)

EVAL_BEND_AXES = [-np.pi / 2]
TRAIN_BEND_AXES = [-np.pi / 2, -np.pi / 4]
TRAIN_TWIST_AXES = [0.0, np.pi / 4]


def zero_shot_config() -> PipelineConfig:
    """Desk-scale settings sized for a single-core run."""
    cfg = PipelineConfig()
    cfg.scene.n_gaussians = 3000
    cfg.cage.nx = cfg.cage.ny = cfg.cage.nz = 7
    cfg.dataset.n_keyposes = 6
    cfg.dataset.n_interp = 4
    cfg.dataset.magnitude_scales = (1.0,)
    cfg.train.epochs = 40
    cfg.train.lr0 = 2e-3
    cfg.train.early_stop_patience = 12
    cfg.train.batch = 13
    cfg.infer.ema_beta = 0.3
    cfg.eval.ssim_renders = False
    return cfg


def generate_training_data(cfg: PipelineConfig, out_dir) -> list[str]:
    paths = []
    paths += cmd_gen(cfg, out_dir, kind="sheet", modes=("bend",),
                     axis_angles=TRAIN_BEND_AXES, geometry_id="sheet")
    paths += cmd_gen(cfg, out_dir, kind="sheet", modes=("twist",),
                     axis_angles=TRAIN_TWIST_AXES, geometry_id="sheet")
    return paths


def generate_eval_data(cfg: PipelineConfig, out_dir, kind: str = "cylinder",
                       include_twist: bool = True) -> list[str]:
    paths = cmd_gen(cfg, out_dir, kind=kind, modes=("bend",),
                    axis_angles=EVAL_BEND_AXES, magnitude_scales=(1.0,),
                    seed=cfg.scene.seed + 101, geometry_id=kind)
    if include_twist:
        paths += cmd_gen(cfg, out_dir, kind=kind, modes=("twist",),
                         axis_angles=[0.0], magnitude_scales=(1.0,),
                         seed=cfg.scene.seed + 101, geometry_id=kind)
    return paths


def bend_frame_metrics(cfg: PipelineConfig, data_dir, pred_root) -> dict:
    """Chamfer/angle statistics over eval bend frames at 30-90 degrees."""
    scene = sn.load_sequence_scene(dataset_sequence_dirs(data_dir)[0])
    rest = scene.centers
    mask = center_mask(scene, cfg.eval.center_fraction)
    lo_mag, hi_mag = np.radians(30.0) - 1e-9, np.radians(90.0) + 1e-9
    full, center, baseline, angles = [], [], [], []
    for seq_dir in dataset_sequence_dirs(data_dir):
        seq = sn.load_sequence(seq_dir)
        if seq.mode != "bend":
            continue
        pred = np.fromfile(
            os.path.join(pred_root, os.path.basename(seq_dir), "pred_gauss.bin"),
            dtype="<f4").reshape(seq.gt.shape)
        for t, st in enumerate(seq.states):
            if not lo_mag <= abs(st.magnitude) <= hi_mag:
                continue
            p = rest + pred[t]
            g = rest + seq.gt[t]
            full.append(chamfer(p, g))
            center.append(chamfer(p[mask], g[mask]))
            baseline.append(chamfer(rest, g))
            angles.append(abs(bend_angle(p, rest) - bend_angle(g, rest)))
    return {
        "chamfer_full_mm": float(np.mean(full)),
        "chamfer_center_mm": float(np.mean(center)),
        "baseline_chamfer_mm": float(np.mean(baseline)),
        "angle_err_deg": float(np.mean(angles)),
        "n_frames": len(full),
    }


def run_zero_shot(cfg: PipelineConfig, workdir, *, eval_kind: str = "cylinder",
                  run_ablation: bool = True, verbose: bool = True) -> dict:
    """Full protocol; returns the acceptance quantities."""
    train_dir = os.path.join(workdir, "train_data")
    eval_dir = os.path.join(workdir, "eval_data")
    model_dir = os.path.join(workdir, "models")
    if verbose:
        print("[zero-shot] generating sheet training data")
    generate_training_data(cfg, train_dir)
    if verbose:
        print("[zero-shot] extracting cage labels")
    cmd_fit_labels(cfg, train_dir, verbose=verbose)
    if verbose:
        print("[zero-shot] training cage deformer")
    ckpt, history = cmd_train(cfg, train_dir, model_dir, verbose=verbose)
    results = {"history_epochs": len(history.epochs)}
    if run_ablation:
        if verbose:
            print("[zero-shot] training direct-regression ablation")
        ckpt_direct, _ = cmd_train(cfg, train_dir, model_dir, variant="direct",
                                   verbose=verbose)
    if verbose:
        print(f"[zero-shot] generating unseen {eval_kind} evaluation data")
    generate_eval_data(cfg, eval_dir, kind=eval_kind)
    if verbose:
        print("[zero-shot] inferring on the unseen geometry")
    cmd_infer(cfg, ckpt, eval_dir, os.path.join(workdir, "pred"),
              verbose=verbose)
    results["cage"] = bend_frame_metrics(cfg, eval_dir,
                                         os.path.join(workdir, "pred"))
    if run_ablation:
        cmd_infer(cfg, ckpt_direct, eval_dir,
                  os.path.join(workdir, "pred_direct"), variant="direct",
                  verbose=verbose)
        results["direct"] = bend_frame_metrics(
            cfg, eval_dir, os.path.join(workdir, "pred_direct"))
    if verbose:
        c = results["cage"]
        print(f"[zero-shot] cage: full {c['chamfer_full_mm']:.2f} mm, "
              f"center {c['chamfer_center_mm']:.2f} mm, "
              f"baseline {c['baseline_chamfer_mm']:.2f} mm, "
              f"angle err {c['angle_err_deg']:.2f} deg")
        if run_ablation:
            print(f"[zero-shot] direct ablation: full "
                  f"{results['direct']['chamfer_full_mm']:.2f} mm")
    return results
