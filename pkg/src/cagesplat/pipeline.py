"""End-to-end pipeline stages shared by the CLI and the experiment driver:
dataset generation, cage-label fitting, training, zero-shot inference, and
evaluation. Each stage reads/writes the on-disk formats owned by the data
modules, so stages compose through directories.
"""

from __future__ import annotations

import csv
import os
import time

import numpy as np

from . import sensor as sn
from .cage import (
    BindingWeights,
    CageGrid,
    bind_weights,
    cage_for_scene,
    extract_cage_labels,
    propagate,
    save_weights,
)
from .config import PipelineConfig
from .metrics import MetricReport, bend_angle, chamfer, ssim, twist_angle, voxel_iou
from .nn import (
    EmaState,
    TrainConfig,
    build_direct_model,
    build_model,
    forward,
    infer_smoothed,
    load_checkpoint,
    load_direct_checkpoint,
    predict_displacements,
    save_checkpoint,
    save_direct_checkpoint,
    train,
)
from .render import Camera, render_frame, write_image
from .scene import (
    GaussianScene,
    TriangleMesh,
    init_proxy_from_mesh,
    load_scene,
    make_box_mesh,
    make_cylinder_mesh,
    read_stl_binary,
)


class PipelineError(RuntimeError):
    pass


def build_geometry(cfg: PipelineConfig, kind: str | None = None,
                   stl_path: str | None = None) -> TriangleMesh:
    kind = kind or cfg.geometry.kind
    if stl_path:
        kind = "stl"
    if kind == "sheet":
        size = cfg.geometry.sheet_size
        return make_box_mesh(size, center=(0.0, 0.0, 0.0))
    if kind == "cylinder":
        return make_cylinder_mesh(cfg.geometry.cylinder_radius,
                                  cfg.geometry.cylinder_length,
                                  segments=cfg.geometry.cylinder_segments)
    path = stl_path or cfg.geometry.stl_path
    if not path:
        raise PipelineError("geometry kind 'stl' needs a path")
    return read_stl_binary(path)


def build_proxy(cfg: PipelineConfig, mesh: TriangleMesh,
                seed: int | None = None) -> GaussianScene:
    return init_proxy_from_mesh(mesh, cfg.scene.n_gaussians,
                                cfg.scene.seed if seed is None else seed)


def _axis_angles(mode: str, n_axes: int) -> list[float]:
    base = -np.pi / 2 if mode == "bend" else 0.0
    return [base + i * (np.pi / 2) / max(n_axes, 1) for i in range(n_axes)]


def sequence_name(mode: str, axis_index: int, scale_index: int) -> str:
    return f"{mode}_ax{axis_index:02d}_sc{scale_index:02d}"


def cmd_gen(cfg: PipelineConfig, out_dir, *, kind: str | None = None,
            stl_path: str | None = None, seed: int | None = None,
            modes=None, axis_angles=None, magnitude_scales=None,
            geometry_id: str | None = None) -> list[str]:
    """Generate motion-sequence directories for a geometry; returns paths."""
    os.makedirs(out_dir, exist_ok=True)
    mesh = build_geometry(cfg, kind, stl_path)
    scene = build_proxy(cfg, mesh, seed)
    seed = cfg.scene.seed if seed is None else seed
    gid = geometry_id or (kind or cfg.geometry.kind)
    modes = modes or cfg.dataset.modes
    written = []
    for mode in modes:
        max_mag = np.radians(cfg.dataset.bend_max_deg if mode == "bend"
                             else cfg.dataset.twist_max_deg)
        angles = axis_angles if axis_angles is not None else \
            _axis_angles(mode, cfg.dataset.n_axes)
        scales = magnitude_scales or cfg.dataset.magnitude_scales
        seqs = sn.generate_dataset(
            scene, mode, len(angles), cfg.dataset.n_keyposes,
            cfg.dataset.n_interp, seed, max_mag,
            magnitude_scales=scales, axis_angles=angles,
            noise_std=cfg.sensor.noise_ohms, sample_hz=cfg.sensor.sample_hz,
            shape=(cfg.sensor.grid_h, cfg.sensor.grid_w), geometry_id=gid,
            gauge_alpha=cfg.sensor.gauge_alpha,
            gauge_thickness=cfg.sensor.gauge_thickness,
            twist_gauge=cfg.sensor.twist_gauge)
        i = 0
        for ai in range(len(angles)):
            for si in range(len(scales)):
                path = os.path.join(out_dir, sequence_name(mode, ai, si))
                sn.save_sequence(seqs[i], path, scene=scene)
                written.append(path)
                i += 1
    return written


def dataset_sequence_dirs(root) -> list[str]:
    out = []
    for name in sorted(os.listdir(root)):
        path = os.path.join(root, name)
        if os.path.isdir(path) and os.path.exists(os.path.join(path, "meta")):
            out.append(path)
    if not out:
        raise PipelineError(f"no sequence directories under {root}")
    return out


def dataset_cage_and_weights(cfg: PipelineConfig, scene: GaussianScene):
    cage = cage_for_scene(scene, cfg.cage.dims)
    weights = bind_weights(cage, scene, cfg.cage.k, cfg.cage.epsilon)
    return cage, weights


def cmd_fit_labels(cfg: PipelineConfig, dataset_dir, verbose: bool = True) -> dict:
    """Extract cage labels for every sequence; returns residual stats."""
    seq_dirs = dataset_sequence_dirs(dataset_dir)
    scene = sn.load_sequence_scene(seq_dirs[0])
    cage, weights = dataset_cage_and_weights(cfg, scene)
    save_weights(weights, os.path.join(dataset_dir, "binding.cbwt"))
    support = weights.node_support().astype(np.float32)
    report = {"sequences": [], "max_residual": 0.0}
    for path in seq_dirs:
        seq = sn.load_sequence(path)
        labels = np.zeros((len(seq), cage.n_nodes, 3), dtype=np.float32)
        prev = None
        worst = 0.0
        for t in range(len(seq)):
            field = extract_cage_labels(weights, seq.gt[t].astype(np.float64),
                                        cfg.cage.lambda_reg, x0=prev)
            labels[t] = field.offsets.astype(np.float32)
            prev = field.offsets
            W = weights.as_sparse()
            resid = np.linalg.norm(W @ field.offsets - seq.gt[t]) / \
                max(np.linalg.norm(seq.gt[t]), 1e-12)
            worst = max(worst, float(resid))
        seq.labels = labels
        seq.node_support = support
        sn.save_labels(seq, path)
        report["sequences"].append({"path": path, "fit_residual": worst})
        report["max_residual"] = max(report["max_residual"], worst)
        if verbose:
            print(f"  labels {os.path.basename(path)}: "
                  f"relative fit residual {worst:.3e}")
    return report


def cmd_train(cfg: PipelineConfig, dataset_dir, out_dir, *,
              variant: str = "cage", verbose: bool = True):
    """Train the deformer (or the direct-regression ablation variant)."""
    os.makedirs(out_dir, exist_ok=True)
    seq_dirs = dataset_sequence_dirs(dataset_dir)
    sequences = [sn.load_sequence(p) for p in seq_dirs]
    scene = sn.load_sequence_scene(seq_dirs[0])
    tc = TrainConfig(epochs=cfg.train.epochs, lr0=cfg.train.lr0,
                     lambda_smooth=cfg.train.lambda_smooth,
                     noise_std=cfg.train.noise_std,
                     early_stop_patience=cfg.train.early_stop_patience,
                     batch=cfg.train.batch, val_fraction=cfg.train.val_fraction,
                     seed=cfg.train.seed, cutoff_hz=cfg.sensor.cutoff_hz)
    t0 = time.perf_counter()
    if variant == "direct":
        model = build_direct_model((cfg.sensor.grid_h, cfg.sensor.grid_w),
                                   seed=cfg.train.seed,
                                   feat_dim=cfg.model.feat_dim)
        history = train(model, sequences, tc, scene=scene,
                        history_path=os.path.join(out_dir, "history.csv"))
        ckpt = os.path.join(out_dir, "model_direct.cdnn")
        save_direct_checkpoint(model, ckpt)
    else:
        cage, weights = dataset_cage_and_weights(cfg, scene)
        support = sequences[0].node_support
        if support is None:
            support = weights.node_support().astype(np.float32)
        node_weights = (support > 0).astype(np.float32)
        model = build_model((cfg.sensor.grid_h, cfg.sensor.grid_w), cage,
                            seed=cfg.train.seed, heads=cfg.model.heads,
                            hidden=cfg.model.hidden, feat_dim=cfg.model.feat_dim,
                            head_hidden=cfg.model.head_hidden,
                            head_init=cfg.model.head_init)
        history = train(model, sequences, tc, cage=cage,
                        node_weights=node_weights,
                        history_path=os.path.join(out_dir, "history.csv"))
        ckpt = os.path.join(out_dir, "model.cdnn")
        save_checkpoint(model, ckpt)
    if verbose:
        dt = time.perf_counter() - t0
        print(f"  trained {variant} model in {dt:.1f} s, "
              f"{len(history.epochs)} epochs, best val "
              f"{history.best_val:.4e} @ {history.best_epoch}"
              f"{' (early stop)' if history.stopped_early else ''}")
    return ckpt, history


def _eval_camera(cfg: PipelineConfig, scene: GaussianScene) -> Camera:
    lo, hi = scene.bounds
    center = (lo + hi) / 2.0
    return Camera.look_at(
        position=center + np.array([0.0, -cfg.render.orbit_distance,
                                    0.08 * cfg.render.orbit_distance / 0.25]),
        target=center, fov_y=np.radians(cfg.render.fov_deg),
        width=cfg.render.width, height=cfg.render.height,
        near=cfg.render.near, far=cfg.render.far)


def cmd_infer(cfg: PipelineConfig, checkpoint, data_dir, out_dir, *,
              variant: str = "cage", verbose: bool = True) -> list[str]:
    """Per frame: filter chain -> network -> EMA -> propagate (-> render).

    Consumes only the checkpoint plus the target dataset directory (sensor
    frames and the geometry's rest proxy); training data is not touched.
    """
    os.makedirs(out_dir, exist_ok=True)
    seq_dirs = dataset_sequence_dirs(data_dir)
    scene = sn.load_sequence_scene(seq_dirs[0])
    if variant == "direct":
        model = load_direct_checkpoint(checkpoint)
        cage = weights = None
    else:
        cage = cage_for_scene(scene, cfg.cage.dims)
        model = load_checkpoint(checkpoint, expect_cage=cage)
        weights = bind_weights(cage, scene, cfg.cage.k, cfg.cage.epsilon)
    cam = _eval_camera(cfg, scene)
    written = []
    for path in seq_dirs:
        seq = sn.load_sequence(path)
        pred_dir = os.path.join(out_dir, os.path.basename(path))
        os.makedirs(pred_dir, exist_ok=True)
        pred_gauss = np.zeros_like(seq.gt)
        pred_cage = None if cage is None else \
            np.zeros((len(seq), cage.n_nodes, 3), dtype=np.float32)
        ema = EmaState(beta=cfg.infer.ema_beta)
        timing = []
        filt = sn.filter_chain(seq.frames, cfg.sensor.cutoff_hz, seq.sample_hz)
        for t, frame in enumerate(filt):
            t0 = time.perf_counter()
            t_norm = seq.states[t].phase
            if variant == "direct":
                disp = predict_displacements(model, frame.grid, t_norm, scene)
                if ema.beta > 0 and t > 0:
                    disp = ema.beta * prev_disp + (1 - ema.beta) * disp
                prev_disp = disp
                deformed = scene.with_centers(scene.centers + disp)
            else:
                field = infer_smoothed(model, frame.grid, t_norm, cage, ema)
                pred_cage[t] = field.offsets.astype(np.float32)
                deformed = propagate(weights, field, scene)
                disp = deformed.centers - scene.centers
            pred_gauss[t] = disp.astype(np.float32)
            t1 = time.perf_counter()
            render_ms = 0.0
            if cfg.infer.render_every and t % cfg.infer.render_every == 0:
                img, stats = render_frame(deformed, cam, cfg.render.tile_px)
                write_image(img, os.path.join(pred_dir, f"frame_{t:04d}.png"))
                render_ms = stats.total_ms
            timing.append((t, (t1 - t0) * 1e3, render_ms))
        pred_gauss.astype("<f4").tofile(os.path.join(pred_dir, "pred_gauss.bin"))
        if pred_cage is not None:
            pred_cage.astype("<f4").tofile(os.path.join(pred_dir, "pred_cage.bin"))
        with open(os.path.join(pred_dir, "timing.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "predict_ms", "render_ms"])
            w.writerows([(t, f"{a:.3f}", f"{b:.3f}") for t, a, b in timing])
        if cfg.infer.save_scenes:
            from .scene import save_scene
            save_scene(scene.with_centers(scene.centers + pred_gauss[-1]),
                       os.path.join(pred_dir, "final.cspl"))
        written.append(pred_dir)
        if verbose:
            mean_ms = np.mean([a for _, a, _ in timing])
            print(f"  inferred {os.path.basename(path)}: "
                  f"{len(seq)} frames, {mean_ms:.1f} ms/frame")
    return written


def center_mask(scene: GaussianScene, fraction: float) -> np.ndarray:
    """Rest centers within the central in-plane fraction (sensed region)."""
    lo, hi = scene.bounds
    mid = (lo + hi) / 2.0
    half = (hi - lo) * fraction / 2.0
    m = np.ones(len(scene), dtype=bool)
    for ax in range(2):                      # in-plane axes only
        m &= np.abs(scene.centers[:, ax] - mid[ax]) <= max(half[ax], 1e-9)
    return m


def eval_sequence(cfg: PipelineConfig, seq_dir, pred_dir, scene: GaussianScene,
                  render_cam: Camera | None = None) -> tuple[list[MetricReport], dict]:
    seq = sn.load_sequence(seq_dir)
    pred_path = os.path.join(pred_dir, "pred_gauss.bin")
    if not os.path.exists(pred_path):
        raise PipelineError(f"missing predictions for sequence {seq_dir}")
    pred = np.fromfile(pred_path, dtype="<f4").reshape(seq.gt.shape)
    mask = center_mask(scene, cfg.eval.center_fraction)
    rest = scene.centers
    rows = {"center": mask, "full": np.ones(len(scene), dtype=bool)}
    cham = {k: [] for k in rows}
    iou = {k: [] for k in rows}
    ssim_vals = []
    angle_errs = []
    baseline = []
    lo_mag, hi_mag = np.radians(30.0), np.radians(90.0) + 1e-9
    for t in range(len(seq)):
        p_pts = rest + pred[t]
        g_pts = rest + seq.gt[t]
        for key, m in rows.items():
            cham[key].append(chamfer(p_pts[m], g_pts[m]))
            iou[key].append(voxel_iou(p_pts[m], g_pts[m], cfg.eval.voxel_mm))
        baseline.append(chamfer(rest, g_pts))
        st = seq.states[t]
        if seq.mode == "bend" and lo_mag <= abs(st.magnitude) <= hi_mag:
            angle_errs.append(abs(bend_angle(p_pts, rest) - bend_angle(g_pts, rest)))
        elif seq.mode == "twist" and abs(st.magnitude) > np.radians(10.0):
            angle_errs.append(abs(twist_angle(p_pts, rest) - twist_angle(g_pts, rest)))
    if cfg.eval.ssim_renders and render_cam is not None:
        step = max(len(seq) // 5, 1)
        for t in range(0, len(seq), step):
            img_p, _ = render_frame(scene.with_centers(rest + pred[t]), render_cam)
            img_g, _ = render_frame(scene.with_centers(rest + seq.gt[t]), render_cam)
            ssim_vals.append(ssim(img_p, img_g))
    mean_angle = float(np.mean(angle_errs)) if angle_errs else 0.0
    mean_ssim = float(np.mean(ssim_vals)) if ssim_vals else float("nan")
    reports = []
    name = os.path.basename(seq_dir)
    for key in ("center", "full"):
        reports.append(MetricReport(
            sequence_id=name, region=key,
            iou=float(np.mean(iou[key])),
            ssim=mean_ssim if key == "full" else float("nan"),
            chamfer_mm=float(np.mean(cham[key])),
            angle_error_deg=mean_angle))
    extras = {
        "mode": seq.mode,
        "baseline_chamfer_mm": float(np.mean(baseline)),
        "chamfer_center": float(np.mean(cham["center"])),
        "chamfer_full": float(np.mean(cham["full"])),
        "angle_err_deg": mean_angle,
    }
    return reports, extras


def cmd_eval(cfg: PipelineConfig, data_dir, pred_root, out_csv=None,
             verbose: bool = True):
    seq_dirs = dataset_sequence_dirs(data_dir)
    scene = sn.load_sequence_scene(seq_dirs[0])
    cam = _eval_camera(cfg, scene) if cfg.eval.ssim_renders else None
    missing = [os.path.basename(p) for p in seq_dirs
               if not os.path.exists(os.path.join(
                   pred_root, os.path.basename(p), "pred_gauss.bin"))]
    if missing:
        raise PipelineError(f"missing predictions for sequences: {missing}")
    all_reports = []
    all_extras = []
    for path in seq_dirs:
        reports, extras = eval_sequence(
            cfg, path, os.path.join(pred_root, os.path.basename(path)),
            scene, cam)
        all_reports.extend(reports)
        all_extras.append(extras)
        if verbose:
            full = next(r for r in reports if r.region == "full")
            print(f"  {full.sequence_id}: chamfer {full.chamfer_mm:.2f} mm, "
                  f"iou {full.iou:.3f}, angle err {full.angle_error_deg:.2f} deg")
    if out_csv:
        from .metrics import write_report_csv
        write_report_csv(all_reports, out_csv)
    summary = summarize(all_reports, all_extras)
    if verbose:
        print_summary(summary)
    return all_reports, all_extras, summary


def summarize(reports, extras) -> dict:
    """Mean metrics split by mode and region, mirroring the results table."""
    out = {}
    modes = sorted({e["mode"] for e in extras})
    by_id = {}
    for e in extras:
        by_id.setdefault(e["mode"], []).append(e)
    for mode in modes:
        rows_c = [r for r in reports if r.region == "center" and r.sequence_id.startswith(mode)]
        rows_f = [r for r in reports if r.region == "full" and r.sequence_id.startswith(mode)]
        out[f"{mode}_center"] = {
            "iou": float(np.mean([r.iou for r in rows_c])),
            "chamfer_mm": float(np.mean([r.chamfer_mm for r in rows_c])),
        }
        out[f"{mode}_full"] = {
            "iou": float(np.mean([r.iou for r in rows_f])),
            "ssim": float(np.nanmean([r.ssim for r in rows_f])),
            "chamfer_mm": float(np.mean([r.chamfer_mm for r in rows_f])),
            "angle_err_deg": float(np.mean([r.angle_error_deg for r in rows_f])),
        }
    full_rows = [r for r in reports if r.region == "full"]
    out["average_full"] = {
        "iou": float(np.mean([r.iou for r in full_rows])),
        "ssim": float(np.nanmean([r.ssim for r in full_rows])),
        "chamfer_mm": float(np.mean([r.chamfer_mm for r in full_rows])),
    }
    return out


def print_summary(summary: dict) -> None:
    print("  " + "-" * 58)
    print(f"  {'row':18s} {'IoU':>7s} {'SSIM':>7s} {'Chamfer(mm)':>12s}")
    for key, row in summary.items():
        ssim_s = f"{row.get('ssim', float('nan')):7.3f}" if "ssim" in row else "     --"
        print(f"  {key:18s} {row['iou']:7.3f} {ssim_s} {row['chamfer_mm']:12.3f}")
    print("  " + "-" * 58)
