use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{error, info};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;
use stablegrasp::axisfit::{approximation_error_curve, fit_one_dof, fit_static, ApproximationCurves, FitReport};
use stablegrasp::bundle::{load_bundle, write_synth_bundle, Bundle};
use stablegrasp::contact::{contact_iou_curve, segment_stable_grasp, ContactSet, GraspInterval};
use stablegrasp::curve::{bin_mean, frames_with_margin, Curve};
use stablegrasp::geometry::{object_to_camera, Mesh, RigidTransform};
use stablegrasp::io::{rgb_png, write_atomic, write_json};
use stablegrasp::metrics::{aggregate, contact_sets, evaluate_sequence, report_csv, MetricReport, SequenceEvaluation, SequenceMetrics};
use stablegrasp::optimize::{self, OptimizeConfig, Trajectory};
use stablegrasp::render::{render_hard, Viewport};
use stablegrasp::sequence::{sample_frames, GraspSequence};
use stablegrasp::synth::{generate, SynthSpec};
use stablegrasp::{Error, Result};

use crate::args::*;
use crate::poses::{load_poses, read_result, PoseSet, ReconstructionOutput, RESULT_FILE};
use crate::{Failure, Outcome};

fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output types serialize");
    s.push('\n');
    s
}

/// TOML unless the extension is `.json`.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<Bundle>> {
    paths.par_iter().map(|p| load_bundle(p)).collect()
}

/// Output subdirectory names, taken from the bundle directories.
fn bundle_keys(bundles: &[Bundle]) -> Result<Vec<String>> {
    let keys: Vec<String> = bundles
        .iter()
        .map(|b| {
            let dir = std::fs::canonicalize(&b.dir).unwrap_or_else(|_| b.dir.clone());
            dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| b.name())
        })
        .collect();
    let mut seen = BTreeSet::new();
    for k in &keys {
        if !seen.insert(k) {
            return Err(Error::invalid(format!("two bundles share the directory name {k:?}")));
        }
    }
    Ok(keys)
}

fn pose_contacts(p: &PoseSet, delta: f64) -> Result<Vec<ContactSet>> {
    let hands: Vec<Mesh> = p.sequence.frames.iter().map(|f| f.hand_vertices.clone()).collect();
    contact_sets(&p.poses, &p.scales, &p.sequence.object_mesh, &hands, delta)
}

fn single_pose_file(poses: &Option<PathBuf>, n_bundles: usize) -> Result<()> {
    if poses.is_some() && n_bundles > 1 {
        return Err(Error::invalid("--poses applies to a single bundle"));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SegmentRecord {
    pub bundle: PathBuf,
    pub name: String,
    pub n_frames: usize,
    pub tau: f64,
    pub contact_delta: f64,
    /// Indices into the frames the poses cover.
    pub interval: GraspInterval,
    pub length: usize,
    /// Bundle frame indices of the interval ends.
    pub first_frame: usize,
    pub last_frame: usize,
}

pub fn segment(a: &SegmentArgs) -> Result<Outcome, Failure> {
    single_pose_file(&a.poses, a.bundles.len())?;
    let bundles = load_all(&a.bundles)?;
    let records = bundles
        .par_iter()
        .map(|b| -> Result<SegmentRecord> {
            let p = load_poses(b, a.poses.as_deref())?;
            let sets = pose_contacts(&p, a.contact.contact_delta)?;
            let interval = segment_stable_grasp(&sets, a.contact.tau)?;
            Ok(SegmentRecord {
                bundle: b.dir.clone(),
                name: b.name(),
                n_frames: sets.len(),
                tau: a.contact.tau,
                contact_delta: a.contact.contact_delta,
                interval,
                length: interval.len(),
                first_frame: p.frame_indices[interval.start],
                last_frame: p.frame_indices[interval.end],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut outcome = Outcome::default();
    for r in &records {
        if r.length < 2 {
            outcome.no_result.push(format!("{}: no stable interval spans two frames", r.name));
        }
    }
    let json = to_json(&records);
    match &a.out {
        Some(path) => write_atomic(path, json.as_bytes())?,
        None => outcome.stdout = json,
    }
    Ok(outcome)
}

fn parse_interval(text: &str, tau: f64, n: usize) -> Result<GraspInterval> {
    let bad = || Error::invalid(format!("--interval {text:?}: expected START:END"));
    let (s, e) = text.split_once(':').ok_or_else(bad)?;
    let start: usize = s.trim().parse().map_err(|_| bad())?;
    let end: usize = e.trim().parse().map_err(|_| bad())?;
    if start > end || end >= n {
        return Err(Error::invalid(format!("--interval {start}:{end} does not fit {n} frames")));
    }
    Ok(GraspInterval { start, end, tau })
}

#[derive(Debug, Clone, Serialize)]
pub struct StaticFit {
    pub base: RigidTransform,
    pub report: FitReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct OneDofFit {
    pub trajectory: Trajectory,
    pub report: FitReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitOutput {
    pub bundle: PathBuf,
    pub name: String,
    pub interval: GraspInterval,
    /// Bundle frames inside the interval.
    pub frame_indices: Vec<usize>,
    pub degenerate_axis: bool,
    pub static_fit: StaticFit,
    pub one_dof: OneDofFit,
}

fn curves_csv(frames: impl Iterator<Item = usize>, c: &ApproximationCurves) -> String {
    let mut s = String::from("frame,normalized_time,static_deg,one_dof_deg\n");
    for ((f, st), od) in frames.zip(&c.static_curve).zip(&c.one_dof_curve) {
        let _ = writeln!(s, "{f},{:.6},{:.6},{:.6}", st.normalized_time, st.value, od.value);
    }
    s
}

pub fn fit_axis(a: &FitAxisArgs) -> Result<Outcome, Failure> {
    let bundle = load_bundle(&a.bundle)?;
    let p = load_poses(&bundle, a.poses.as_deref())?;
    let n = p.poses.len();
    let interval = match &a.interval {
        Some(text) => parse_interval(text, a.contact.tau, n)?,
        None => {
            let iv = segment_stable_grasp(&pose_contacts(&p, a.contact.contact_delta)?, a.contact.tau)?;
            if iv.len() < 2 {
                return Err(Failure::NoResult(format!("{}: no stable interval spans two frames", bundle.name())));
            }
            iv
        }
    };
    let scale = p.scales[interval.start];
    let object = p.sequence.object_mesh.scaled(scale);
    let inside = &p.poses[interval.start..=interval.end];
    let (base, static_report) = fit_static(inside, &object)?;
    let (mut traj, dof_report) = fit_one_dof(inside, &object)?;
    traj.scale = scale;
    let curves = approximation_error_curve(&p.poses, &object, &interval, a.margin)?;
    let out = FitOutput {
        bundle: bundle.dir.clone(),
        name: bundle.name(),
        interval,
        frame_indices: p.frame_indices[interval.start..=interval.end].to_vec(),
        degenerate_axis: dof_report.degenerate_axis,
        static_fit: StaticFit {
            base,
            report: static_report,
        },
        one_dof: OneDofFit {
            trajectory: Trajectory::from_one_dof(&traj),
            report: dof_report,
        },
    };
    let frames = frames_with_margin(interval.start, interval.end, a.margin, n).map(|i| p.frame_indices[i]);
    let csv = curves_csv(frames, &curves);
    let mut outcome = Outcome::default();
    match &a.out {
        Some(dir) => {
            write_json(&dir.join("fit.json"), &out)?;
            write_atomic(&dir.join("curves.csv"), csv.as_bytes())?;
        }
        None => outcome.stdout = to_json(&out),
    }
    Ok(outcome)
}

/// Defaults, then the config file, then flags.
pub fn optimize_config(a: &ReconstructArgs) -> Result<OptimizeConfig> {
    let mut c: OptimizeConfig = match &a.config {
        Some(path) => read_config(path)?,
        None => OptimizeConfig::default(),
    };
    if let Some(v) = &a.variant {
        c.variant = v.parse()?;
    }
    if let Some(v) = a.frames {
        c.n_frames_sampled = v;
    }
    if let Some(v) = a.inits {
        c.n_initializations = v;
    }
    if let Some(v) = a.iterations {
        c.iterations = v;
    }
    if let Some(v) = a.render_size {
        c.render_size = v;
    }
    if let Some(v) = a.lambda_mask {
        c.weights.mask = v;
    }
    if let Some(v) = a.lambda_push {
        c.weights.push = v;
    }
    if let Some(v) = a.lambda_pull {
        c.weights.pull = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    c.validate()?;
    Ok(c)
}

pub fn reconstruct_bundle(bundle: &Bundle, config: &OptimizeConfig, use_priors: bool) -> Result<ReconstructionOutput> {
    let (sub, frame_indices) = sample_frames(&bundle.sequence, config.n_frames_sampled)?;
    let priors = if use_priors { bundle.priors.as_deref() } else { None };
    let result = optimize::reconstruct(&sub, config, priors)?;
    info!("{}: energy {:.4} -> {:.4}", bundle.name(), result.initial_energy, result.total_energy);
    Ok(ReconstructionOutput {
        bundle: std::fs::canonicalize(&bundle.dir).unwrap_or_else(|_| bundle.dir.clone()),
        name: bundle.name(),
        category: bundle.category(),
        frame_indices,
        config: config.clone(),
        result,
    })
}

/// Prediction in red, observed object mask in green, hand mask in blue.
pub fn overlay_png(sequence: &GraspSequence, frame: usize, pose: &RigidTransform, scale: f64) -> Result<Vec<u8>> {
    let f = &sequence.frames[frame];
    let mesh = object_to_camera(&sequence.object_mesh, scale, pose, &f.hand_to_camera)?;
    let pred = render_hard(&mesh, &f.intrinsics, &Viewport::full_image(&f.intrinsics))?;
    let (w, h) = (f.intrinsics.width, f.intrinsics.height);
    let mut px = Vec::with_capacity(w as usize * h as usize * 3);
    for y in 0..h {
        for x in 0..w {
            for on in [pred.get(x, y), f.object_mask.get(x, y), f.hand_mask.get(x, y)] {
                px.push(if on { 255 } else { 0 });
            }
        }
    }
    rgb_png(w, h, &px)
}

fn write_reconstruction(dir: &Path, bundle: &Bundle, out: &ReconstructionOutput, overlays: bool) -> Result<()> {
    write_json(&dir.join(RESULT_FILE), out)?;
    if overlays {
        let r = &out.result;
        for (k, &i) in out.frame_indices.iter().enumerate() {
            let png = overlay_png(&bundle.sequence, i, &r.object_to_hand[k], r.scales[k]).map_err(|e| e.in_frame(i))?;
            write_atomic(&dir.join("overlays").join(format!("frame_{i:04}.png")), &png)?;
        }
    }
    Ok(())
}

pub fn reconstruct(a: &ReconstructArgs) -> Result<Outcome, Failure> {
    let config = optimize_config(a)?;
    if a.out.is_none() && (a.bundles.len() > 1 || a.overlays) {
        return Err(Error::invalid("--out is required for several bundles or --overlays").into());
    }
    let bundles = load_all(&a.bundles)?;
    let keys = bundle_keys(&bundles)?;
    let results: Vec<Result<ReconstructionOutput>> =
        bundles.par_iter().map(|b| reconstruct_bundle(b, &config, !a.no_priors)).collect();
    let mut outcome = Outcome::default();
    let mut first_error = None;
    for ((b, key), r) in bundles.iter().zip(&keys).zip(results) {
        match (r, &a.out) {
            (Ok(out), Some(root)) => write_reconstruction(&root.join(key), b, &out, a.overlays)?,
            (Ok(out), None) => outcome.stdout = to_json(&out),
            (Err(e), _) => {
                error!("{}: {e}", b.dir.display());
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) => Err(e.into()),
        None => Ok(outcome),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsOutput {
    pub thresholds: Vec<f64>,
    pub contact_delta: f64,
    pub sequences: Vec<SequenceMetrics>,
    pub reports: Vec<MetricReport>,
}

pub fn score_result(out: &ReconstructionOutput, bundle: &Bundle, gt_file: Option<&Path>, thresholds: &[f64], contact_delta: f64) -> Result<SequenceMetrics> {
    let gt = load_poses(bundle, gt_file)?;
    let n = bundle.sequence.len();
    if gt.frame_indices.len() != n {
        return Err(Error::invalid("ground truth must cover every bundle frame"));
    }
    if let Some(bad) = out.frame_indices.iter().find(|&&i| i >= n) {
        return Err(Error::invalid(format!("result frame {bad} outside a {n}-frame bundle")));
    }
    let sequence = bundle.sequence.subsequence(&out.frame_indices);
    let gt_poses: Vec<RigidTransform> = out.frame_indices.iter().map(|&i| gt.poses[i]).collect();
    evaluate_sequence(&SequenceEvaluation {
        name: &out.name,
        category: &out.category,
        sequence: &sequence,
        pred_poses: &out.result.object_to_hand,
        pred_scales: &out.result.scales,
        gt_poses: &gt_poses,
        gt_scale: gt.scales[0],
        contact_delta,
        thresholds,
    })
}

pub fn metrics(a: &MetricsArgs) -> Result<Outcome, Failure> {
    if a.results.len() > 1 && (a.gt.is_some() || a.bundle.is_some()) {
        return Err(Error::invalid("--gt and --bundle apply to a single result").into());
    }
    if a.thresholds.is_empty() || a.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::invalid("thresholds must lie strictly between 0 and 1").into());
    }
    let sequences = a
        .results
        .par_iter()
        .map(|path| {
            let out = read_result(path)?;
            let bundle = load_bundle(a.bundle.as_deref().unwrap_or(&out.bundle))?;
            score_result(&out, &bundle, a.gt.as_deref(), &a.thresholds, a.contact_delta)
        })
        .collect::<Result<Vec<_>>>()?;
    let reports = aggregate(&sequences)?;
    let csv = report_csv(&reports, &a.thresholds);
    let mut outcome = Outcome::default();
    match &a.out {
        Some(dir) => {
            write_atomic(&dir.join("metrics.csv"), csv.as_bytes())?;
            let full = MetricsOutput {
                thresholds: a.thresholds.clone(),
                contact_delta: a.contact_delta,
                sequences,
                reports,
            };
            write_json(&dir.join("metrics.json"), &full)?;
        }
        None => outcome.stdout = csv,
    }
    Ok(outcome)
}

pub fn synth(a: &SynthArgs) -> Result<Outcome, Failure> {
    let mut spec: SynthSpec = read_config(&a.spec)?;
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let scene = generate(&spec)?;
    write_synth_bundle(&a.out, &scene)?;
    info!("wrote {} frames to {}", scene.sequence.len(), a.out.display());
    Ok(Outcome::default())
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeEntry {
    pub bundle: PathBuf,
    pub name: String,
    pub key: String,
    pub interval: GraspInterval,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeSummary {
    pub tau: f64,
    pub contact_delta: f64,
    pub margin: f64,
    pub bins: usize,
    pub bundles: Vec<AnalyzeEntry>,
}

struct Study {
    interval: GraspInterval,
    frames: Vec<usize>,
    contact: Curve,
    rotation: ApproximationCurves,
}

fn study(b: &Bundle, a: &AnalyzeArgs) -> Result<Study> {
    let p = load_poses(b, None)?;
    let sets = pose_contacts(&p, a.contact.contact_delta)?;
    let interval = segment_stable_grasp(&sets, a.contact.tau)?;
    let object = p.sequence.object_mesh.scaled(p.scales[interval.start]);
    Ok(Study {
        interval,
        frames: frames_with_margin(interval.start, interval.end, a.margin, sets.len()).collect(),
        contact: contact_iou_curve(&sets, &interval, a.margin)?,
        rotation: approximation_error_curve(&p.poses, &object, &interval, a.margin)?,
    })
}

fn binned_csv(header: &str, columns: &[Curve]) -> String {
    let mut s = format!("{header}\n");
    for (i, p) in columns[0].iter().enumerate() {
        let _ = write!(s, "{:.6}", p.normalized_time);
        for c in columns {
            match c.get(i).filter(|q| q.normalized_time == p.normalized_time) {
                Some(q) => {
                    let _ = write!(s, ",{:.6}", q.value);
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

pub fn analyze(a: &AnalyzeArgs) -> Result<Outcome, Failure> {
    if !(a.margin >= 0.0) || a.bins == 0 {
        return Err(Error::invalid("--margin must be >= 0 and --bins >= 1").into());
    }
    let bundles = load_all(&a.bundles)?;
    let keys = bundle_keys(&bundles)?;
    let studies = bundles.par_iter().map(|b| study(b, a)).collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::new();
    for ((b, key), s) in bundles.iter().zip(&keys).zip(&studies) {
        let dir = a.out.join(key);
        let mut contact = String::from("frame,normalized_time,contact_iou\n");
        for (f, p) in s.frames.iter().zip(&s.contact) {
            let _ = writeln!(contact, "{f},{:.6},{:.6}", p.normalized_time, p.value);
        }
        write_atomic(&dir.join("contact_iou.csv"), contact.as_bytes())?;
        write_atomic(&dir.join("rotation_error.csv"), curves_csv(s.frames.iter().copied(), &s.rotation).as_bytes())?;
        entries.push(AnalyzeEntry {
            bundle: b.dir.clone(),
            name: b.name(),
            key: key.clone(),
            interval: s.interval,
        });
    }
    let (lo, hi) = (-a.margin, 1.0 + a.margin);
    let gather = |f: &dyn Fn(&Study) -> &Curve| -> Curve {
        let curves: Vec<Curve> = studies.iter().map(|s| f(s).clone()).collect();
        bin_mean(&curves, a.bins, lo, hi)
    };
    let contact = gather(&|s| &s.contact);
    let st = gather(&|s| &s.rotation.static_curve);
    let od = gather(&|s| &s.rotation.one_dof_curve);
    write_atomic(&a.out.join("contact_iou.csv"), binned_csv("normalized_time,contact_iou", &[contact]).as_bytes())?;
    write_atomic(
        &a.out.join("rotation_error.csv"),
        binned_csv("normalized_time,static_deg,one_dof_deg", &[st, od]).as_bytes(),
    )?;
    write_json(
        &a.out.join("summary.json"),
        &AnalyzeSummary {
            tau: a.contact.tau,
            contact_delta: a.contact.contact_delta,
            margin: a.margin,
            bins: a.bins,
            bundles: entries,
        },
    )?;
    Ok(Outcome::default())
}
