use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mcdrop::calibration::{calibrate as calibrate_records, parse_records, write_reliability_csv};
use mcdrop::clustering::{
    build_instance_clusters, cluster_pipeline, Algorithm, ClusterConfig, InstanceCluster,
};
use mcdrop::evaluation::{
    cluster_to_detection, match_and_score, parse_ground_truth, write_eval_csv, EvalMode,
    DEFAULT_IOU_THRESHOLD,
};
use mcdrop::ingest::{keeps, parse_sample_set, write_sample_set, IngestConfig};
use mcdrop::model::SampleSet;
use mcdrop::report::{build_report, write_pgm, ClusterReport};
use mcdrop::synth::{generate, SceneSpec};
use mcdrop::{Error, Result};

use crate::output::{path_safe, write_atomic, write_json, write_text, Manifest};
use crate::svg;
use crate::{Common, ModeArg};

/// Class segments shown per cluster, background added when missing.
const TOP_CLASSES_SHOWN: usize = 5;

fn manifest(c: &Common, command: &'static str, inputs: &[&Path], config: serde_json::Value) -> Result<()> {
    let m = Manifest {
        tool: env!("CARGO_BIN_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        out_dir: c.out_dir.display().to_string(),
        seed: c.seed,
        config,
    };
    write_json(&c.out_dir.join(m.file_name()), &m)
}

fn ingest_config(c: &Common) -> IngestConfig {
    IngestConfig {
        background_threshold: c.background_threshold,
        ..IngestConfig::default()
    }
}

fn read_samples(path: &Path, cfg: &IngestConfig) -> Result<SampleSet> {
    let f = File::open(path).map_err(|e| io_context(path, e))?;
    parse_sample_set(BufReader::new(f), cfg).map_err(|e| file_context(path, e))
}

fn io_context(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn file_context(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { line, message } => Error::Parse {
            line,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    }
}

/// Runs `f` over the inputs in parallel and returns the results in input
/// order; the first failing input (in order) decides the error.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
    let results: Vec<Result<U>> = items.par_iter().map(f).collect();
    results.into_iter().collect()
}

fn unique_ids<'a>(ids: impl Iterator<Item = &'a str>) -> Result<()> {
    let mut seen = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(Error::Config(format!("image {id} given more than once")));
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSummary {
    pub cluster_id: usize,
    pub size: usize,
    pub split_refused: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageClusters {
    pub image_id: String,
    pub n_detections: usize,
    /// Cluster id per detection of the sample file; `null` for detections
    /// removed by the background filter.
    pub assignments: Vec<Option<usize>>,
    pub clusters: Vec<ClusterSummary>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClustersFile {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub split_threshold: usize,
    pub background_threshold: f64,
    pub images: Vec<ImageClusters>,
}

pub fn cluster(c: &Common, samples: &[PathBuf]) -> Result<()> {
    let inputs: Vec<&Path> = samples.iter().map(|p| p.as_path()).collect();
    let cfg = ClusterConfig {
        algorithm: c.algorithm.into(),
        split_threshold: c.split_threshold,
        seed: c.seed.unwrap_or(0),
        ..ClusterConfig::default()
    };
    manifest(c, "cluster", &inputs, serde_json::to_value(&cfg).map_err(std::io::Error::from)?)?;
    let ingest = ingest_config(c);
    let images = par_map(samples, |path| {
        let set = read_samples(path, &ingest)?;
        let kept: Vec<usize> = (0..set.len()).filter(|&i| keeps(&set.detections[i], &ingest)).collect();
        if kept.is_empty() {
            return Err(Error::NothingToCluster);
        }
        let filtered = SampleSet {
            detections: kept.iter().map(|&i| set.detections[i].clone()).collect(),
            ..set.clone()
        };
        let clusters = cluster_pipeline(&filtered, &cfg)?;
        let mut assignments = vec![None; set.len()];
        for cl in &clusters {
            for &i in &cl.detection_indices {
                assignments[kept[i]] = Some(cl.cluster_id);
            }
        }
        Ok(ImageClusters {
            image_id: set.image_id.clone(),
            n_detections: set.len(),
            assignments,
            clusters: clusters
                .iter()
                .map(|cl| ClusterSummary {
                    cluster_id: cl.cluster_id,
                    size: cl.len(),
                    split_refused: cl.split_refused,
                })
                .collect(),
        })
    })?;
    unique_ids(images.iter().map(|i| i.image_id.as_str()))?;
    let mut out = std::io::stdout().lock();
    for img in &images {
        let kept = img.assignments.iter().flatten().count();
        let sizes: Vec<String> = img.clusters.iter().map(|s| s.size.to_string()).collect();
        writeln!(
            out,
            "{}: {} clusters from {kept}/{} detections (sizes {})",
            img.image_id,
            img.clusters.len(),
            img.n_detections,
            sizes.join(", ")
        )?;
        for s in img.clusters.iter().filter(|s| s.split_refused) {
            eprintln!(
                "warning: {} cluster {} has {} members but would not split",
                img.image_id, s.cluster_id, s.size
            );
        }
    }
    let file = ClustersFile {
        algorithm: cfg.algorithm,
        seed: cfg.seed,
        split_threshold: cfg.split_threshold,
        background_threshold: c.background_threshold,
        images,
    };
    write_json(&c.out_dir.join("clusters.json"), &file)
}

fn read_clusters(path: &Path) -> Result<ClustersFile> {
    let f = File::open(path).map_err(|e| io_context(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", path.display()),
    })
}

/// Rebuilds the clusters of one image from its sample file and the stored
/// assignments.
fn restore_clusters(set: &SampleSet, img: &ImageClusters) -> Result<Vec<InstanceCluster>> {
    let mismatch = |what: &str| {
        Error::Config(format!(
            "clusters file does not match samples of image {}: {what}",
            set.image_id
        ))
    };
    if img.n_detections != set.len() || img.assignments.len() != set.len() {
        return Err(mismatch("detection count differs"));
    }
    let kept: Vec<usize> = (0..set.len()).filter(|&i| img.assignments[i].is_some()).collect();
    let labels: Vec<usize> = img.assignments.iter().flatten().copied().collect();
    let subset = SampleSet {
        detections: kept.iter().map(|&i| set.detections[i].clone()).collect(),
        ..set.clone()
    };
    let mut clusters = build_instance_clusters(&subset, &labels)?;
    if clusters.len() != img.clusters.len() {
        return Err(mismatch("cluster count differs"));
    }
    for (cl, s) in clusters.iter_mut().zip(&img.clusters) {
        if cl.cluster_id != s.cluster_id || cl.len() != s.size {
            return Err(mismatch("cluster ids or sizes differ"));
        }
        cl.split_refused = s.split_refused;
        for i in &mut cl.detection_indices {
            *i = kept[*i];
        }
    }
    Ok(clusters)
}

/// Samples and their stored clusters, matched by image id, in the order
/// the sample files were given.
fn load_images(c: &Common, samples: &[PathBuf], clusters_path: &Path) -> Result<Vec<(SampleSet, Vec<InstanceCluster>)>> {
    let file = read_clusters(clusters_path)?;
    let by_id: BTreeMap<&str, &ImageClusters> =
        file.images.iter().map(|i| (i.image_id.as_str(), i)).collect();
    let ingest = ingest_config(c);
    let loaded = par_map(samples, |path| {
        let set = read_samples(path, &ingest)?;
        let img = by_id.get(set.image_id.as_str()).ok_or_else(|| {
            Error::Config(format!("image {} not in {}", set.image_id, clusters_path.display()))
        })?;
        let clusters = restore_clusters(&set, img)?;
        Ok((set, clusters))
    })?;
    unique_ids(loaded.iter().map(|(s, _)| s.image_id.as_str()))?;
    Ok(loaded)
}

fn reports_for(set: &SampleSet, clusters: &[InstanceCluster], threshold: f64) -> Result<Vec<ClusterReport>> {
    par_map(clusters, |cl| build_report(cl, set.height, set.width, threshold))
}

pub fn report(c: &Common, samples: &[PathBuf], clusters: &Path) -> Result<()> {
    let mut inputs: Vec<&Path> = samples.iter().map(|p| p.as_path()).collect();
    inputs.push(clusters);
    manifest(c, "report", &inputs, serde_json::json!({ "mask_threshold": c.mask_threshold }))?;
    let images = load_images(c, samples, clusters)?;
    let rendered = par_map(&images, |(set, cls)| {
        let reports = reports_for(set, cls, c.mask_threshold)?;
        let figures: Vec<Vec<(String, String)>> = reports
            .par_iter()
            .map(|r| render_figures(r, set))
            .collect();
        Ok((reports, figures))
    })?;
    let mut stdout = std::io::stdout().lock();
    for ((set, _), (reports, figures)) in images.iter().zip(&rendered) {
        let dir = c.out_dir.join("report").join(path_safe(&set.image_id));
        let mut summary = String::from(
            "cluster_id,n_members,split_refused,zero_mask,top_class,top_score,mean_box_iou,mean_mask_iou\n",
        );
        for (r, figs) in reports.iter().zip(figures) {
            let stem = format!("cluster-{}", r.cluster_id);
            write_json(&dir.join(format!("{stem}.json")), r)?;
            let ms = &r.mask_stats;
            if !ms.zero_mask {
                for (suffix, values, scale) in [("mean", &ms.mean_mask, 1.0), ("std", &ms.std_mask, 0.5)] {
                    write_atomic(&dir.join(format!("{stem}-{suffix}.pgm")), |w| {
                        write_pgm(values, ms.height, ms.width, scale, w)
                    })?;
                }
            }
            for (name, body) in figs {
                write_text(&dir.join(format!("{stem}-{name}.svg")), body)?;
            }
            let top = r.class_stats.top_classes.iter().copied().find(|&k| k > 0).unwrap_or(0);
            let mean = |v: &[f64]| {
                if v.is_empty() {
                    String::new()
                } else {
                    format!("{:.6}", v.iter().sum::<f64>() / v.len() as f64)
                }
            };
            summary.push_str(&format!(
                "{},{},{},{},{},{:.6},{},{}\n",
                r.cluster_id,
                r.n_members,
                r.split_refused,
                ms.zero_mask,
                top,
                r.class_stats.mean_scores[top],
                mean(&r.box_iou_samples),
                mean(&r.mask_iou_samples)
            ));
        }
        write_text(&dir.join("summary.csv"), &summary)?;
        let zero = reports.iter().filter(|r| r.mask_stats.zero_mask).count();
        writeln!(
            stdout,
            "{}: {} cluster reports ({zero} zero masks) in {}",
            set.image_id,
            reports.len(),
            dir.display()
        )?;
    }
    Ok(())
}

fn render_figures(r: &ClusterReport, set: &SampleSet) -> Vec<(String, String)> {
    let ms = &r.mask_stats;
    let mut figs = vec![
        ("boxes".to_string(), svg::boxes(r, set.width, set.height)),
        ("classes".to_string(), svg::classes(r, TOP_CLASSES_SHOWN)),
    ];
    if !ms.zero_mask {
        figs.push(("mean".into(), svg::heatmap(&ms.mean_mask, ms.width, ms.height, 1.0)));
        figs.push(("std".into(), svg::heatmap(&ms.std_mask, ms.width, ms.height, 0.5)));
    }
    let series = [
        svg::KdeSeries {
            label: "box IoU",
            curve: r.box_kde.as_ref(),
            samples: &r.box_iou_samples,
        },
        svg::KdeSeries {
            label: "mask IoU",
            curve: r.mask_kde.as_ref(),
            samples: &r.mask_iou_samples,
        },
    ];
    figs.push(("iou-kde".into(), svg::kde_plot(&series)));
    figs
}

pub fn calibrate(c: &Common, records: &Path) -> Result<()> {
    manifest(c, "calibrate", &[records], serde_json::json!({ "bins": c.bins }))?;
    let f = File::open(records).map_err(|e| io_context(records, e))?;
    let recs = parse_records(BufReader::new(f)).map_err(|e| file_context(records, e))?;
    let s = calibrate_records(&recs, c.bins)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "records: {}", recs.len())?;
    writeln!(out, "temperature: {:.4}", s.temperature)?;
    writeln!(out, "NLL: {:.6} -> {:.6}", s.nll_before, s.nll_after)?;
    writeln!(out, "MCE: {:.4} -> {:.4}", s.mce_before, s.mce_after)?;
    writeln!(out, "ACE: {:.4} -> {:.4}", s.ace_before, s.ace_after)?;
    if s.already_calibrated {
        writeln!(out, "note: model is already calibrated (temperature within [0.95, 1.05])")?;
    }
    let d = &c.out_dir;
    write_json(&d.join("calibration.json"), &s)?;
    for (name, diagram, mce, ace) in [
        ("before", &s.before, s.mce_before, s.ace_before),
        ("after", &s.after, s.mce_after, s.ace_after),
    ] {
        write_atomic(&d.join(format!("reliability-{name}.csv")), |w| write_reliability_csv(diagram, w))?;
        let title = format!("{name} calibration (MCE {mce:.3}, ACE {ace:.3})");
        write_text(&d.join(format!("reliability-{name}.svg")), &svg::reliability(diagram, &title))?;
    }
    Ok(())
}

pub fn eval(c: &Common, samples: &[PathBuf], clusters: &Path, gt: &Path, mode: ModeArg) -> Result<()> {
    let mut inputs: Vec<&Path> = samples.iter().map(|p| p.as_path()).collect();
    inputs.extend([clusters, gt]);
    let modes: Vec<EvalMode> = match mode {
        ModeArg::Box => vec![EvalMode::Box],
        ModeArg::Mask => vec![EvalMode::Mask],
        ModeArg::Both => vec![EvalMode::Box, EvalMode::Mask],
    };
    manifest(
        c,
        "eval",
        &inputs,
        serde_json::json!({
            "mask_threshold": c.mask_threshold,
            "iou_threshold": DEFAULT_IOU_THRESHOLD,
            "modes": modes,
        }),
    )?;
    let images = load_images(c, samples, clusters)?;
    let dims: BTreeMap<String, (u32, u32)> = images
        .iter()
        .map(|(s, _)| (s.image_id.clone(), (s.height, s.width)))
        .collect();
    let f = File::open(gt).map_err(|e| io_context(gt, e))?;
    let gts = parse_ground_truth(BufReader::new(f), |id| dims.get(id).copied())
        .map_err(|e| file_context(gt, e))?;
    let per_image = par_map(&images, |(set, cls)| {
        reports_for(set, cls, c.mask_threshold)?
            .iter()
            .map(|r| cluster_to_detection(&set.image_id, r))
            .collect::<Result<Vec<_>>>()
    })?;
    let preds: Vec<_> = per_image.into_iter().flatten().collect();
    let mut out = std::io::stdout().lock();
    let mut matches = BTreeMap::new();
    for m in modes {
        let e = match_and_score(&preds, &gts, DEFAULT_IOU_THRESHOLD, m)?;
        write_atomic(&c.out_dir.join(format!("eval-{m}.csv")), |w| write_eval_csv(&e, w))?;
        match e.map50 {
            Some(v) => writeln!(out, "{m} mAP@0.5: {v:.4}")?,
            None => writeln!(out, "{m} mAP@0.5: undefined (no ground truth)")?,
        }
        matches.insert(m.to_string(), e.matches);
    }
    write_json(&c.out_dir.join("eval-matches.json"), &matches)
}

#[derive(Serialize)]
struct LabelsFile<'a> {
    image_id: &'a str,
    true_labels: &'a [usize],
}

pub fn synth(c: &Common, spec_path: &Path) -> Result<()> {
    manifest(c, "synth", &[spec_path], serde_json::Value::Null)?;
    let f = File::open(spec_path).map_err(|e| io_context(spec_path, e))?;
    let mut spec: SceneSpec = serde_json::from_reader(BufReader::new(f)).map_err(|e| Error::Parse {
        line: e.line(),
        message: format!("{}: {e}", spec_path.display()),
    })?;
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    let scene = generate(&spec)?;
    let stem = path_safe(&spec.image_id);
    let d = &c.out_dir;
    write_atomic(&d.join(format!("{stem}.samples.jsonl")), |w| write_sample_set(&scene.samples, w))?;
    write_atomic(&d.join(format!("{stem}.gt.jsonl")), |w| {
        mcdrop::evaluation::write_ground_truth(&scene.ground_truth, w)
    })?;
    write_json(
        &d.join(format!("{stem}.labels.json")),
        &LabelsFile {
            image_id: &spec.image_id,
            true_labels: &scene.true_labels,
        },
    )?;
    println!(
        "{}: {} detections from {} instances over {} repetitions (seed {})",
        spec.image_id,
        scene.samples.len(),
        spec.instances.len(),
        spec.n_repetitions,
        spec.seed
    );
    Ok(())
}
