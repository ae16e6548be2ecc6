//! Grouping the sampled detections of one image into physical instances.
//!
//! Features are the raw box coordinates `(x1, y1, x2, y2)`. The primary
//! algorithm is the variational Bayesian mixture in [`bgm`], with Ward
//! agglomerative clustering in [`agglomerative`] as the comparator. Clusters
//! larger than the split threshold are re-fit on their own boxes.

pub mod agglomerative;
pub mod bgm;
mod kmeans;

use serde::{Deserialize, Serialize};

pub use agglomerative::fit_agglomerative;
pub use bgm::{fit_bgm, MixtureComponent, MixtureState};

use crate::error::{Error, Result};
use crate::model::{Detection, SampleSet};
use crate::seed::{derive_seed, stream};

pub type Point = [f64; 4];

/// Recursion limit for re-splitting oversized clusters.
pub const MAX_SPLIT_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Bgm,
    Agg,
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algorithm::Bgm => "bgm",
            Algorithm::Agg => "agg",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub algorithm: Algorithm,
    pub max_iters: usize,
    pub elbo_tol: f64,
    /// Stick-breaking concentration; `None` means `1 / k_max`.
    pub weight_concentration_prior: Option<f64>,
    pub split_threshold: usize,
    pub seed: u64,
    pub n_init: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Bgm,
            max_iters: 500,
            elbo_tol: 1e-4,
            weight_concentration_prior: None,
            split_threshold: 150,
            seed: 0,
            n_init: 3,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.n_init == 0 || self.split_threshold == 0 {
            return Err(Error::Config(
                "max_iters, n_init and split_threshold must be positive".into(),
            ));
        }
        if !(self.elbo_tol > 0.0) {
            return Err(Error::Config("elbo_tol must be positive".into()));
        }
        if let Some(c) = self.weight_concentration_prior {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config("concentration must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCluster {
    pub cluster_id: usize,
    pub members: Vec<Detection>,
    /// `(repetition, index within repetition)` per member.
    pub source_labels: Vec<(u32, u32)>,
    /// Indices of the members in the clustered sample set.
    pub detection_indices: Vec<usize>,
    /// Set when the cluster exceeds the split threshold but could not be
    /// broken up.
    pub split_refused: bool,
}

impl InstanceCluster {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// `max(1, round_half_up(n_detections / n_repetitions))`.
pub fn estimate_component_count(n_detections: usize, n_repetitions: u32) -> Result<usize> {
    if n_detections == 0 {
        return Err(Error::NothingToCluster);
    }
    if n_repetitions == 0 {
        return Err(Error::Config("n_repetitions must be positive".into()));
    }
    let r = n_repetitions as usize;
    Ok(((2 * n_detections + r) / (2 * r)).max(1))
}

pub fn box_features(set: &SampleSet) -> Vec<Point> {
    set.detections.iter().map(|d| d.bbox.to_array()).collect()
}

/// Upper bound on mixture components handed to the BGM for a heuristic
/// count `h`.
pub fn bgm_k_max(heuristic: usize) -> usize {
    (2 * heuristic).max(heuristic + 2)
}

/// Hard assignment: argmax responsibility, ties toward the lower index.
pub fn assign_labels(m: &MixtureState) -> Vec<usize> {
    bgm::argmax_rows(&m.responsibilities)
}

/// Groups detections by label. Cluster ids follow ascending label order;
/// members keep sample-set order, which is `(repetition, index)` ascending.
pub fn build_instance_clusters(set: &SampleSet, labels: &[usize]) -> Result<Vec<InstanceCluster>> {
    if labels.len() != set.len() {
        return Err(Error::LabelCount {
            labels: labels.len(),
            detections: set.len(),
        });
    }
    let provenance = set.provenance();
    let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &l) in labels.iter().enumerate() {
        by_label.entry(l).or_default().push(i);
    }
    Ok(by_label
        .into_values()
        .enumerate()
        .map(|(id, idx)| cluster_from_indices(set, &provenance, id, idx))
        .collect())
}

fn cluster_from_indices(
    set: &SampleSet,
    provenance: &[(u32, u32)],
    id: usize,
    mut idx: Vec<usize>,
) -> InstanceCluster {
    idx.sort_by_key(|&i| provenance[i]);
    InstanceCluster {
        cluster_id: id,
        members: idx.iter().map(|&i| set.detections[i].clone()).collect(),
        source_labels: idx.iter().map(|&i| provenance[i]).collect(),
        detection_indices: idx,
        split_refused: false,
    }
}

/// Re-clusters every cluster above `cfg.split_threshold` members with the
/// BGM, recursing up to [`MAX_SPLIT_DEPTH`] levels. Clusters that will not
/// split are kept whole and flagged. Ids are renumbered in output order.
pub fn split_oversized(
    clusters: Vec<InstanceCluster>,
    n_repetitions: u32,
    cfg: &ClusterConfig,
) -> Result<Vec<InstanceCluster>> {
    let mut out = Vec::with_capacity(clusters.len());
    let mut counter = 0u64;
    for c in clusters {
        split_recursive(c, n_repetitions, cfg, 0, &mut counter, &mut out)?;
    }
    for (id, c) in out.iter_mut().enumerate() {
        c.cluster_id = id;
    }
    Ok(out)
}

fn split_recursive(
    cluster: InstanceCluster,
    n_repetitions: u32,
    cfg: &ClusterConfig,
    depth: usize,
    counter: &mut u64,
    out: &mut Vec<InstanceCluster>,
) -> Result<()> {
    if cluster.len() <= cfg.split_threshold {
        out.push(cluster);
        return Ok(());
    }
    if depth >= MAX_SPLIT_DEPTH {
        out.push(InstanceCluster {
            split_refused: true,
            ..cluster
        });
        return Ok(());
    }
    let points: Vec<Point> = cluster.members.iter().map(|d| d.bbox.to_array()).collect();
    let k = estimate_component_count(points.len(), n_repetitions)?.max(2);
    let sub_cfg = ClusterConfig {
        seed: derive_seed(cfg.seed, stream::SPLIT + *counter),
        ..cfg.clone()
    };
    *counter += 1;
    let state = fit_bgm(&points, k, &sub_cfg)?;
    let labels = assign_labels(&state);
    if state.effective_components < 2 {
        out.push(InstanceCluster {
            split_refused: true,
            ..cluster
        });
        return Ok(());
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (pos, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(pos);
    }
    for positions in groups.into_values() {
        let child = InstanceCluster {
            cluster_id: 0,
            members: positions.iter().map(|&p| cluster.members[p].clone()).collect(),
            source_labels: positions.iter().map(|&p| cluster.source_labels[p]).collect(),
            detection_indices: positions
                .iter()
                .map(|&p| cluster.detection_indices[p])
                .collect(),
            split_refused: false,
        };
        split_recursive(child, n_repetitions, cfg, depth + 1, counter, out)?;
    }
    Ok(())
}

/// Raw labels from the configured algorithm, before cluster assembly.
pub fn cluster_labels(set: &SampleSet, cfg: &ClusterConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    let points = box_features(set);
    let heuristic = estimate_component_count(points.len(), set.n_repetitions)?;
    match cfg.algorithm {
        Algorithm::Bgm => {
            let state = fit_bgm(&points, bgm_k_max(heuristic), cfg)?;
            Ok(assign_labels(&state))
        }
        Algorithm::Agg => fit_agglomerative(&points, heuristic.min(points.len())),
    }
}

/// Features, component count, fit, assignment, assembly and the split rule,
/// end to end. Expects an already background-filtered sample set.
pub fn cluster_pipeline(set: &SampleSet, cfg: &ClusterConfig) -> Result<Vec<InstanceCluster>> {
    let labels = cluster_labels(set, cfg)?;
    let clusters = build_instance_clusters(set, &labels)?;
    split_oversized(clusters, set.n_repetitions, cfg)
}

/// Flat labels (cluster id per detection index) from a partition.
pub fn partition_labels(clusters: &[InstanceCluster], n: usize) -> Vec<usize> {
    let mut labels = vec![usize::MAX; n];
    for c in clusters {
        for &i in &c.detection_indices {
            labels[i] = c.cluster_id;
        }
    }
    labels
}
