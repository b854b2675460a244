use rand::seq::index;

use super::data::is_pretrain_session;
use super::{config_error, ExperimentConfig, Result};
use crate::analysis::{align_confusion, kmeans, pca2, ConfusionMatrix};
use crate::datagen::{extract_labeled_windows, Recording};
use crate::encoder::{EmbeddingTable, IntervalSpec, TemporalEncoder};
use crate::popt::{cls_representations, Ensemble, PoptWeights};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionPoint {
    pub x: f64,
    pub y: f64,
    pub length_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub name: String,
    pub purity: f64,
    pub confusion: ConfusionMatrix,
    pub points: Vec<ProjectionPoint>,
    pub explained_variance: [f64; 2],
}

impl ClusterReport {
    pub fn points_tsv(&self) -> String {
        let mut s = String::from("x\ty\tlength_s\n");
        for p in &self.points {
            s.push_str(&format!("{}\t{}\t{}\n", p.x, p.y, p.length_s));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingAnalysis {
    /// Concatenated per-channel temporal embeddings.
    pub temporal: ClusterReport,
    /// CLS outputs of each supplied model on the same windows.
    pub cls: Vec<ClusterReport>,
}

fn cluster(cfg: &ExperimentConfig, name: &str, x: &[f64], d: usize, lengths: &[f64]) -> Result<ClusterReport> {
    let km = kmeans(x, d, cfg.analysis.k, seed::derive(cfg.seed, &[seed::tag("analysis-kmeans")]))?;
    let confusion = align_confusion(&km.assignments, cfg.analysis.k, lengths)?;
    let p = pca2(x, d)?;
    let points = lengths
        .iter()
        .enumerate()
        .map(|(i, &l)| ProjectionPoint {
            x: p.projections[2 * i],
            y: p.projections[2 * i + 1],
            length_s: l,
        })
        .collect();
    Ok(ClusterReport {
        name: name.to_string(),
        purity: confusion.purity(),
        confusion,
        points,
        explained_variance: p.explained_variance,
    })
}

/// Clusters `samples_per_length` windows per length from one downstream
/// session, both as raw concatenated temporal embeddings and as the CLS
/// outputs of each model in `models`.
pub fn embedding_analysis(
    cfg: &ExperimentConfig,
    corpus: &[Recording],
    encoder: &TemporalEncoder,
    models: &[(String, &PoptWeights)],
) -> Result<EmbeddingAnalysis> {
    let a = &cfg.analysis;
    let rec = corpus
        .iter()
        .find(|r| r.subject_id == a.subject_id && !is_pretrain_session(cfg, r))
        .ok_or_else(|| config_error("analysis.subject_id", "subject has no downstream session"))?;
    let ids: Vec<u32> = rec.channels.iter().map(|c| c.channel_id).collect();
    let coords: Vec<[f64; 3]> = rec.channels.iter().map(|c| c.coords).collect();
    let h = encoder.h_dim();
    let width = ids.len() * h;

    let mut concat = Vec::new();
    let mut ensembles = Vec::new();
    let mut lengths = Vec::new();
    for &l in &a.lengths_s {
        let windows = extract_labeled_windows(rec, &a.task, l, false, cfg.seed)?;
        let n = a.samples_per_length.min(windows.len());
        let mut rng = seed::derived_rng(cfg.seed, &[seed::tag("analysis-sample"), l.to_bits()]);
        let mut pick = index::sample(&mut rng, windows.len(), n).into_vec();
        pick.sort_unstable();
        let intervals: Vec<IntervalSpec> = pick.iter().map(|&i| windows[i].interval).collect();
        let table = EmbeddingTable::build(encoder, rec, &intervals, &ids)?;
        for w in 0..table.n_windows() {
            concat.extend_from_slice(table.window(w));
            ensembles.push(Ensemble {
                channel_ids: ids.clone(),
                coords: coords.clone(),
                embeddings: table.window(w).to_vec(),
                h_dim: h,
            });
            lengths.push(l);
        }
    }
    let temporal = cluster(cfg, "temporal", &concat, width, &lengths)?;
    let mut cls = Vec::with_capacity(models.len());
    for (name, w) in models {
        let reprs = cls_representations(w, &ensembles, 32)?;
        let flat: Vec<f64> = reprs.concat();
        cls.push(cluster(cfg, name, &flat, w.config.d_model, &lengths)?);
    }
    Ok(EmbeddingAnalysis { temporal, cls })
}
