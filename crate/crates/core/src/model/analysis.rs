//! Level distributions of the q/k/v spikes seen on held-out data.

use std::io::Write;

use serde::Serialize;

use crate::data::Dataset;
use crate::diagnostics::{bimodality_report, level_entropy_report, BimodalityReport, EntropyReport, BIMODAL_THRESHOLD};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KindReport {
    pub block: usize,
    /// `q`, `k` or `v`.
    pub kind: String,
    pub entropy: EntropyReport,
    pub bimodality: BimodalityReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionAnalysis {
    pub bits: u8,
    pub mprf: bool,
    pub samples: usize,
    pub layers: Vec<KindReport>,
    /// Mean level entropy over blocks and q/k/v, nats.
    pub mean_entropy: f64,
}

/// Run the deployed path over `data` and summarize q/k/v levels.
pub fn analyze_attention(model: &Model<f32>, data: &Dataset, batch: usize) -> Result<AttentionAnalysis> {
    if data.is_empty() {
        return Err(Error::input("no samples to analyze"));
    }
    let bits = model
        .act
        .levels()
        .ok_or_else(|| Error::State("only spiking models have spike levels".into()))?;
    let inv = 1.0 / bits as f64;
    let mut levels: Vec<[Vec<f64>; 3]> = vec![Default::default(); model.blocks.len()];
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = data.batch(chunk);
        let out = model.forward_infer(&x)?;
        for (acc, counts) in levels.iter_mut().zip(&out.attention_counts) {
            for (a, c) in acc.iter_mut().zip(counts) {
                a.extend(c.data().iter().map(|&n| n as f64 * inv));
            }
        }
    }
    let mut layers = Vec::new();
    for (block, kinds) in levels.iter().enumerate() {
        for (kind, samples) in ["q", "k", "v"].iter().zip(kinds) {
            layers.push(KindReport {
                block,
                kind: kind.to_string(),
                entropy: level_entropy_report(samples, bits)?,
                bimodality: bimodality_report(samples, bits, BIMODAL_THRESHOLD)?,
            });
        }
    }
    let mean_entropy = layers.iter().map(|l| l.entropy.entropy).sum::<f64>() / layers.len().max(1) as f64;
    Ok(AttentionAnalysis {
        bits,
        mprf: model.config.mprf,
        samples: data.len(),
        layers,
        mean_entropy,
    })
}

/// `block,kind,level,mass` rows.
pub fn write_levels_csv(out: &mut dyn Write, a: &AttentionAnalysis) -> Result<()> {
    writeln!(out, "block,kind,level,mass")?;
    for l in &a.layers {
        for (k, m) in l.entropy.level_masses.iter().enumerate() {
            writeln!(out, "{},{},{},{m}", l.block, l.kind, k as f64 / a.bits as f64)?;
        }
    }
    Ok(())
}
