//! Synthetic classification datasets: Gaussian class clusters with
//! controllable separation and training-label noise.
//!
//! Cluster centers are drawn on the unit sphere and scaled by the
//! separation; points are center + standard normal noise. A label-noise
//! fraction of the *training* labels is resampled uniformly over the classes
//! (so some resampled labels coincide with the truth); validation labels are
//! always clean. Everything is deterministic in the spec's seed.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::model::LabeledExample;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDatasetSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub input_dim: usize,
    pub classes: usize,
    pub cluster_separation: f64,
    pub label_noise_fraction: f64,
    pub seed: u64,
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 1 || self.n_val < 1 {
            return Err(Error::InvalidArgument("dataset counts must be >= 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.label_noise_fraction) {
            return Err(Error::InvalidArgument(
                "label noise fraction outside [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

fn class_centers(spec: &SyntheticDatasetSpec, stream: &RngStream) -> Vec<Tensor> {
    let mut rng = stream.rng();
    (0..spec.classes)
        .map(|_| {
            let mut v: Vec<f64> = (0..spec.input_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
            for a in &mut v {
                *a *= spec.cluster_separation / norm;
            }
            Tensor::vector(v)
        })
        .collect()
}

fn sample_split(
    spec: &SyntheticDatasetSpec,
    centers: &[Tensor],
    n: usize,
    stream: &RngStream,
) -> Vec<LabeledExample> {
    (0..n)
        .map(|i| {
            let mut rng = stream.child(i as u64).rng();
            let y = rng.random_range(0..spec.classes);
            let x: Vec<f64> = centers[y]
                .data()
                .iter()
                .map(|&c| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    c + z
                })
                .collect();
            LabeledExample {
                x: Tensor::vector(x),
                y,
            }
        })
        .collect()
}

/// Generate `(train, val)` splits. Training labels get uniform resampling
/// noise; validation labels stay clean.
pub fn gen_synthetic(
    spec: &SyntheticDatasetSpec,
) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    spec.validate()?;
    let root = RngStream::new(spec.seed);
    let centers = class_centers(spec, &root.child(0));
    let mut train = sample_split(spec, &centers, spec.n_train, &root.child(1));
    let val = sample_split(spec, &centers, spec.n_val, &root.child(2));
    if spec.label_noise_fraction > 0.0 {
        let noise_stream = root.child(3);
        for (i, ex) in train.iter_mut().enumerate() {
            let mut rng = noise_stream.child(i as u64).rng();
            if rng.random::<f64>() < spec.label_noise_fraction {
                ex.y = rng.random_range(0..spec.classes);
            }
        }
    }
    Ok((train, val))
}

/// Write a dataset as CSV rows `feature.., label`.
pub fn write_csv(path: &std::path::Path, data: &[LabeledExample]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for ex in data {
        let mut row: Vec<String> = ex.x.data().iter().map(|v| format!("{v:?}")).collect();
        row.push(ex.y.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset written by [`write_csv`].
pub fn read_csv(path: &std::path::Path) -> Result<Vec<LabeledExample>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    let mut out = Vec::new();
    for record in r.records() {
        let record = record?;
        let fields: Vec<&str> = record.iter().collect();
        if fields.len() < 2 {
            return Err(Error::Config("csv row needs features plus label".into()));
        }
        let (feat, label) = fields.split_at(fields.len() - 1);
        let x: Vec<f64> = feat
            .iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("bad feature {s:?}: {e}")))
            })
            .collect::<Result<_>>()?;
        let y = label[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| Error::Config(format!("bad label {:?}: {e}", label[0])))?;
        out.push(LabeledExample {
            x: Tensor::vector(x),
            y,
        });
    }
    Ok(out)
}
