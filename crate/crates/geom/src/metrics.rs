//! Image metrics, per-surfel attribute statistics and the metrics report.

use serde::{Deserialize, Serialize};
use surfelsplat_core::losses::ssim_mean;
use surfelsplat_core::{Image3, SurfelSet};

use crate::GeomError;

/// Peak signal-to-noise ratio in dB for unit-range images; identical images
/// report `+inf`.
pub fn psnr(a: &Image3, b: &Image3) -> Result<f64, GeomError> {
    if a.width != b.width || a.height != b.height {
        return Err(GeomError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let mut mse = 0.0;
    for (pa, pb) in a.pixels().iter().zip(b.pixels()) {
        for c in 0..3 {
            let d = pa[c] - pb[c];
            mse += d * d;
        }
    }
    mse /= (3 * a.width * a.height) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean windowed SSIM (11x11 Gaussian, sigma 1.5), averaged over channels.
pub fn ssim(a: &Image3, b: &Image3) -> Result<f64, GeomError> {
    Ok(ssim_mean(a, b)?)
}

/// Simple fixed-width histogram over `[min, max]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub min: f64,
    pub max: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    fn build(values: &[f64], bins: usize) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0; bins];
        let span = (max - min).max(1e-300);
        for &v in values {
            let b = (((v - min) / span) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1;
        }
        Self { min, max, counts }
    }
}

/// Per-surfel spatial coverage `K_a = s_u * s_v` and opacity, with summary
/// statistics for the flatness/coverage comparisons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeStats {
    pub ka: Vec<f64>,
    pub alpha: Vec<f64>,
    pub mean_ka: f64,
    pub median_ka: f64,
    pub mean_alpha: f64,
    pub median_alpha: f64,
    pub ka_histogram: Histogram,
    pub alpha_histogram: Histogram,
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

pub fn attribute_stats(set: &SurfelSet) -> Result<AttributeStats, GeomError> {
    if set.is_empty() {
        return Err(GeomError::EmptySet);
    }
    let (mut ka, mut alpha) = (Vec::with_capacity(set.len()), Vec::with_capacity(set.len()));
    for s in &set.surfels {
        let (su, sv) = s.scales();
        ka.push(su * sv);
        alpha.push(s.opacity());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(AttributeStats {
        mean_ka: mean(&ka),
        median_ka: median(&ka),
        mean_alpha: mean(&alpha),
        median_alpha: median(&alpha),
        ka_histogram: Histogram::build(&ka, 16),
        alpha_histogram: Histogram::build(&alpha, 16),
        ka,
        alpha,
    })
}

/// One evaluation record; every field required so reports stay comparable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(with = "inf_as_string")]
    pub psnr: f64,
    pub ssim: f64,
    /// Infinite when no surface could be extracted at all.
    #[serde(with = "inf_as_string")]
    pub chamfer: f64,
    pub fscore: f64,
    pub tau: f64,
    pub voxel_size: f64,
    pub n_surfels: usize,
    #[serde(rename = "mean_Ka")]
    pub mean_ka: f64,
    pub mean_alpha: f64,
    pub stage_id: u32,
}

/// JSON has no infinity literal; an exact-match PSNR serializes as the
/// string `"inf"` instead.
pub mod inf_as_string {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(v),
            Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
            Raw::Text(t) => Err(de::Error::custom(format!("expected a number or \"inf\", got {t:?}"))),
        }
    }
}
