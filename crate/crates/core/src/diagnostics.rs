//! Entropy and distribution instrumentation: Gaussian maximum entropy,
//! entropy of level-valued activations, histogram differential entropy, the
//! normal limit of Bernoulli sums, and a two-mode indicator.
//!
//! All entropies are in nats.

use std::io::Write;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Default share of mass at the extreme levels above which data counts as two-mode.
pub const BIMODAL_THRESHOLD: f64 = 0.8;

/// Uniform-bin histogram.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    edges: Vec<f64>,
    counts: Vec<u64>,
    total: u64,
}

impl Histogram {
    /// `bins` equal bins over `[lo, hi]`; samples outside are clamped into the
    /// end bins.
    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::input(format!("bad histogram range [{lo}, {hi}] with {bins} bins")));
        }
        let width = (hi - lo) / bins as f64;
        Ok(Self {
            edges: (0..=bins).map(|i| lo + width * i as f64).collect(),
            counts: vec![0; bins],
            total: 0,
        })
    }

    pub fn from_samples(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        let mut h = Self::uniform(lo, hi, bins)?;
        samples.iter().for_each(|&x| h.add(x));
        Ok(h)
    }

    pub fn add(&mut self, x: f64) {
        let bins = self.counts.len();
        let lo = self.edges[0];
        let i = ((x - lo) / self.bin_width()).floor();
        let i = if i.is_nan() { 0 } else { (i.max(0.0) as usize).min(bins - 1) };
        self.counts[i] += 1;
        self.total += 1;
    }

    pub fn bin_width(&self) -> f64 {
        self.edges[1] - self.edges[0]
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EntropyReport {
    pub entropy: f64,
    /// Closed-form reference for comparison, when one applies.
    pub reference: Option<f64>,
    /// Mass at each level `k/b`, for level-valued data.
    pub level_masses: Vec<f64>,
}

/// `½·ln(2πeσ²)`, the entropy of a normal distribution.
pub fn gaussian_entropy(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Domain(format!("standard deviation must be positive, got {sigma}")));
    }
    Ok(0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sigma * sigma).ln())
}

/// Empirical masses at the levels `{0, 1/b, …, 1}`.
pub fn level_masses(levels: &[f64], bits: u8) -> Result<Vec<f64>> {
    if bits == 0 {
        return Err(Error::input("level count must be positive"));
    }
    let b = bits as f64;
    let mut counts = vec![0u64; bits as usize + 1];
    for &a in levels {
        let n = a * b;
        let r = n.round();
        if (n - r).abs() > 1e-6 || r < 0.0 || r > b {
            return Err(Error::input(format!("sample {a} is not on the 1/{bits} grid")));
        }
        counts[r as usize] += 1;
    }
    let total = levels.len().max(1) as f64;
    Ok(counts.into_iter().map(|c| c as f64 / total).collect())
}

fn mass_entropy(masses: &[f64]) -> f64 {
    -masses.iter().filter(|&&m| m > 0.0).map(|&m| m * m.ln()).sum::<f64>()
}

/// `−Σ m_k ln m_k` over the level masses of grid-valued samples.
pub fn discrete_spike_entropy(levels: &[f64], bits: u8) -> Result<f64> {
    Ok(mass_entropy(&level_masses(levels, bits)?))
}

/// Entropy report for level-valued samples, with `ln(b+1)` as the reference.
pub fn level_entropy_report(levels: &[f64], bits: u8) -> Result<EntropyReport> {
    let level_masses = level_masses(levels, bits)?;
    Ok(EntropyReport {
        entropy: mass_entropy(&level_masses),
        reference: Some(((bits as f64) + 1.0).ln()),
        level_masses,
    })
}

/// Differential-entropy estimate `−Σ p_i ln(p_i/Δ)`.
pub fn empirical_entropy(h: &Histogram) -> Result<f64> {
    if h.total == 0 {
        return Err(Error::input("empty histogram"));
    }
    let delta = h.bin_width();
    let total = h.total as f64;
    Ok(-h
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            p * (p / delta).ln()
        })
        .sum::<f64>())
}

/// Kolmogorov-Smirnov distance between standardized sums of `T` Bernoulli(r)
/// draws and the standard normal, one entry per `T`.
pub fn clt_convergence(r: f64, t_list: &[usize], samples: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Domain(format!("rate must lie in (0, 1), got {r}")));
    }
    if samples == 0 {
        return Err(Error::input("need at least one sample"));
    }
    let normal = Normal::standard();
    t_list
        .iter()
        .map(|&t| {
            if t == 0 {
                return Err(Error::input("number of steps must be positive"));
            }
            let mean = t as f64 * r;
            let sd = (t as f64 * r * (1.0 - r)).sqrt();
            let mut counts = vec![0u64; t + 1];
            for _ in 0..samples {
                let s = (0..t).filter(|_| rng.bernoulli(r)).count();
                counts[s] += 1;
            }
            // the empirical CDF jumps at each attained sum; check both sides
            let n = samples as f64;
            let mut below = 0u64;
            let mut ks: f64 = 0.0;
            for (k, &c) in counts.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                let phi = normal.cdf((k as f64 - mean) / sd);
                ks = ks.max((below as f64 / n - phi).abs());
                below += c;
                ks = ks.max((below as f64 / n - phi).abs());
            }
            Ok(ks)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BimodalityReport {
    /// Masses per level (level data) or per bin.
    pub masses: Vec<f64>,
    pub variance: f64,
    pub entropy: f64,
    /// Share of mass in the two extreme levels/bins.
    pub extreme_mass: f64,
    pub bimodal: bool,
}

/// Level masses, variance and entropy of `samples`, flagging data whose two
/// extreme levels hold more than `threshold` of the mass. Samples on the
/// `1/b` grid are binned per level; anything else into `b+1` equal bins over
/// its range.
pub fn bimodality_report(samples: &[f64], bits: u8, threshold: f64) -> Result<BimodalityReport> {
    if samples.is_empty() {
        return Err(Error::input("no samples"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let variance = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let masses = match level_masses(samples, bits) {
        Ok(m) => m,
        Err(_) => {
            let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let hist = Histogram::from_samples(samples, lo, if hi > lo { hi } else { lo + 1.0 }, bits as usize + 1)?;
            hist.counts().iter().map(|&c| c as f64 / n).collect()
        }
    };
    // constant data has a single occupied level, which counts as extreme
    let occupied: Vec<usize> = (0..masses.len()).filter(|&i| masses[i] > 0.0).collect();
    let extreme_mass = if occupied.len() <= 1 {
        1.0
    } else {
        masses[0] + masses[masses.len() - 1]
    };
    Ok(BimodalityReport {
        entropy: mass_entropy(&masses),
        variance,
        extreme_mass,
        bimodal: extreme_mass > threshold,
        masses,
    })
}

/// One-sided sign test: probability of at least `wins` successes in `n`
/// fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut p = 0.0;
    let mut c = 1.0f64;
    for k in 0..=n {
        if k > 0 {
            c = c * (n - k + 1) as f64 / k as f64;
        }
        if k >= wins {
            p += c;
        }
    }
    p / 2f64.powi(n as i32)
}

/// `level,mass` rows.
pub fn write_level_csv(out: &mut dyn Write, masses: &[f64], bits: u8) -> Result<()> {
    writeln!(out, "level,mass")?;
    for (k, m) in masses.iter().enumerate() {
        writeln!(out, "{},{m}", k as f64 / bits as f64)?;
    }
    Ok(())
}
