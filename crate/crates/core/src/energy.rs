//! Operation counting and energy estimation for spike-driven networks.
//!
//! A spiking layer performs `SOPs = fr·T·FLOPs` accumulates, each charged at
//! `E_AC`; the first convolution sees real-valued pixels and is charged
//! `E_MAC` per multiply-accumulate. Memory traffic is not modeled.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// 45 nm multiply-accumulate energy, picojoules.
pub const E_MAC_PJ: f64 = 4.6;
/// 45 nm accumulate energy, picojoules.
pub const E_AC_PJ: f64 = 0.9;

const PJ_PER_MJ: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
    Attention,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerCost {
    pub id: String,
    pub kind: LayerKind,
    /// Dense operation count per sample and time step.
    pub flops: f64,
    /// Input firing rate; `None` until measured.
    pub fr: Option<f64>,
    pub timesteps: usize,
    pub weight_bits: Option<u8>,
    /// Consumes real-valued input, so it multiplies (the stem).
    pub mac: bool,
    /// Performs `b`-bit multiplies, charged as a fraction of a full MAC.
    pub lowbit_mult: Option<u8>,
}

impl LayerCost {
    pub fn sops(&self) -> Result<f64> {
        let fr = self
            .fr
            .ok_or_else(|| Error::Accounting(format!("layer {} has no firing rate", self.id)))?;
        sops(fr, self.timesteps, self.flops)
    }

    /// Energy of this row in picojoules.
    pub fn energy_pj(&self, quantized: bool) -> Result<f64> {
        if self.mac {
            return Ok(match (quantized, self.lowbit_mult) {
                (true, Some(b)) => E_MAC_PJ * lowbit_fraction(b)? * self.flops * self.timesteps as f64,
                _ => E_MAC_PJ * self.flops * self.timesteps as f64,
            });
        }
        let ops = self.sops()?;
        Ok(match (quantized, self.lowbit_mult) {
            (true, Some(b)) => E_MAC_PJ * lowbit_fraction(b)? * ops,
            (false, Some(_)) => E_MAC_PJ * ops,
            (_, None) => E_AC_PJ * ops,
        })
    }
}

/// Share of a full-precision multiply charged for a `b`-bit one.
pub fn lowbit_fraction(bits: u8) -> Result<f64> {
    match bits {
        2 => Ok(1.0 / 32.0),
        3 => Ok(1.0 / 16.0),
        4 => Ok(1.0 / 8.0),
        b => Err(Error::Accounting(format!("no low-bit multiply weighting for {b} bits"))),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EnergyLedger {
    pub layers: Vec<LayerCost>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LedgerRow {
    pub id: String,
    pub kind: LayerKind,
    pub flops: f64,
    pub fr: Option<f64>,
    #[serde(rename = "T")]
    pub timesteps: usize,
    pub sops: f64,
    pub energy_pj: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub rows: Vec<LedgerRow>,
    pub total_flops: f64,
    pub total_sops: f64,
    pub total_energy_pj: f64,
    pub total_energy_mj: f64,
    pub quantized: bool,
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    /// How firing rates were measured.
    pub measurement: String,
}

impl EnergyLedger {
    pub fn push(&mut self, cost: LayerCost) {
        self.layers.push(cost);
    }

    pub fn report(&self, quantized: bool, measurement: &str) -> Result<EnergyReport> {
        let mut rows = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            if let Some(fr) = l.fr {
                if !(0.0..=1.0).contains(&fr) {
                    return Err(Error::Accounting(format!("layer {} firing rate {fr} outside [0, 1]", l.id)));
                }
            }
            rows.push(LedgerRow {
                id: l.id.clone(),
                kind: l.kind,
                flops: l.flops,
                fr: l.fr,
                timesteps: l.timesteps,
                sops: if l.mac { 0.0 } else { l.sops()? },
                energy_pj: l.energy_pj(quantized)?,
            });
        }
        let total_energy_pj = rows.iter().map(|r| r.energy_pj).sum::<f64>();
        Ok(EnergyReport {
            total_flops: rows.iter().map(|r| r.flops).sum(),
            total_sops: rows.iter().map(|r| r.sops).sum(),
            total_energy_pj,
            total_energy_mj: total_energy_pj / PJ_PER_MJ,
            rows,
            quantized,
            e_mac_pj: E_MAC_PJ,
            e_ac_pj: E_AC_PJ,
            measurement: measurement.to_string(),
        })
    }
}

impl EnergyReport {
    pub fn write_json(&self, out: &mut dyn Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut *out, self).map_err(|e| Error::Io(e.into()))?;
        writeln!(out)?;
        Ok(())
    }

    pub fn write_csv(&self, out: &mut dyn Write) -> Result<()> {
        writeln!(out, "id,kind,flops,fr,T,sops,energy_pJ")?;
        for r in &self.rows {
            let kind = serde_json::to_value(r.kind).expect("plain enum");
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.id,
                kind.as_str().unwrap_or_default(),
                r.flops,
                r.fr.map_or(String::new(), |f| f.to_string()),
                r.timesteps,
                r.sops,
                r.energy_pj
            )?;
        }
        writeln!(out, "total,,{},,,{},{}", self.total_flops, self.total_sops, self.total_energy_pj)?;
        Ok(())
    }
}

/// Total energy in millijoules.
pub fn total_energy(ledger: &EnergyLedger, quantized: bool) -> Result<f64> {
    let mut pj = 0.0;
    for l in &ledger.layers {
        pj += l.energy_pj(quantized)?;
    }
    Ok(pj / PJ_PER_MJ)
}

/// Mean spike probability per neuron per time step.
pub fn record_firing_rate(spikes: u64, neurons: usize, timesteps: usize, samples: usize) -> Result<f64> {
    let slots = neurons as u64 * timesteps as u64 * samples as u64;
    if slots == 0 {
        return Err(Error::Accounting("firing rate over an empty measurement".into()));
    }
    if spikes > slots {
        return Err(Error::Accounting(format!("{spikes} spikes in {slots} neuron-steps")));
    }
    Ok(spikes as f64 / slots as f64)
}

pub fn sops(fr: f64, timesteps: usize, flops: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fr) || timesteps == 0 {
        return Err(Error::Accounting(format!("firing rate {fr} / T = {timesteps} out of range")));
    }
    Ok(fr * timesteps as f64 * flops)
}

/// Operation counts of softmax self-attention over `N` tokens of width `D`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MhsaFlops {
    pub qkv: f64,
    pub attention: f64,
    pub scale: f64,
    pub softmax: f64,
    pub linear: f64,
}

pub fn mhsa_flops(n: usize, d: usize) -> MhsaFlops {
    let (n, d) = (n as f64, d as f64);
    MhsaFlops {
        qkv: 3.0 * n * d * d,
        attention: 2.0 * n * n * d,
        scale: n * n,
        softmax: 2.0 * n * n,
        linear: n * d * d,
    }
}

/// Synaptic operations of spike-driven linear attention.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SdsaSops {
    pub qkv: f64,
    pub attention: f64,
    pub linear: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn sdsa_sops(n: usize, d: usize, timesteps: usize, fr1: f64, fr2: f64, fr3: f64, fl_conv: f64, fl_fc: f64) -> Result<SdsaSops> {
    for fr in [fr1, fr2, fr3] {
        if !(0.0..=1.0).contains(&fr) {
            return Err(Error::Accounting(format!("firing rate {fr} outside [0, 1]")));
        }
    }
    let t = timesteps as f64;
    Ok(SdsaSops {
        qkv: t * fr1 * 3.0 * fl_conv,
        attention: t * fr2 * n as f64 * (d * d) as f64,
        linear: t * fr3 * fl_fc,
    })
}
