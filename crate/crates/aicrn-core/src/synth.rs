//! Synthetic 8-lead ECG records with labels known by construction.
//!
//! Each beat is a sum of Gaussian bumps: P wave, Q/R/S complex, T wave. The
//! six labels are not measured from the waveform afterwards; the waveform is
//! built so that the labels hold exactly:
//!
//! - R peaks are spaced RR = 60000/hr ms apart (snapped to the sample grid),
//! - the P wave onset sits `pr` ms before the QRS onset,
//! - the QRS complex spans `qrs` ms centered on the R peak,
//! - the T wave ends `qt` ms after the QRS onset,
//! - the R bump amplitude is adjusted so the signal value at each R-peak
//!   sample equals `rpa` exactly (unit lead gain, no noise),
//! - the T bump peaks at `twa`.
//!
//! Morphological realism is out of scope; analytic label control is the
//! point.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{save_dataset, EcgRecord, Labels, CANONICAL_LEADS};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::timeutil::format_iso8601_utc;

/// One beat's ground-truth parameters (labels plus wave widths).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeatParams {
    pub hr_bpm: f64,
    pub pr_ms: f64,
    pub qrs_ms: f64,
    pub qt_ms: f64,
    pub rpa_mv: f64,
    pub twa_mv: f64,
    /// Gaussian sigma of the P wave, ms.
    pub sigma_p_ms: f64,
    /// Gaussian sigma scale of the QRS sub-waves, ms.
    pub sigma_qrs_ms: f64,
    /// Gaussian sigma of the T wave, ms.
    pub sigma_t_ms: f64,
}

pub const HR_RANGE: (f64, f64) = (50.0, 110.0);
pub const PR_RANGE: (f64, f64) = (120.0, 200.0);
pub const QRS_RANGE: (f64, f64) = (70.0, 110.0);
pub const QT_RANGE: (f64, f64) = (320.0, 440.0);
pub const RPA_RANGE: (f64, f64) = (0.5, 2.5);
pub const TWA_RANGE: (f64, f64) = (0.1, 0.6);

const P_AMPLITUDE_MV: f64 = 0.15;
const QS_FRACTION: f64 = 0.15;

impl BeatParams {
    /// Ordering invariants: waves fit inside the beat and the R peak stays
    /// the tallest feature (so peak delineation has something to find).
    pub fn validate(&self) -> Result<()> {
        let rr = 60_000.0 / self.hr_bpm;
        if !(self.qrs_ms < self.qt_ms) {
            return Err(Error::Data(format!(
                "beat generation: qrs {} must be shorter than qt {}",
                self.qrs_ms, self.qt_ms
            )));
        }
        if !(self.qt_ms < rr) {
            return Err(Error::Data(format!(
                "beat generation: qt {} must fit inside RR {}",
                self.qt_ms, rr
            )));
        }
        if !(self.rpa_mv >= 2.0 * self.twa_mv) {
            return Err(Error::Data(format!(
                "beat generation: rpa {} must be at least twice twa {}",
                self.rpa_mv, self.twa_mv
            )));
        }
        if !(5.0 * self.sigma_p_ms <= self.pr_ms) {
            return Err(Error::Data(
                "beat generation: P wave wider than the PR interval".into(),
            ));
        }
        if !(self.qt_ms - 5.0 * self.sigma_t_ms > self.qrs_ms) {
            return Err(Error::Data(
                "beat generation: T wave overlaps the QRS complex".into(),
            ));
        }
        Ok(())
    }
}

/// Uniform draws within the physiological ranges, resampled until the
/// invariants hold (only the rpa/twa relation can actually fail, so heart
/// rate stays uniform).
pub fn sample_params(rng: &mut Rng) -> BeatParams {
    loop {
        let p = BeatParams {
            hr_bpm: rng.range(HR_RANGE.0, HR_RANGE.1),
            pr_ms: rng.range(PR_RANGE.0, PR_RANGE.1),
            qrs_ms: rng.range(QRS_RANGE.0, QRS_RANGE.1),
            qt_ms: rng.range(QT_RANGE.0, QT_RANGE.1),
            rpa_mv: rng.range(RPA_RANGE.0, RPA_RANGE.1),
            twa_mv: rng.range(TWA_RANGE.0, TWA_RANGE.1),
            sigma_p_ms: rng.range(12.0, 20.0),
            sigma_qrs_ms: rng.range(7.0, 11.0),
            sigma_t_ms: rng.range(22.0, 32.0),
        };
        if p.validate().is_ok() {
            return p;
        }
    }
}

/// Corpus generation settings.
#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    pub n_records: usize,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub noise_std_mv: f64,
    /// Projection gain of the shared beat template onto each of the 8 leads.
    pub lead_gains: [f64; 8],
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_records: 0,
            duration_s: 10.0,
            sample_rate_hz: 100.0,
            noise_std_mv: 0.02,
            lead_gains: [1.0, 1.1, -0.4, 0.3, 0.7, 1.0, 0.9, 0.8],
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    fn n_samples(&self) -> Result<usize> {
        let n = self.duration_s * self.sample_rate_hz;
        if !(n.is_finite() && n > 0.0 && (n - n.round()).abs() < 1e-9) {
            return Err(Error::Config(format!(
                "duration_s x sample_rate_hz must be a positive integer, got {}",
                n
            )));
        }
        Ok(n.round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.n_samples()?;
        if self.noise_std_mv < 0.0 || !self.noise_std_mv.is_finite() {
            return Err(Error::Config("noise_std_mv must be non-negative".into()));
        }
        if self.lead_gains.iter().any(|&g| g == 0.0 || !g.is_finite()) {
            return Err(Error::Config(
                "lead gains must be finite and nonzero".into(),
            ));
        }
        Ok(())
    }
}

/// R-peak sample indices for a beat train: the first R sits half an RR
/// interval into the record, subsequent ones RR apart, each snapped to the
/// sample grid.
pub fn r_peak_samples(p: &BeatParams, g: &GeneratorConfig) -> Result<Vec<usize>> {
    let n = g.n_samples()?;
    let duration_ms = 1000.0 * n as f64 / g.sample_rate_hz;
    let rr = 60_000.0 / p.hr_bpm;
    let mut peaks = Vec::new();
    let mut center = rr / 2.0;
    while center < duration_ms {
        let s = (center * g.sample_rate_hz / 1000.0).round() as usize;
        if s < n {
            peaks.push(s);
        }
        center += rr;
    }
    Ok(peaks)
}

struct Bump {
    center_ms: f64,
    sigma_ms: f64,
    amp: f64,
}

fn add_bump(template: &mut [f64], bump: &Bump, fs: f64) {
    let denom = 2.0 * bump.sigma_ms * bump.sigma_ms;
    for (s, slot) in template.iter_mut().enumerate() {
        let t = s as f64 * 1000.0 / fs;
        let d = t - bump.center_ms;
        *slot += bump.amp * (-d * d / denom).exp();
    }
}

/// Build one record. With zero noise and unit gain, the signal's global
/// maximum equals `p.rpa_mv` at every R-peak sample.
pub fn synth_record(
    id: &str,
    timestamp: Option<String>,
    p: &BeatParams,
    g: &GeneratorConfig,
    rng: &mut Rng,
) -> Result<EcgRecord> {
    p.validate()?;
    g.validate()?;
    let n = g.n_samples()?;
    let fs = g.sample_rate_hz;
    let peaks = r_peak_samples(p, g)?;

    // Everything except the R bumps first.
    let mut template = vec![0.0f64; n];
    for &peak in &peaks {
        let rc = peak as f64 * 1000.0 / fs;
        let qrs_on = rc - p.qrs_ms / 2.0;
        let bumps = [
            // P wave: onset pr ms before the QRS onset.
            Bump {
                center_ms: qrs_on - p.pr_ms + 2.5 * p.sigma_p_ms,
                sigma_ms: p.sigma_p_ms,
                amp: P_AMPLITUDE_MV,
            },
            Bump {
                center_ms: rc - p.qrs_ms / 3.0,
                sigma_ms: 0.5 * p.sigma_qrs_ms,
                amp: -QS_FRACTION * p.rpa_mv,
            },
            Bump {
                center_ms: rc + p.qrs_ms / 3.0,
                sigma_ms: 0.5 * p.sigma_qrs_ms,
                amp: -QS_FRACTION * p.rpa_mv,
            },
            // T wave: ends qt ms after the QRS onset.
            Bump {
                center_ms: qrs_on + p.qt_ms - 2.5 * p.sigma_t_ms,
                sigma_ms: p.sigma_t_ms,
                amp: p.twa_mv,
            },
        ];
        for b in &bumps {
            add_bump(&mut template, b, fs);
        }
    }
    // R bumps, amplitude-corrected so template[peak] == rpa exactly.
    for &peak in &peaks {
        let rc = peak as f64 * 1000.0 / fs;
        let r_amp = p.rpa_mv - template[peak];
        add_bump(
            &mut template,
            &Bump {
                center_ms: rc,
                sigma_ms: 0.7 * p.sigma_qrs_ms,
                amp: r_amp,
            },
            fs,
        );
    }

    let n_leads = CANONICAL_LEADS.len();
    let mut signal = Vec::with_capacity(n_leads * n);
    for &gain in &g.lead_gains {
        for &v in &template {
            let noise = if g.noise_std_mv > 0.0 {
                g.noise_std_mv * rng.normal()
            } else {
                0.0
            };
            signal.push((gain * v + noise) as f32);
        }
    }
    Ok(EcgRecord {
        id: id.to_string(),
        signal,
        n_leads,
        n_samples: n,
        sample_rate_hz: fs,
        timestamp,
        labels: Labels {
            pr_ms: Some(p.pr_ms),
            qt_ms: Some(p.qt_ms),
            qrs_ms: Some(p.qrs_ms),
            hr_bpm: Some(p.hr_bpm),
            rpa_mv: Some(p.rpa_mv),
            twa_mv: Some(p.twa_mv),
        },
    })
}

/// Local maxima above 0.6x the global maximum with a 200 ms refractory gap.
/// An empty result means no peaks were found; the caller decides severity.
pub fn delineate_r_peaks(lead: &[f32], sample_rate_hz: f64) -> Vec<usize> {
    if lead.len() < 3 {
        return Vec::new();
    }
    let gmax = lead.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !(gmax > 0.0) {
        return Vec::new();
    }
    let threshold = 0.6 * gmax;
    let refractory = (0.2 * sample_rate_hz).round() as usize;
    let mut peaks: Vec<usize> = Vec::new();
    for i in 1..lead.len() - 1 {
        let v = lead[i];
        if v < threshold || v < lead[i - 1] || v <= lead[i + 1] {
            continue;
        }
        match peaks.last() {
            Some(&last) if i - last < refractory => {
                if v > lead[last] {
                    *peaks.last_mut().unwrap() = i;
                }
            }
            _ => peaks.push(i),
        }
    }
    peaks
}

/// Heart rate estimate from delineated peaks via the mean RR interval.
pub fn hr_from_peaks(peaks: &[usize], sample_rate_hz: f64) -> Result<f64> {
    if peaks.len() < 2 {
        return Err(Error::Data(format!(
            "need at least two peaks to estimate heart rate, found {}",
            peaks.len()
        )));
    }
    let total_samples = (peaks[peaks.len() - 1] - peaks[0]) as f64;
    let mean_rr_ms = total_samples / (peaks.len() - 1) as f64 * 1000.0 / sample_rate_hz;
    crate::data::hr_from_rr(mean_rr_ms)
}

/// What `generate_corpus` produced. The manifest file itself carries only
/// the seed and record ids, so identical seeds yield byte-identical corpora
/// regardless of where they are written.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub n_records: usize,
    pub record_ids: Vec<String>,
    #[serde(skip)]
    pub metadata_path: PathBuf,
    #[serde(skip)]
    pub manifest_path: PathBuf,
}

const TIMESTAMP_BASE: i64 = 1_704_067_200; // 2024-01-01T00:00:00Z
const TIMESTAMP_STEP_S: i64 = 86_400;

/// Write `n_records` synthetic records plus metadata CSV and a manifest into
/// `out_dir`, in the data-pipeline interchange format. Per-record substreams
/// of the seed keep the corpus byte-identical for a given config.
pub fn generate_corpus(g: &GeneratorConfig, out_dir: &Path) -> Result<CorpusManifest> {
    g.validate()?;
    if g.n_records == 0 {
        return Err(Error::Config("n_records must be >= 1".into()));
    }
    let mut records = Vec::with_capacity(g.n_records);
    for i in 0..g.n_records {
        let mut rng = Rng::substream(g.seed, i as u64);
        let params = sample_params(&mut rng);
        let id = format!("rec{:05}", i);
        let ts = format_iso8601_utc(TIMESTAMP_BASE + i as i64 * TIMESTAMP_STEP_S);
        records.push(synth_record(&id, Some(ts), &params, g, &mut rng)?);
    }
    let metadata_path = save_dataset(out_dir, &records)?;
    let manifest = CorpusManifest {
        seed: g.seed,
        n_records: g.n_records,
        record_ids: records.iter().map(|r| r.id.clone()).collect(),
        metadata_path,
        manifest_path: out_dir.join("manifest.json"),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Data(format!("manifest serialization failed: {}", e)))?;
    std::fs::write(&manifest.manifest_path, json)
        .map_err(|e| Error::io(&manifest.manifest_path, e))?;
    Ok(manifest)
}
