//! ECG dataset ingestion: CSV interchange format, lead selection, cleaning,
//! per-lead normalization, splitting, and batching.
//!
//! Interchange format:
//! - metadata CSV (UTF-8, header required):
//!   `record_id,signal_path,sample_rate_hz,timestamp,pr_ms,qt_ms,qrs_ms,hr_bpm,rpa_mv,twa_mv`
//!   with an empty cell meaning a missing label;
//! - one signal CSV per record: header row of lead names, one row per sample,
//!   values in millivolts.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// The eight leads the models consume, in canonical row order.
pub const CANONICAL_LEADS: [&str; 8] = ["I", "II", "V1", "V2", "V3", "V4", "V5", "V6"];

pub const METADATA_HEADER: &str =
    "record_id,signal_path,sample_rate_hz,timestamp,pr_ms,qt_ms,qrs_ms,hr_bpm,rpa_mv,twa_mv";

/// Which of the six regression labels a model is trained on.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub enum TargetKind {
    Pr,
    Qt,
    Qrs,
    Hr,
    Rpa,
    Twa,
}

impl TargetKind {
    pub const ALL: [TargetKind; 6] = [
        TargetKind::Pr,
        TargetKind::Qt,
        TargetKind::Qrs,
        TargetKind::Hr,
        TargetKind::Rpa,
        TargetKind::Twa,
    ];

    /// Short selector used on the command line and in file names.
    pub fn short(self) -> &'static str {
        match self {
            TargetKind::Pr => "pr",
            TargetKind::Qt => "qt",
            TargetKind::Qrs => "qrs",
            TargetKind::Hr => "hr",
            TargetKind::Rpa => "rpa",
            TargetKind::Twa => "twa",
        }
    }

    /// Metadata CSV column carrying this label.
    pub fn column(self) -> &'static str {
        match self {
            TargetKind::Pr => "pr_ms",
            TargetKind::Qt => "qt_ms",
            TargetKind::Qrs => "qrs_ms",
            TargetKind::Hr => "hr_bpm",
            TargetKind::Rpa => "rpa_mv",
            TargetKind::Twa => "twa_mv",
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pr" => Ok(TargetKind::Pr),
            "qt" => Ok(TargetKind::Qt),
            "qrs" => Ok(TargetKind::Qrs),
            "hr" => Ok(TargetKind::Hr),
            "rpa" => Ok(TargetKind::Rpa),
            "twa" => Ok(TargetKind::Twa),
            other => Err(Error::Config(format!(
                "unknown target `{}` (expected pr|qt|qrs|hr|rpa|twa)",
                other
            ))),
        }
    }
}

/// The six optional regression labels of one record.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Labels {
    pub pr_ms: Option<f64>,
    pub qt_ms: Option<f64>,
    pub qrs_ms: Option<f64>,
    pub hr_bpm: Option<f64>,
    pub rpa_mv: Option<f64>,
    pub twa_mv: Option<f64>,
}

impl Labels {
    pub fn get(&self, target: TargetKind) -> Option<f64> {
        match target {
            TargetKind::Pr => self.pr_ms,
            TargetKind::Qt => self.qt_ms,
            TargetKind::Qrs => self.qrs_ms,
            TargetKind::Hr => self.hr_bpm,
            TargetKind::Rpa => self.rpa_mv,
            TargetKind::Twa => self.twa_mv,
        }
    }
}

/// One subject's multi-lead signal plus optional labels and metadata.
/// `signal` is lead-major: lead `i` occupies `i*n_samples..(i+1)*n_samples`.
#[derive(Clone, Debug)]
pub struct EcgRecord {
    pub id: String,
    pub signal: Vec<f32>,
    pub n_leads: usize,
    pub n_samples: usize,
    pub sample_rate_hz: f64,
    pub timestamp: Option<String>,
    pub labels: Labels,
}

impl EcgRecord {
    pub fn lead(&self, i: usize) -> &[f32] {
        &self.signal[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn label(&self, target: TargetKind) -> Option<f64> {
        self.labels.get(target)
    }
}

// ---- lead selection -----------------------------------------------------------

/// Keep rows [I, II, V1..V6] out of a named lead-major matrix, in canonical
/// order. Lead names match case-insensitively; already-canonical 8-lead input
/// passes through unchanged.
pub fn select_leads(lead_names: &[String], signal: &[f32], n_samples: usize) -> Result<Vec<f32>> {
    if lead_names.len() * n_samples != signal.len() {
        return Err(Error::Data(format!(
            "signal has {} values, expected {} leads x {} samples",
            signal.len(),
            lead_names.len(),
            n_samples
        )));
    }
    let upper: Vec<String> = lead_names
        .iter()
        .map(|n| n.trim().to_ascii_uppercase())
        .collect();
    let mut out = Vec::with_capacity(8 * n_samples);
    for want in CANONICAL_LEADS {
        let row = upper
            .iter()
            .position(|n| n == want)
            .ok_or_else(|| Error::Data(format!("missing lead {}", want)))?;
        out.extend_from_slice(&signal[row * n_samples..(row + 1) * n_samples]);
    }
    Ok(out)
}

// ---- CSV I/O -------------------------------------------------------------------

fn parse_float(field: &str, what: &str, where_: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| {
        Error::Data(format!(
            "{}: cannot parse {} from `{}`",
            where_, what, field
        ))
    })
}

fn parse_optional_label(field: &str, what: &str, where_: &str) -> Result<Option<f64>> {
    let t = field.trim();
    if t.is_empty() {
        return Ok(None);
    }
    let v = parse_float(t, what, where_)?;
    if !v.is_finite() || v <= 0.0 {
        return Err(Error::Data(format!(
            "{}: label {} must be finite and positive, got {}",
            where_, what, v
        )));
    }
    Ok(Some(v))
}

/// Load one signal CSV (header of lead names, one row per sample) and return
/// the canonical 8-lead lead-major matrix plus the sample count.
pub fn load_signal_csv(path: &Path) -> Result<(Vec<f32>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty signal file", path.display())))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let n_leads = names.len();
    let mut sample_major: Vec<f32> = Vec::new();
    let mut n_samples = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            let v: f32 = field.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}:{}: cannot parse sample value `{}`",
                    path.display(),
                    lineno + 2,
                    field
                ))
            })?;
            sample_major.push(v);
            count += 1;
        }
        if count != n_leads {
            return Err(Error::Data(format!(
                "{}:{}: row has {} values, header names {} leads",
                path.display(),
                lineno + 2,
                count,
                n_leads
            )));
        }
        n_samples += 1;
    }
    if n_samples == 0 {
        return Err(Error::Data(format!("{}: no samples", path.display())));
    }
    // Transpose to lead-major.
    let mut lead_major = vec![0f32; n_leads * n_samples];
    for s in 0..n_samples {
        for l in 0..n_leads {
            lead_major[l * n_samples + s] = sample_major[s * n_leads + l];
        }
    }
    let selected = select_leads(&names, &lead_major, n_samples)
        .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    Ok((selected, n_samples))
}

/// Write a canonical 8-lead signal CSV. Values are printed with nine
/// significant digits, enough for `f32` to round-trip bitwise.
pub fn write_signal_csv(path: &Path, signal: &[f32], n_samples: usize) -> Result<()> {
    let n_leads = CANONICAL_LEADS.len();
    debug_assert_eq!(signal.len(), n_leads * n_samples);
    let mut out = String::with_capacity(signal.len() * 16);
    out.push_str(&CANONICAL_LEADS.join(","));
    out.push('\n');
    for s in 0..n_samples {
        for l in 0..n_leads {
            if l > 0 {
                out.push(',');
            }
            out.push_str(&format!("{:.8e}", signal[l * n_samples + s]));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn format_label(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{}", x),
        None => String::new(),
    }
}

/// Write records as metadata CSV plus per-record signal CSVs into `dir`.
/// Returns the metadata path.
pub fn save_dataset(dir: &Path, records: &[EcgRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut meta = String::new();
    meta.push_str(METADATA_HEADER);
    meta.push('\n');
    for rec in records {
        let signal_file = format!("{}.csv", rec.id);
        write_signal_csv(&dir.join(&signal_file), &rec.signal, rec.n_samples)?;
        meta.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            rec.id,
            signal_file,
            rec.sample_rate_hz,
            rec.timestamp.as_deref().unwrap_or(""),
            format_label(rec.labels.pr_ms),
            format_label(rec.labels.qt_ms),
            format_label(rec.labels.qrs_ms),
            format_label(rec.labels.hr_bpm),
            format_label(rec.labels.rpa_mv),
            format_label(rec.labels.twa_mv),
        ));
    }
    let meta_path = dir.join("metadata.csv");
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    Ok(meta_path)
}

/// Load a dataset from its metadata CSV. Signal paths are resolved relative
/// to the metadata file's directory.
pub fn load_dataset(meta_path: &Path) -> Result<Vec<EcgRecord>> {
    let text = fs::read_to_string(meta_path).map_err(|e| Error::io(meta_path, e))?;
    let base = meta_path.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty metadata file", meta_path.display())))?;
    if header.trim() != METADATA_HEADER {
        return Err(Error::Data(format!(
            "{}: unexpected header `{}` (expected `{}`)",
            meta_path.display(),
            header.trim(),
            METADATA_HEADER
        )));
    }
    let mut records = Vec::new();
    let mut seen_ids = HashSet::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let where_ = format!("{}:{}", meta_path.display(), lineno + 2);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::Data(format!(
                "{}: row has {} fields, expected 10",
                where_,
                fields.len()
            )));
        }
        let id = fields[0].trim().to_string();
        if id.is_empty() {
            return Err(Error::Data(format!("{}: empty record_id", where_)));
        }
        if !seen_ids.insert(id.clone()) {
            return Err(Error::Data(format!(
                "{}: duplicate record_id {}",
                where_, id
            )));
        }
        let signal_path = base.join(fields[1].trim());
        let sample_rate_hz = parse_float(fields[2], "sample_rate_hz", &where_)?;
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::Data(format!(
                "{}: sample_rate_hz must be positive, got {}",
                where_, sample_rate_hz
            )));
        }
        let timestamp = {
            let t = fields[3].trim();
            if t.is_empty() {
                None
            } else {
                Some(t.to_string())
            }
        };
        let labels = Labels {
            pr_ms: parse_optional_label(fields[4], "pr_ms", &where_)?,
            qt_ms: parse_optional_label(fields[5], "qt_ms", &where_)?,
            qrs_ms: parse_optional_label(fields[6], "qrs_ms", &where_)?,
            hr_bpm: parse_optional_label(fields[7], "hr_bpm", &where_)?,
            rpa_mv: parse_optional_label(fields[8], "rpa_mv", &where_)?,
            twa_mv: parse_optional_label(fields[9], "twa_mv", &where_)?,
        };
        let (signal, n_samples) = load_signal_csv(&signal_path)?;
        records.push(EcgRecord {
            id,
            signal,
            n_leads: CANONICAL_LEADS.len(),
            n_samples,
            sample_rate_hz,
            timestamp,
            labels,
        });
    }
    Ok(records)
}

// ---- cleaning -------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CleanReport {
    pub kept: usize,
    pub missing_label: usize,
    pub non_finite_signal: usize,
}

/// Drop records without the chosen target label or with non-finite signal
/// values. Fails if nothing survives.
pub fn clean(records: Vec<EcgRecord>, target: TargetKind) -> Result<(Vec<EcgRecord>, CleanReport)> {
    let mut report = CleanReport::default();
    let mut kept = Vec::with_capacity(records.len());
    for rec in records {
        if rec.label(target).is_none() {
            report.missing_label += 1;
            continue;
        }
        if !rec.signal.iter().all(|v| v.is_finite()) {
            report.non_finite_signal += 1;
            continue;
        }
        kept.push(rec);
    }
    report.kept = kept.len();
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "no usable records for target {} ({} missing the label, {} with non-finite signal)",
            target, report.missing_label, report.non_finite_signal
        )));
    }
    Ok((kept, report))
}

// ---- normalization ---------------------------------------------------------------

/// Per-lead mean and standard deviation, computed on the training split only.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Stats that leave the signal unchanged.
    pub fn identity(n_leads: usize) -> Self {
        NormStats {
            mean: vec![0.0; n_leads],
            std: vec![1.0; n_leads],
        }
    }
}

/// Population statistics per lead over every sample of every record.
pub fn compute_norm_stats(records: &[EcgRecord]) -> Result<NormStats> {
    if records.is_empty() {
        return Err(Error::Data(
            "cannot compute normalization stats of an empty set".into(),
        ));
    }
    let n_leads = records[0].n_leads;
    let mut sum = vec![0.0f64; n_leads];
    let mut sum_sq = vec![0.0f64; n_leads];
    let mut count = vec![0.0f64; n_leads];
    for rec in records {
        if rec.n_leads != n_leads {
            return Err(Error::Data(format!(
                "record {} has {} leads, expected {}",
                rec.id, rec.n_leads, n_leads
            )));
        }
        for l in 0..n_leads {
            for &v in rec.lead(l) {
                sum[l] += v as f64;
                sum_sq[l] += (v as f64) * (v as f64);
                count[l] += 1.0;
            }
        }
    }
    let mut mean = vec![0.0; n_leads];
    let mut std = vec![0.0; n_leads];
    for l in 0..n_leads {
        mean[l] = sum[l] / count[l];
        let var = (sum_sq[l] / count[l] - mean[l] * mean[l]).max(0.0);
        std[l] = var.sqrt();
        if std[l] <= 0.0 {
            return Err(Error::Data(format!(
                "constant lead {}: standard deviation is zero",
                CANONICAL_LEADS.get(l).copied().unwrap_or("?")
            )));
        }
    }
    Ok(NormStats { mean, std })
}

/// Apply the per-lead z-score in place; labels untouched.
pub fn normalize(records: &mut [EcgRecord], stats: &NormStats) -> Result<()> {
    for rec in records {
        if rec.n_leads != stats.mean.len() {
            return Err(Error::Data(format!(
                "record {} has {} leads but stats cover {}",
                rec.id,
                rec.n_leads,
                stats.mean.len()
            )));
        }
        let n = rec.n_samples;
        for l in 0..rec.n_leads {
            if stats.std[l] <= 0.0 {
                return Err(Error::Data(format!(
                    "constant lead {}: std must be positive",
                    l
                )));
            }
            let (m, s) = (stats.mean[l], stats.std[l]);
            for v in &mut rec.signal[l * n..(l + 1) * n] {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
    }
    Ok(())
}

// ---- splitting ---------------------------------------------------------------------

/// Ratio split specification; the ratios must sum to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64, seed: u64) -> Self {
        SplitSpec {
            train,
            val,
            test,
            seed,
        }
    }

    pub fn ratios(&self) -> [f64; 3] {
        [self.train, self.val, self.test]
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 42,
        }
    }
}

/// Seeded shuffle then contiguous partition: floor(n*train) and floor(n*val)
/// records go to train and val, the remainder to test.
pub fn split(
    records: Vec<EcgRecord>,
    spec: &SplitSpec,
) -> Result<(Vec<EcgRecord>, Vec<EcgRecord>, Vec<EcgRecord>)> {
    for r in spec.ratios() {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!(
                "split ratios must be in [0,1], got {}",
                r
            )));
        }
    }
    let sum: f64 = spec.ratios().iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {}",
            sum
        )));
    }
    let n = records.len();
    let n_train = (n as f64 * spec.train).floor() as usize;
    let n_val = (n as f64 * spec.val).floor() as usize;
    let n_test = n - n_train - n_val;
    for (name, ratio, size) in [
        ("train", spec.train, n_train),
        ("val", spec.val, n_val),
        ("test", spec.test, n_test),
    ] {
        if ratio > 0.0 && size == 0 {
            return Err(Error::Config(format!(
                "split ratio {} for {} yields an empty subset of {} records",
                ratio, name, n
            )));
        }
    }
    let mut rng = Rng::substream(spec.seed, u64::MAX);
    let mut shuffled = records;
    rng.shuffle(&mut shuffled);
    let mut train = shuffled;
    let test = train.split_off(n_train + n_val);
    let val = train.split_off(n_train);
    Ok((train, val, test))
}

// ---- heart rate -------------------------------------------------------------------

/// Heart rate in bpm from an RR interval in milliseconds.
pub fn hr_from_rr(rr_ms: f64) -> Result<f64> {
    if !(rr_ms.is_finite() && rr_ms > 0.0) {
        return Err(Error::Data(format!(
            "RR interval must be positive, got {} ms",
            rr_ms
        )));
    }
    Ok(60_000.0 / rr_ms)
}

// ---- batching ----------------------------------------------------------------------

/// One minibatch: `x` is (size x 8 x len) row-major, `y` is (size x 1).
#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    pub x: Vec<f32>,
    pub y: Vec<f32>,
}

fn batch_from_indices(
    records: &[EcgRecord],
    idx: &[usize],
    target: TargetKind,
    expected_len: usize,
) -> Result<Batch> {
    let n_leads = CANONICAL_LEADS.len();
    let mut x = Vec::with_capacity(idx.len() * n_leads * expected_len);
    let mut y = Vec::with_capacity(idx.len());
    for &i in idx {
        let rec = &records[i];
        if rec.n_samples != expected_len {
            return Err(Error::Dim(format!(
                "record {} has {} samples but the model expects {}",
                rec.id, rec.n_samples, expected_len
            )));
        }
        if rec.n_leads != n_leads {
            return Err(Error::Dim(format!(
                "record {} has {} leads, expected {}",
                rec.id, rec.n_leads, n_leads
            )));
        }
        x.extend_from_slice(&rec.signal);
        let label = rec.label(target).ok_or_else(|| {
            Error::Data(format!("record {} is missing target {}", rec.id, target))
        })?;
        y.push(label as f32);
    }
    Ok(Batch {
        size: idx.len(),
        x,
        y,
    })
}

fn chunk_indices(order: Vec<usize>, batch_size: usize) -> Vec<Vec<usize>> {
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    // A trailing singleton is merged into the previous batch.
    if chunks.len() >= 2 && chunks.last().map(|c| c.len()) == Some(1) {
        let last = chunks.pop().unwrap();
        chunks.last_mut().unwrap().extend(last);
    }
    chunks
}

/// Seeded per-epoch shuffle into minibatches of `batch_size` (final short
/// batch kept if it has at least two records, otherwise merged into the
/// previous one).
pub fn batches(
    records: &[EcgRecord],
    target: TargetKind,
    batch_size: usize,
    expected_len: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::Config(format!(
            "batch_size must be >= 2, got {}",
            batch_size
        )));
    }
    if records.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 records to form training batches, have {}",
            records.len()
        )));
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = Rng::substream(seed, epoch as u64);
    rng.shuffle(&mut order);
    chunk_indices(order, batch_size)
        .iter()
        .map(|idx| batch_from_indices(records, idx, target, expected_len))
        .collect()
}

/// Deterministic in-order batches for evaluation (no shuffle; a single
/// record yields one batch of one).
pub fn sequential_batches(
    records: &[EcgRecord],
    target: TargetKind,
    batch_size: usize,
    expected_len: usize,
) -> Result<Vec<Batch>> {
    if records.is_empty() {
        return Err(Error::Data("cannot batch an empty record set".into()));
    }
    let order: Vec<usize> = (0..records.len()).collect();
    chunk_indices(order, batch_size.max(1))
        .iter()
        .map(|idx| batch_from_indices(records, idx, target, expected_len))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, n_samples: usize, hr: Option<f64>, qt: Option<f64>) -> EcgRecord {
        let n_leads = 8;
        let mut signal = Vec::with_capacity(n_leads * n_samples);
        for l in 0..n_leads {
            for s in 0..n_samples {
                signal.push((l as f32 + 1.0) * 0.1 + (s as f32 * 0.37).sin());
            }
        }
        EcgRecord {
            id: id.to_string(),
            signal,
            n_leads,
            n_samples,
            sample_rate_hz: 100.0,
            timestamp: None,
            labels: Labels {
                hr_bpm: hr,
                qt_ms: qt,
                ..Labels::default()
            },
        }
    }

    #[test]
    fn select_leads_from_standard_twelve() {
        let names: Vec<String> = [
            "I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let n = 4;
        let mut signal = Vec::new();
        for row in 0..12 {
            signal.extend((0..n).map(|s| (row * 100 + s) as f32));
        }
        let out = select_leads(&names, &signal, n).unwrap();
        // Kept rows are input indices {0,1,6,7,8,9,10,11}.
        let expect_rows = [0, 1, 6, 7, 8, 9, 10, 11];
        for (k, &row) in expect_rows.iter().enumerate() {
            assert_eq!(out[k * n], (row * 100) as f32);
        }
    }

    #[test]
    fn select_leads_canonical_is_identity_and_missing_errors() {
        let names: Vec<String> = CANONICAL_LEADS.iter().map(|s| s.to_string()).collect();
        let signal: Vec<f32> = (0..8 * 3).map(|v| v as f32).collect();
        let out = select_leads(&names, &signal, 3).unwrap();
        assert_eq!(out, signal);

        let mut missing = names.clone();
        missing[4] = "X".into(); // drop V3
        let err = select_leads(&missing, &signal, 3).unwrap_err();
        assert!(err.to_string().contains("missing lead V3"), "{}", err);
    }

    #[test]
    fn clean_counts_and_failure() {
        let mut records = Vec::new();
        for i in 0..10 {
            let qt = if i < 3 { None } else { Some(400.0) };
            records.push(rec(&format!("r{}", i), 16, Some(70.0), qt));
        }
        let (kept, report) = clean(records, TargetKind::Qt).unwrap();
        assert_eq!(kept.len(), 7);
        assert_eq!(report.missing_label, 3);
        assert_eq!(report.kept, 7);

        let complete: Vec<EcgRecord> = (0..4)
            .map(|i| rec(&format!("c{}", i), 16, Some(70.0), Some(400.0)))
            .collect();
        let (kept2, report2) = clean(complete.clone(), TargetKind::Qt).unwrap();
        assert_eq!(kept2.len(), 4);
        assert_eq!(report2.missing_label, 0);

        let all_missing: Vec<EcgRecord> = (0..4)
            .map(|i| rec(&format!("m{}", i), 16, None, None))
            .collect();
        assert!(clean(all_missing, TargetKind::Hr).is_err());
    }

    #[test]
    fn clean_drops_non_finite_signal() {
        let mut bad = rec("bad", 16, Some(70.0), None);
        bad.signal[5] = f32::NAN;
        let good = rec("good", 16, Some(70.0), None);
        let (kept, report) = clean(vec![bad, good], TargetKind::Hr).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!(report.non_finite_signal, 1);
        assert_eq!(kept[0].id, "good");
    }

    #[test]
    fn normalize_hand_case_and_identity_idempotence() {
        // lead mean 1, std 2: value 5 -> 2.0
        let stats = NormStats {
            mean: vec![1.0; 8],
            std: vec![2.0; 8],
        };
        let mut records = vec![rec("a", 4, Some(60.0), None)];
        records[0].signal = vec![5.0; 8 * 4];
        normalize(&mut records, &stats).unwrap();
        assert!(records[0].signal.iter().all(|&v| v == 2.0));

        let snapshot = records[0].signal.clone();
        normalize(&mut records, &NormStats::identity(8)).unwrap();
        assert_eq!(records[0].signal, snapshot);
    }

    #[test]
    fn normalize_training_split_is_zero_mean_unit_std() {
        let records: Vec<EcgRecord> = (0..16)
            .map(|i| rec(&format!("r{}", i), 2000, Some(60.0), None))
            .collect();
        // Give each record some variety.
        let mut records: Vec<EcgRecord> = records
            .into_iter()
            .enumerate()
            .map(|(i, mut r)| {
                for (j, v) in r.signal.iter_mut().enumerate() {
                    *v += ((i * 31 + j) as f32 * 0.01).cos() * 0.8;
                }
                r
            })
            .collect();
        let stats = compute_norm_stats(&records).unwrap();
        normalize(&mut records, &stats).unwrap();
        for l in 0..8 {
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            let mut n = 0.0f64;
            for r in &records {
                for &v in r.lead(l) {
                    sum += v as f64;
                    sum_sq += (v as f64) * (v as f64);
                    n += 1.0;
                }
            }
            let mean = sum / n;
            let std = (sum_sq / n - mean * mean).sqrt();
            assert!(mean.abs() < 1e-9, "lead {} mean {}", l, mean);
            assert!((std - 1.0).abs() < 1e-6, "lead {} std {}", l, std);
        }
    }

    #[test]
    fn constant_lead_is_an_error() {
        let mut r0 = rec("z", 16, Some(60.0), None);
        for v in &mut r0.signal[0..16] {
            *v = 0.0; // lead I constant
        }
        let err = compute_norm_stats(&[r0]).unwrap_err();
        assert!(err.to_string().contains("constant lead I"), "{}", err);
    }

    #[test]
    fn split_sizes_and_determinism() {
        let records: Vec<EcgRecord> = (0..10)
            .map(|i| rec(&format!("r{}", i), 8, Some(60.0), None))
            .collect();
        let spec = SplitSpec::default();
        let (train, val, test) = split(records.clone(), &spec).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (8, 1, 1));

        let ids = |v: &[EcgRecord]| v.iter().map(|r| r.id.clone()).collect::<Vec<_>>();
        let (t2, v2, s2) = split(records.clone(), &spec).unwrap();
        assert_eq!(ids(&train), ids(&t2));
        assert_eq!(ids(&val), ids(&v2));
        assert_eq!(ids(&test), ids(&s2));

        // Disjoint and exhaustive by id multiset.
        let mut all: Vec<String> = ids(&train);
        all.extend(ids(&val));
        all.extend(ids(&test));
        all.sort();
        let mut want: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
        want.sort();
        assert_eq!(all, want);
    }

    #[test]
    fn split_boundary_cases() {
        let records: Vec<EcgRecord> = (0..5)
            .map(|i| rec(&format!("r{}", i), 8, Some(60.0), None))
            .collect();
        let (train, val, test) = split(records.clone(), &SplitSpec::new(1.0, 0.0, 0.0, 1)).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (5, 0, 0));

        // A nonzero ratio that floors to zero records is a config error.
        let err = split(records, &SplitSpec::new(0.9, 0.05, 0.05, 1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn hr_from_rr_cases() {
        assert_eq!(hr_from_rr(1000.0).unwrap(), 60.0);
        assert_eq!(hr_from_rr(800.0).unwrap(), 75.0);
        assert!(hr_from_rr(0.0).is_err());
        assert!(hr_from_rr(-5.0).is_err());
    }

    #[test]
    fn batch_sizes_with_short_batch_merge() {
        let records: Vec<EcgRecord> = (0..7)
            .map(|i| rec(&format!("r{}", i), 8, Some(60.0 + i as f64), None))
            .collect();
        let bs = batches(&records, TargetKind::Hr, 3, 8, 5, 1).unwrap();
        let sizes: Vec<usize> = bs.iter().map(|b| b.size).collect();
        assert_eq!(sizes, vec![3, 4]);
        assert!(bs
            .iter()
            .all(|b| b.x.len() == b.size * 8 * 8 && b.y.len() == b.size));
    }

    #[test]
    fn epoch_changes_order_not_multiset() {
        let records: Vec<EcgRecord> = (0..9)
            .map(|i| rec(&format!("r{}", i), 8, Some(60.0 + i as f64), None))
            .collect();
        let collect_targets = |epoch: usize| -> Vec<f32> {
            batches(&records, TargetKind::Hr, 4, 8, 7, epoch)
                .unwrap()
                .iter()
                .flat_map(|b| b.y.clone())
                .collect()
        };
        let e1 = collect_targets(1);
        let e2 = collect_targets(2);
        assert_ne!(e1, e2);
        let mut s1 = e1.clone();
        let mut s2 = e2.clone();
        s1.sort_by(|a, b| a.partial_cmp(b).unwrap());
        s2.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(s1, s2);
    }

    #[test]
    fn batch_layout_is_channel_major() {
        let records: Vec<EcgRecord> = (0..2)
            .map(|i| rec(&format!("r{}", i), 8, Some(60.0), None))
            .collect();
        let bs = sequential_batches(&records, TargetKind::Hr, 2, 8).unwrap();
        assert_eq!(bs.len(), 1);
        // channel 0 of example 0 equals lead I of record 0
        assert_eq!(&bs[0].x[0..8], records[0].lead(0));
    }

    #[test]
    fn batch_length_mismatch_errors() {
        let records = vec![rec("a", 8, Some(60.0), None), rec("b", 8, Some(61.0), None)];
        let err = batches(&records, TargetKind::Hr, 2, 16, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Dim(_)));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = std::env::temp_dir().join("aicrn_data_roundtrip");
        let _ = std::fs::remove_dir_all(&dir);
        let mut records: Vec<EcgRecord> = (0..3)
            .map(|i| {
                let mut r = rec(&format!("rt{}", i), 12, Some(61.5), Some(395.25));
                r.timestamp = Some(format!("2024-01-0{}T00:00:00Z", i + 1));
                r
            })
            .collect();
        records[1].labels.qt_ms = None;
        let meta = save_dataset(&dir, &records).unwrap();
        let loaded = load_dataset(&meta).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in records.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.signal, b.signal, "signals must round-trip bitwise");
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.timestamp, b.timestamp);
        }
    }
}
