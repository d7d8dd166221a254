//! Artifact serialization: profile/band CSVs, fit-summary and manifest JSON,
//! and atomic file writes (temp-then-rename, partial outputs removed on
//! failure).
//!
//! Floats are rendered with Rust's shortest round-trip formatting and '.'
//! decimal separator, so identical runs produce identical bytes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tblab::bloch::BandStructure;
use tblab::locality::{DecayProfile, FitResult};
use tblab::tightbinding::ToyChainParams;

use crate::error::{CliError, Result};

/// Shortest decimal string that parses back to exactly this value.
pub fn fmt_float(x: f64) -> String {
    format!("{x}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_float).unwrap_or_default()
}

/// CSV body for a decay profile, one row per distance class; the metadata
/// columns repeat per row so every file is self-describing.
pub fn profile_csv(profile: &DecayProfile) -> Result<String> {
    let meta = profile.meta();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "experiment_id",
        "gap_minus",
        "gap_plus",
        "epsilon",
        "norm_kind",
        "seed",
        "r",
        "magnitude",
    ])
    .map_err(csv_err)?;
    for &(r, magnitude) in profile.samples() {
        w.write_record([
            meta.experiment_id.as_str(),
            &fmt_opt(meta.gap_minus),
            &fmt_opt(meta.gap_plus),
            &fmt_opt(meta.epsilon),
            meta.norm_kind.unwrap_or(""),
            &meta.seed.map(|s| s.to_string()).unwrap_or_default(),
            &fmt_float(r),
            &fmt_float(magnitude),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

/// CSV body for a band structure in long format: one row per
/// (wavevector, band index).
pub fn bands_csv(bs: &BandStructure) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["xi", "band", "energy"]).map_err(csv_err)?;
    for (row, xi) in bs.kgrid().iter().enumerate() {
        for band in 0..bs.n_bands() {
            w.write_record([
                &fmt_float(xi[0]),
                &band.to_string(),
                &fmt_float(bs.bands()[(row, band)]),
            ])
            .map_err(csv_err)?;
        }
    }
    finish_csv(w)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Runtime(format!("csv serialization failed: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Runtime(format!("csv serialization failed: {e}")))?;
    String::from_utf8(bytes).map_err(|e| CliError::Runtime(format!("csv was not utf-8: {e}")))
}

/// Model parameters and model-wide constants as solved/assembled for one
/// experiment entry.
#[derive(Clone, Debug, Serialize)]
pub struct ResolvedModel {
    pub c1: f64,
    pub c2: f64,
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub d: [f64; 3],
    pub cutoff: f64,
    pub h0: f64,
    pub gamma0: f64,
}

impl ResolvedModel {
    pub fn new(params: &ToyChainParams, model: &tblab::tightbinding::TBModel) -> Self {
        Self {
            c1: params.c1,
            c2: params.c2,
            a: params.a,
            b: params.b,
            d: params.d,
            cutoff: model.cutoff(),
            h0: model.h0(),
            gamma0: model.gamma0(),
        }
    }
}

/// One experiment entry of the manifest: everything needed to regenerate the
/// files it lists, bit for bit.
#[derive(Clone, Debug, Serialize)]
pub struct ManifestEntry {
    pub experiment_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_plus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_minus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub norm_kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_atoms: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kgrid: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps_f: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<f64>,
    pub model: ResolvedModel,
    pub outputs: Vec<String>,
}

/// Reproduction manifest for a run.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub version: &'static str,
    pub kind: &'static str,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

/// One fitted profile in the fit summary.
#[derive(Clone, Debug, Serialize)]
pub struct FitSummary {
    pub experiment_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_plus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gap_minus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: [f64; 2],
    pub n_used: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crossover_radius: Option<f64>,
}

impl FitSummary {
    pub fn from_fit(profile: &DecayProfile, fit: &FitResult) -> Self {
        let meta = profile.meta();
        Self {
            experiment_id: meta.experiment_id.clone(),
            gap_plus: meta.gap_plus,
            gap_minus: meta.gap_minus,
            epsilon: meta.epsilon,
            slope: fit.slope,
            intercept: fit.intercept,
            r_squared: fit.r_squared,
            window: [fit.window.0, fit.window.1],
            n_used: fit.n_used,
            crossover_radius: None,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FitsFile {
    pub entries: Vec<FitSummary>,
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("json serialization failed: {e}")))?;
    text.push('\n');
    Ok(text)
}

/// Write `bytes` to `path` through a temp file in the same directory; the
/// rename makes the file appear complete or not at all.
fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = path.with_file_name(format!(
        "{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

/// Write every artifact into `dir`; on any failure, remove the files already
/// written in this run so no partial output set remains.
pub fn write_all(dir: &Path, files: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    let mut written: Vec<PathBuf> = Vec::with_capacity(files.len());
    for (name, body) in files {
        let path = dir.join(name);
        if let Err(e) = write_atomic(&path, body.as_bytes()) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(CliError::Runtime(format!(
                "cannot write {}: {e}",
                path.display()
            )));
        }
        written.push(path);
    }
    Ok(())
}
