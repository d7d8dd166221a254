//! Experiment dispatch: execute a validated plan and assemble all artifact
//! bodies in memory. Sweep entries run on a rayon pool; results are collected
//! in input order so output bytes never depend on scheduling.

use rayon::prelude::*;
use serde::Serialize;

use tblab::bloch::{
    band_structure, compute_gaps_refined, solve_params_for_gaps, GapRegime, GapReport,
};
use tblab::lattice::{build_chain, MultiLattice, NormKind};
use tblab::locality::{
    energy_hessian_fd, fit_exponential_rate, hessian_profile, perturbed_locality_experiment,
    strong_locality_experiment, weak_locality_experiment, FixedGap, ProfileMeta, DEFAULT_KGRID,
};
use tblab::tightbinding::{toy_model, TBModel, ToyChainParams};

use crate::config::{ModelSpec, Plan};
use crate::error::{CliError, Result};
use crate::output::{
    bands_csv, profile_csv, to_json, FitSummary, FitsFile, Manifest, ManifestEntry, ResolvedModel,
};

/// Artifact file: (name within the output directory, body).
pub type FileBody = (String, String);

/// Run the plan and return every artifact body, manifest last, so callers
/// can write nothing at all when any part fails.
pub fn execute(plan: &Plan, seed: u64, jobs: Option<usize>) -> Result<Vec<FileBody>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot build thread pool: {e}")))?;
    pool.install(|| compute(plan, seed))
}

fn compute(plan: &Plan, seed: u64) -> Result<Vec<FileBody>> {
    let (entries, fits, mut files) = match plan {
        Plan::WeakHomogeneous {
            fixed,
            fixed_value,
            varying,
            n_atoms,
            kgrid,
        } => run_weak(*fixed, *fixed_value, varying, *n_atoms, *kgrid)?,
        Plan::WeakPerturbed {
            gap_plus,
            gap_minus,
            eps_list,
            norm_kind,
            n_atoms,
        } => run_perturbed(*gap_plus, *gap_minus, eps_list, *norm_kind, *n_atoms, seed)?,
        Plan::Strong {
            gap_plus,
            gap_minus_list,
            n_atoms,
        } => run_strong(*gap_plus, gap_minus_list, *n_atoms)?,
        Plan::Hessian {
            gap_plus,
            gap_minus,
            n_atoms,
            step,
            floor,
        } => run_hessian(*gap_plus, *gap_minus, *n_atoms, *step, *floor)?,
        Plan::Bands { model, kgrid } => run_bands(*model, *kgrid)?,
        Plan::Gaps { model, kgrid } => run_gaps(*model, *kgrid)?,
    };
    if !fits.is_empty() {
        files.push(("fits.json".into(), to_json(&FitsFile { entries: fits })?));
    }
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        kind: plan.kind().label(),
        seed,
        entries,
    };
    files.push(("manifest.json".into(), to_json(&manifest)?));
    Ok(files)
}

type FamilyOutput = (Vec<ManifestEntry>, Vec<FitSummary>, Vec<FileBody>);

/// Solved model pieces shared by manifest entries.
struct SolvedChain {
    params: ToyChainParams,
    model: TBModel,
    eps_f: f64,
}

fn solve_chain(gap_plus: f64, gap_minus: f64, kgrid: usize) -> Result<SolvedChain> {
    let params = solve_params_for_gaps(gap_plus, gap_minus)?;
    let model = toy_model(params, true)?;
    let base = MultiLattice::chain(1.0)?;
    let eps_f = band_structure(&model, &base, kgrid, 1)?.eps_f();
    Ok(SolvedChain {
        params,
        model,
        eps_f,
    })
}

fn base_entry(id: &str, solved: &SolvedChain) -> ManifestEntry {
    ManifestEntry {
        experiment_id: id.into(),
        gap_plus: None,
        gap_minus: None,
        epsilon: None,
        norm_kind: None,
        seed: None,
        n_atoms: None,
        kgrid: None,
        eps_f: Some(solved.eps_f),
        step: None,
        model: ResolvedModel::new(&solved.params, &solved.model),
        outputs: Vec::new(),
    }
}

fn run_weak(
    fixed: FixedGap,
    fixed_value: f64,
    varying: &[f64],
    n_atoms: usize,
    kgrid: usize,
) -> Result<FamilyOutput> {
    let per_gap = varying
        .par_iter()
        .map(|&v| {
            let mut outcomes = weak_locality_experiment(fixed, fixed_value, &[v], n_atoms, kgrid)?;
            let outcome = outcomes.pop().expect("one outcome per varying entry");
            let solved = solve_chain(outcome.gap_plus, outcome.gap_minus, kgrid)?;
            Ok((outcome, solved))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut entries = Vec::new();
    let mut fits = Vec::new();
    let mut files = Vec::new();
    for (i, (outcome, solved)) in per_gap.iter().enumerate() {
        let name = format!("profile_{i:02}.csv");
        files.push((name.clone(), profile_csv(&outcome.profile)?));
        fits.push(FitSummary::from_fit(&outcome.profile, &outcome.fit));
        let mut entry = base_entry(&outcome.profile.meta().experiment_id, solved);
        entry.gap_plus = Some(outcome.gap_plus);
        entry.gap_minus = Some(outcome.gap_minus);
        entry.n_atoms = Some(n_atoms);
        entry.kgrid = Some(kgrid);
        entry.outputs = vec![name];
        entries.push(entry);
    }
    Ok((entries, fits, files))
}

fn run_perturbed(
    gap_plus: f64,
    gap_minus: f64,
    eps_list: &[f64],
    norm_kind: NormKind,
    n_atoms: usize,
    seed: u64,
) -> Result<FamilyOutput> {
    let experiment =
        perturbed_locality_experiment(gap_minus, gap_plus, eps_list, norm_kind, n_atoms, seed)?;
    let solved = solve_chain(gap_plus, gap_minus, DEFAULT_KGRID)?;

    let mut entries = Vec::new();
    let mut fits = Vec::new();
    let mut files = Vec::new();

    files.push((
        "homogeneous.csv".into(),
        profile_csv(&experiment.homogeneous)?,
    ));
    let hom_fit = fit_exponential_rate(
        &experiment.homogeneous,
        tblab::locality::DEFAULT_FLOOR,
        None,
    )?;
    fits.push(FitSummary::from_fit(&experiment.homogeneous, &hom_fit));
    let mut reference = base_entry(&experiment.homogeneous.meta().experiment_id, &solved);
    reference.gap_plus = Some(gap_plus);
    reference.gap_minus = Some(gap_minus);
    reference.norm_kind = Some(norm_kind.label().into());
    reference.seed = Some(seed);
    reference.n_atoms = Some(n_atoms);
    reference.kgrid = Some(DEFAULT_KGRID);
    reference.outputs = vec!["homogeneous.csv".into()];
    entries.push(reference);

    for (i, outcome) in experiment.outcomes.iter().enumerate() {
        let perturbed_name = format!("perturbed_{i:02}.csv");
        let diff_name = format!("diff_{i:02}.csv");
        files.push((
            perturbed_name.clone(),
            profile_csv(&outcome.perturbed_profile)?,
        ));
        files.push((diff_name.clone(), profile_csv(&outcome.diff_profile)?));

        let perturbed_fit = fit_exponential_rate(
            &outcome.perturbed_profile,
            tblab::locality::DEFAULT_FLOOR,
            None,
        )?;
        fits.push(FitSummary::from_fit(
            &outcome.perturbed_profile,
            &perturbed_fit,
        ));
        let diff_fit =
            fit_exponential_rate(&outcome.diff_profile, tblab::locality::DEFAULT_FLOOR, None)?;
        let mut diff_summary = FitSummary::from_fit(&outcome.diff_profile, &diff_fit);
        diff_summary.crossover_radius = outcome.crossover_radius;
        fits.push(diff_summary);

        let mut entry = base_entry(&outcome.perturbed_profile.meta().experiment_id, &solved);
        entry.gap_plus = Some(gap_plus);
        entry.gap_minus = Some(gap_minus);
        entry.epsilon = Some(outcome.epsilon);
        entry.norm_kind = Some(norm_kind.label().into());
        entry.seed = Some(seed);
        entry.n_atoms = Some(n_atoms);
        entry.kgrid = Some(DEFAULT_KGRID);
        entry.outputs = vec![perturbed_name, diff_name];
        entries.push(entry);
    }
    Ok((entries, fits, files))
}

fn run_strong(gap_plus: f64, gap_minus_list: &[f64], n_atoms: usize) -> Result<FamilyOutput> {
    let per_gap = gap_minus_list
        .par_iter()
        .map(|&gm| {
            let mut outcomes = strong_locality_experiment(&[gm], gap_plus, n_atoms)?;
            let outcome = outcomes.pop().expect("one outcome per gap value");
            let solved = solve_chain(gap_plus, gm, DEFAULT_KGRID)?;
            Ok((outcome, solved))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut entries = Vec::new();
    let mut fits = Vec::new();
    let mut files = Vec::new();
    for (i, (outcome, solved)) in per_gap.iter().enumerate() {
        let name = format!("profile_{i:02}.csv");
        files.push((name.clone(), profile_csv(&outcome.profile)?));
        fits.push(FitSummary::from_fit(&outcome.profile, &outcome.fit));
        let mut entry = base_entry(&outcome.profile.meta().experiment_id, solved);
        entry.gap_plus = Some(outcome.gap_plus);
        entry.gap_minus = Some(outcome.gap_minus);
        entry.n_atoms = Some(n_atoms);
        entry.kgrid = Some(DEFAULT_KGRID);
        entry.outputs = vec![name];
        entries.push(entry);
    }
    Ok((entries, fits, files))
}

fn run_hessian(
    gap_plus: f64,
    gap_minus: f64,
    n_atoms: usize,
    step: f64,
    floor: f64,
) -> Result<FamilyOutput> {
    let solved = solve_chain(gap_plus, gap_minus, DEFAULT_KGRID)?;
    let lat = build_chain(n_atoms, 1.0)?;
    let probe = lat.site_nearest_center();
    let blocks = energy_hessian_fd(&solved.model, &lat, solved.eps_f, probe, step)?;
    let mut profile = hessian_profile(&lat, probe, &blocks)?;
    profile.set_meta(ProfileMeta {
        experiment_id: "hessian".into(),
        gap_plus: Some(gap_plus),
        gap_minus: Some(gap_minus),
        ..ProfileMeta::default()
    });
    let fit = fit_exponential_rate(&profile, floor, None)?;

    let name = "profile_00.csv".to_string();
    let files = vec![(name.clone(), profile_csv(&profile)?)];
    let fits = vec![FitSummary::from_fit(&profile, &fit)];
    let mut entry = base_entry("hessian", &solved);
    entry.gap_plus = Some(gap_plus);
    entry.gap_minus = Some(gap_minus);
    entry.n_atoms = Some(n_atoms);
    entry.kgrid = Some(DEFAULT_KGRID);
    entry.step = Some(step);
    entry.outputs = vec![name];
    Ok((vec![entry], fits, files))
}

fn resolve_params(model: ModelSpec) -> Result<(ToyChainParams, Option<(f64, f64)>)> {
    match model {
        ModelSpec::Targets {
            gap_plus,
            gap_minus,
        } => Ok((
            solve_params_for_gaps(gap_plus, gap_minus)?,
            Some((gap_plus, gap_minus)),
        )),
        ModelSpec::NnValues { c1, c2, f1, f2, f3 } => {
            Ok((ToyChainParams::with_nn_values(c1, c2, f1, f2, f3), None))
        }
    }
}

fn run_bands(model: ModelSpec, kgrid: usize) -> Result<FamilyOutput> {
    let (params, targets) = resolve_params(model)?;
    let tb = toy_model(params, true)?;
    let base = MultiLattice::chain(1.0)?;
    let bs = band_structure(&tb, &base, kgrid, 1)?;

    let name = "bands.csv".to_string();
    let files = vec![(name.clone(), bands_csv(&bs)?)];
    let solved = SolvedChain {
        params,
        model: tb,
        eps_f: bs.eps_f(),
    };
    let mut entry = base_entry("bands", &solved);
    entry.gap_plus = targets.map(|t| t.0);
    entry.gap_minus = targets.map(|t| t.1);
    entry.kgrid = Some(kgrid);
    entry.outputs = vec![name];
    Ok((vec![entry], Vec::new(), files))
}

/// Gap report serialized to `gaps.json`.
#[derive(Debug, Serialize)]
struct GapsJson {
    gap_minus: f64,
    gap_plus: f64,
    argmin_plus: Vec<f64>,
    arg_valence_max: Vec<f64>,
    arg_conduction_min: Vec<f64>,
    regime: &'static str,
}

impl From<&GapReport> for GapsJson {
    fn from(r: &GapReport) -> Self {
        GapsJson {
            gap_minus: r.gap_minus,
            gap_plus: r.gap_plus,
            argmin_plus: r.argmin_plus.clone(),
            arg_valence_max: r.arg_valence_max.clone(),
            arg_conduction_min: r.arg_conduction_min.clone(),
            regime: match r.regime {
                GapRegime::Interior => "interior",
                GapRegime::Edge => "edge",
            },
        }
    }
}

fn run_gaps(model: ModelSpec, kgrid: usize) -> Result<FamilyOutput> {
    let (params, targets) = resolve_params(model)?;
    let tb = toy_model(params, true)?;
    let base = MultiLattice::chain(1.0)?;
    let report = compute_gaps_refined(&tb, &base, kgrid, 1)?;

    let name = "gaps.json".to_string();
    let files = vec![(name.clone(), to_json(&GapsJson::from(&report))?)];
    let mut entry = ManifestEntry {
        experiment_id: "gaps".into(),
        gap_plus: targets.map(|t| t.0),
        gap_minus: targets.map(|t| t.1),
        epsilon: None,
        norm_kind: None,
        seed: None,
        n_atoms: None,
        kgrid: Some(kgrid),
        eps_f: None,
        step: None,
        model: ResolvedModel::new(&params, &tb),
        outputs: Vec::new(),
    };
    entry.outputs = vec![name];
    Ok((vec![entry], Vec::new(), files))
}
