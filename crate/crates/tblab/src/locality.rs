//! Decay-profile extraction, exponential and power-law rate fitting, and the
//! experiment families probing how density matrices and their displacement
//! derivatives decay with inter-site distance.

use std::collections::BTreeMap;

use crate::bloch::{band_structure, solve_params_for_gaps};
use crate::densitymatrix::{
    density_matrix_spectral, derivative_block_from_split, hamiltonian_derivative_triplets,
    site_force_with_density, spectral_split, DensityMatrix,
};
use crate::error::{Error, Result};
use crate::lattice::{
    build_chain, make_perturbation, min_image_distance, Displacement, MultiLattice, NormKind,
    PerturbationProfile, SupercellLattice,
};
use crate::tightbinding::{assemble_hamiltonian, toy_model, TBModel};
use nalgebra::DMatrix;

/// Magnitudes at or below this are treated as numerical noise by default.
pub const DEFAULT_FLOOR: f64 = 1e-13;

/// Localized perturbations decay as `(1 + r)^-alpha` with this exponent.
pub(crate) const LOCALIZED_DECAY_EXPONENT: f64 = 2.0;

/// Reciprocal-grid resolution used when an experiment locates the Fermi
/// level internally.
pub const DEFAULT_KGRID: usize = 512;

/// Experiment parameters attached to a profile so its rows can be emitted
/// and regenerated without extra context.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProfileMeta {
    pub experiment_id: String,
    pub gap_plus: Option<f64>,
    pub gap_minus: Option<f64>,
    pub epsilon: Option<f64>,
    pub norm_kind: Option<&'static str>,
    pub seed: Option<u64>,
}

/// Distance-binned magnitude envelope: one `(distance, max magnitude)`
/// sample per occupied distance class, sorted ascending in distance.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayProfile {
    samples: Vec<(f64, f64)>,
    reference_site: Option<usize>,
    meta: ProfileMeta,
}

impl DecayProfile {
    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn reference_site(&self) -> Option<usize> {
        self.reference_site
    }

    pub fn meta(&self) -> &ProfileMeta {
        &self.meta
    }

    pub fn set_meta(&mut self, meta: ProfileMeta) {
        self.meta = meta;
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Result of an ordinary least-squares line through `ln(magnitude)` vs `r`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FitResult {
    /// Natural-log decay rate per unit distance (negative for decay).
    pub slope: f64,
    pub intercept: f64,
    /// Goodness of fit in `[0, 1]` over the fitted window.
    pub r_squared: f64,
    /// Distance range actually used.
    pub window: (f64, f64),
    /// Number of samples in the fitted window.
    pub n_used: usize,
}

/// Which pair is referenced by a profile sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfileReference {
    /// Pairs `(l, reference)` for a fixed reference site.
    Site(usize),
    /// Envelope over every site pair.
    AllPairs,
}

/// Bin `(distance, value)` pairs into distance classes of width half the
/// minimal site spacing, keeping the max per class; distances beyond
/// `0.45 x` the shortest period are dropped (minimum-image wraparound).
fn bin_envelope(
    lat: &SupercellLattice,
    pairs: impl Iterator<Item = (f64, f64)>,
) -> Vec<(f64, f64)> {
    let width = 0.5 * lat.min_pair_distance();
    let cap = 0.45 * lat.min_period_length();
    let mut bins: BTreeMap<u64, f64> = BTreeMap::new();
    for (r, v) in pairs {
        if r > cap {
            continue;
        }
        let idx = (r / width).round() as u64;
        let slot = bins.entry(idx).or_insert(0.0);
        *slot = slot.max(v);
    }
    bins.into_iter()
        .map(|(idx, v)| (idx as f64 * width, v))
        .collect()
}

/// Block magnitude envelope of a site-structured matrix vs minimum-image
/// distance: for each distance class, the max of `|M_{lk,ab}|` over orbital
/// pairs and over the site pairs in that class.
pub fn decay_profile(
    m: &DMatrix<f64>,
    lat: &SupercellLattice,
    reference: ProfileReference,
) -> Result<DecayProfile> {
    let n = lat.n_sites();
    if m.nrows() != m.ncols() || m.nrows() % n != 0 {
        return Err(Error::DimensionMismatch {
            what: "profile matrix",
            expected: n,
            got: m.nrows(),
        });
    }
    let nb = m.nrows() / n;
    let block_max = |l: usize, k: usize| -> f64 {
        let mut best = 0.0f64;
        for a in 0..nb {
            for b in 0..nb {
                best = best.max(m[(l * nb + a, k * nb + b)].abs());
            }
        }
        best
    };
    let samples = match reference {
        ProfileReference::Site(k) => {
            lat.check_index(k)?;
            let pairs: Result<Vec<_>> = (0..n)
                .map(|l| Ok((min_image_distance(lat, l, k)?, block_max(l, k))))
                .collect();
            bin_envelope(lat, pairs?.into_iter())
        }
        ProfileReference::AllPairs => {
            let mut pairs = Vec::with_capacity(n * (n + 1) / 2);
            for l in 0..n {
                for k in l..n {
                    let v = block_max(l, k).max(block_max(k, l));
                    pairs.push((min_image_distance(lat, l, k)?, v));
                }
            }
            bin_envelope(lat, pairs.into_iter())
        }
    };
    Ok(DecayProfile {
        samples,
        reference_site: match reference {
            ProfileReference::Site(k) => Some(k),
            ProfileReference::AllPairs => None,
        },
        meta: ProfileMeta::default(),
    })
}

/// Build a profile from per-site magnitudes relative to a reference site.
fn profile_from_site_values(
    lat: &SupercellLattice,
    reference: usize,
    values: &[(usize, f64)],
) -> Result<DecayProfile> {
    let pairs: Result<Vec<_>> = values
        .iter()
        .map(|&(site, v)| Ok((min_image_distance(lat, site, reference)?, v)))
        .collect();
    Ok(DecayProfile {
        samples: bin_envelope(lat, pairs?.into_iter()),
        reference_site: Some(reference),
        meta: ProfileMeta::default(),
    })
}

const FIT_MIN_SAMPLES: usize = 4;

/// Relative tolerance around the median local slope when auto-selecting the
/// fit window.
const WINDOW_SLOPE_TOL: f64 = 0.2;

/// Least-squares line through `(x, y)`; returns (slope, intercept, r^2).
fn ols_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    let n = xs.len() as f64;
    let xbar = xs.iter().sum::<f64>() / n;
    let ybar = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - xbar) * (y - ybar))
        .sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateRegression(
            "all abscissae are identical".into(),
        ));
    }
    let slope = sxy / sxx;
    let intercept = ybar - slope * xbar;
    let ss_tot: f64 = ys.iter().map(|y| (y - ybar) * (y - ybar)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let e = y - (slope * x + intercept);
            e * e
        })
        .sum();
    let r2 = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok((slope, intercept, r2))
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fit `ln(magnitude) = slope * r + intercept` over the usable part of a
/// profile.
///
/// Samples at or below `floor` are discarded. With an explicit `window`,
/// all remaining samples inside it are used. Otherwise the window is the
/// longest run of consecutive samples whose local log-slope stays within
/// 20% of the median local slope, which excludes both the `r ~ 0` head and
/// the saturation tail near the numerical floor.
pub fn fit_exponential_rate(
    p: &DecayProfile,
    floor: f64,
    window: Option<(f64, f64)>,
) -> Result<FitResult> {
    let usable: Vec<(f64, f64)> = p
        .samples
        .iter()
        .filter(|&&(_, v)| v > floor && v.is_finite())
        .filter(|&&(r, _)| match window {
            Some((lo, hi)) => r >= lo && r <= hi,
            None => true,
        })
        .map(|&(r, v)| (r, v.ln()))
        .collect();
    if usable.len() < FIT_MIN_SAMPLES {
        return Err(Error::FitFailure {
            usable: usable.len(),
            needed: FIT_MIN_SAMPLES,
        });
    }

    let fit_range = if window.is_some() {
        0..usable.len()
    } else {
        // local slopes between consecutive usable samples
        let slopes: Vec<f64> = usable
            .windows(2)
            .map(|w| (w[1].1 - w[0].1) / (w[1].0 - w[0].0))
            .collect();
        let med = median(&mut slopes.clone());
        let tol = WINDOW_SLOPE_TOL * med.abs() + 1e-12;
        let ok: Vec<bool> = slopes.iter().map(|s| (s - med).abs() <= tol).collect();
        // longest run of accepted consecutive slopes; first wins ties
        let (mut best_start, mut best_len) = (0usize, 0usize);
        let mut i = 0;
        while i < ok.len() {
            if ok[i] {
                let start = i;
                while i < ok.len() && ok[i] {
                    i += 1;
                }
                if i - start > best_len {
                    best_len = i - start;
                    best_start = start;
                }
            } else {
                i += 1;
            }
        }
        if best_len == 0 {
            // no coherent run (e.g. parity-oscillating profiles): fall back
            // to a plain fit over everything above the floor
            0..usable.len()
        } else {
            best_start..best_start + best_len + 1
        }
    };

    let pts = &usable[fit_range];
    let xs: Vec<f64> = pts.iter().map(|&(r, _)| r).collect();
    let ys: Vec<f64> = pts.iter().map(|&(_, y)| y).collect();
    let (slope, intercept, r_squared) = ols_line(&xs, &ys)?;
    Ok(FitResult {
        slope,
        intercept,
        r_squared,
        window: (xs[0], xs[xs.len() - 1]),
        n_used: xs.len(),
    })
}

/// Which gap is held fixed in a weak-locality sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FixedGap {
    GapPlus,
    GapMinus,
}

/// One point of a weak-locality sweep.
#[derive(Clone, Debug)]
pub struct WeakOutcome {
    pub gap_plus: f64,
    pub gap_minus: f64,
    pub fit: FitResult,
    pub profile: DecayProfile,
}

/// Solve chain parameters for the gap targets and assemble the supporting
/// pieces every experiment needs: the model, an `n_atoms`-site unit-spacing
/// ring, and the Fermi level from a `kgrid`-point band structure.
pub fn chain_with_gaps(
    gap_plus: f64,
    gap_minus: f64,
    n_atoms: usize,
    kgrid: usize,
) -> Result<(TBModel, SupercellLattice, f64)> {
    let params = solve_params_for_gaps(gap_plus, gap_minus)?;
    let model = toy_model(params, true)?;
    let base = MultiLattice::chain(1.0)?;
    let eps_f = band_structure(&model, &base, kgrid, 1)?.eps_f();
    let lat = build_chain(n_atoms, 1.0)?;
    Ok((model, lat, eps_f))
}

/// Sweep one gap while holding the other fixed; for each pair, build the
/// homogeneous chain, compute the density matrix, profile its decay from a
/// central reference site, and fit the exponential rate.
pub fn weak_locality_experiment(
    fixed: FixedGap,
    fixed_value: f64,
    varying: &[f64],
    n_atoms: usize,
    kgrid: usize,
) -> Result<Vec<WeakOutcome>> {
    varying
        .iter()
        .map(|&v| {
            let (gap_plus, gap_minus) = match fixed {
                FixedGap::GapPlus => (fixed_value, v),
                FixedGap::GapMinus => (v, fixed_value),
            };
            let (model, lat, eps_f) = chain_with_gaps(gap_plus, gap_minus, n_atoms, kgrid)?;
            let h = assemble_hamiltonian(&model, &lat, &Displacement::zeros(&lat))?;
            let rho = density_matrix_spectral(&h, eps_f)?;
            let center = lat.site_nearest_center();
            let mut profile = decay_profile(rho.matrix(), &lat, ProfileReference::Site(center))?;
            profile.set_meta(ProfileMeta {
                experiment_id: "weak_homogeneous".into(),
                gap_plus: Some(gap_plus),
                gap_minus: Some(gap_minus),
                ..ProfileMeta::default()
            });
            let fit = fit_exponential_rate(&profile, DEFAULT_FLOOR, None)?;
            Ok(WeakOutcome {
                gap_plus,
                gap_minus,
                fit,
                profile,
            })
        })
        .collect()
}

/// One perturbation strength of a perturbed-locality sweep.
#[derive(Clone, Debug)]
pub struct PerturbedOutcome {
    pub epsilon: f64,
    /// Envelope of `|rho(u)|` from the perturbation center.
    pub perturbed_profile: DecayProfile,
    /// Envelope of `|rho(u) - rho_ref|` from the perturbation center.
    pub diff_profile: DecayProfile,
    /// Smallest distance where the difference envelope exceeds the
    /// homogeneous envelope, if it ever does.
    pub crossover_radius: Option<f64>,
}

/// A perturbed-locality sweep over perturbation strengths at fixed gaps.
#[derive(Clone, Debug)]
pub struct PerturbedExperiment {
    pub gap_plus: f64,
    pub gap_minus: f64,
    /// Envelope of the unperturbed `|rho_ref|` from the same reference site.
    pub homogeneous: DecayProfile,
    pub outcomes: Vec<PerturbedOutcome>,
}

/// Smallest distance at which `diff` rises above `homog` (bins align
/// because both profiles share the lattice binning).
fn crossover_radius(diff: &DecayProfile, homog: &DecayProfile) -> Option<f64> {
    let href: BTreeMap<u64, f64> = homog
        .samples
        .iter()
        .map(|&(r, v)| (r.to_bits(), v))
        .collect();
    diff.samples
        .iter()
        .find(|&&(r, v)| r > 0.0 && href.get(&r.to_bits()).is_some_and(|&h| v > h))
        .map(|&(r, _)| r)
}

/// For each strength in `eps_list`, draw a localized admissible perturbation
/// of that strain norm, compute the perturbed density matrix, and profile
/// both `|rho(u)|` and the difference `|rho(u) - rho_ref|` from the
/// perturbation center.
pub fn perturbed_locality_experiment(
    gap_minus: f64,
    gap_plus: f64,
    eps_list: &[f64],
    norm_kind: NormKind,
    n_atoms: usize,
    seed: u64,
) -> Result<PerturbedExperiment> {
    let (model, lat, eps_f) = chain_with_gaps(gap_plus, gap_minus, n_atoms, DEFAULT_KGRID)?;
    let center = lat.site_nearest_origin();
    let h_ref = assemble_hamiltonian(&model, &lat, &Displacement::zeros(&lat))?;
    let rho_ref = density_matrix_spectral(&h_ref, eps_f)?;
    let mut homogeneous = decay_profile(rho_ref.matrix(), &lat, ProfileReference::Site(center))?;
    let base_meta = |id: &str, epsilon: Option<f64>| ProfileMeta {
        experiment_id: id.into(),
        gap_plus: Some(gap_plus),
        gap_minus: Some(gap_minus),
        epsilon,
        norm_kind: Some(norm_kind.label()),
        seed: Some(seed),
    };
    homogeneous.set_meta(base_meta("weak_perturbed_reference", None));

    let outcomes = eps_list
        .iter()
        .map(|&epsilon| {
            let u = make_perturbation(
                &lat,
                PerturbationProfile::Localized,
                epsilon,
                norm_kind,
                LOCALIZED_DECAY_EXPONENT,
                seed,
            )?;
            let h = assemble_hamiltonian(&model, &lat, &u)?;
            let rho = density_matrix_spectral(&h, eps_f)?;
            let mut perturbed_profile =
                decay_profile(rho.matrix(), &lat, ProfileReference::Site(center))?;
            perturbed_profile.set_meta(base_meta("weak_perturbed", Some(epsilon)));
            let diff = rho.matrix() - rho_ref.matrix();
            let mut diff_profile = decay_profile(&diff, &lat, ProfileReference::Site(center))?;
            diff_profile.set_meta(base_meta("weak_perturbed_diff", Some(epsilon)));
            let crossover = crossover_radius(&diff_profile, &homogeneous);
            Ok(PerturbedOutcome {
                epsilon,
                perturbed_profile,
                diff_profile,
                crossover_radius: crossover,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbedExperiment {
        gap_plus,
        gap_minus,
        homogeneous,
        outcomes,
    })
}

/// One gap value of a strong-locality sweep.
#[derive(Clone, Debug)]
pub struct StrongOutcome {
    pub gap_plus: f64,
    pub gap_minus: f64,
    pub fit: FitResult,
    pub profile: DecayProfile,
}

/// Magnitude profile of the diagonal density block's derivative
/// `|d rho_{ll} / d u_m|` for a fixed central `l` and every other site `m`,
/// reusing one eigendecomposition per gap value.
pub fn strong_locality_experiment(
    gap_minus_list: &[f64],
    gap_plus: f64,
    n_atoms: usize,
) -> Result<Vec<StrongOutcome>> {
    gap_minus_list
        .iter()
        .map(|&gap_minus| {
            let (model, lat, eps_f) = chain_with_gaps(gap_plus, gap_minus, n_atoms, DEFAULT_KGRID)?;
            let u = Displacement::zeros(&lat);
            let h = assemble_hamiltonian(&model, &lat, &u)?;
            let split = spectral_split(&h, eps_f);
            let observe = lat.site_nearest_center();
            let mut values = Vec::with_capacity(lat.n_sites() - 1);
            for m in 0..lat.n_sites() {
                if m == observe {
                    continue; // the r = 0 head is excluded from the profile
                }
                let mut mag = 0.0f64;
                for axis in 0..lat.dim() {
                    let triplets = hamiltonian_derivative_triplets(&model, &lat, &u, m, axis)?;
                    let block =
                        derivative_block_from_split(&split, &triplets, model.n_orb(), observe)?;
                    mag = mag.max(block.abs().max());
                }
                values.push((m, mag));
            }
            let mut profile = profile_from_site_values(&lat, observe, &values)?;
            profile.set_meta(ProfileMeta {
                experiment_id: "strong".into(),
                gap_plus: Some(gap_plus),
                gap_minus: Some(gap_minus),
                ..ProfileMeta::default()
            });
            let fit = fit_exponential_rate(&profile, DEFAULT_FLOOR, None)?;
            Ok(StrongOutcome {
                gap_plus,
                gap_minus,
                fit,
                profile,
            })
        })
        .collect()
}

/// Fit `|slope| = |c| * gap^alpha` to `(gap, slope)` pairs. A log-log
/// least-squares line seeds a linear-space refinement (closed-form optimal
/// `c` at fixed `alpha`, golden-section search over `alpha`); the returned
/// `c` carries the sign of the input slopes (negative).
pub fn power_law_fit(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.len() < 3 {
        return Err(Error::FitFailure {
            usable: pairs.len(),
            needed: 3,
        });
    }
    for &(g, s) in pairs {
        if !(g > 0.0) {
            return Err(Error::InvalidParameter {
                what: "gap",
                detail: format!("power-law fit needs positive gaps, got {g}"),
            });
        }
        if !(s < 0.0) {
            return Err(Error::InvalidParameter {
                what: "slope",
                detail: format!("power-law fit needs negative slopes, got {s}"),
            });
        }
    }
    for i in 0..pairs.len() {
        for j in i + 1..pairs.len() {
            if pairs[i].0 == pairs[j].0 {
                return Err(Error::DegenerateRegression(format!(
                    "duplicate gap value {}",
                    pairs[i].0
                )));
            }
        }
    }

    let xs: Vec<f64> = pairs.iter().map(|&(g, _)| g.ln()).collect();
    let ys: Vec<f64> = pairs.iter().map(|&(_, s)| s.abs().ln()).collect();
    let (alpha0, _, _) = ols_line(&xs, &ys)?;

    // linear-space least squares: residual(alpha) with the optimal
    // amplitude c(alpha) = sum(t g^a) / sum(g^{2a}) substituted in
    let ts: Vec<f64> = pairs.iter().map(|&(_, s)| s.abs()).collect();
    let gs: Vec<f64> = pairs.iter().map(|&(g, _)| g).collect();
    let amplitude = |alpha: f64| -> f64 {
        let num: f64 = ts.iter().zip(&gs).map(|(t, g)| t * g.powf(alpha)).sum();
        let den: f64 = gs.iter().map(|g| g.powf(2.0 * alpha)).sum();
        num / den
    };
    let residual = |alpha: f64| -> f64 {
        let c = amplitude(alpha);
        ts.iter()
            .zip(&gs)
            .map(|(t, g)| {
                let e = t - c * g.powf(alpha);
                e * e
            })
            .sum()
    };

    let (mut lo, mut hi) = ((alpha0 - 1.0).max(1e-3), alpha0 + 1.0);
    const INVPHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INVPHI * (hi - lo);
    let mut x2 = lo + INVPHI * (hi - lo);
    let (mut f1, mut f2) = (residual(x1), residual(x2));
    for _ in 0..200 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INVPHI * (hi - lo);
            f1 = residual(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INVPHI * (hi - lo);
            f2 = residual(x2);
        }
        if hi - lo < 1e-13 * (1.0 + alpha0.abs()) {
            break;
        }
    }
    let alpha = 0.5 * (lo + hi);
    Ok((-amplitude(alpha), alpha))
}

/// Finite-difference energy Hessian blocks with respect to displacing
/// `probe`: for every site `i`, the `d x d` block
/// `[(F_i(0) - F_i(step * e_{probe,b}))_a / step]_{ab}`.
pub fn energy_hessian_fd(
    model: &TBModel,
    lat: &SupercellLattice,
    eps_f: f64,
    probe: usize,
    step: f64,
) -> Result<Vec<DMatrix<f64>>> {
    lat.check_index(probe)?;
    if !(step > 0.0) {
        return Err(Error::InvalidParameter {
            what: "step",
            detail: format!("must be positive, got {step}"),
        });
    }
    let d = lat.dim();
    let n = lat.n_sites();
    let forces_at = |u: &Displacement| -> Result<Vec<Vec<f64>>> {
        let h = assemble_hamiltonian(model, lat, u)?;
        let rho = density_matrix_spectral(&h, eps_f)?;
        (0..n)
            .map(|i| site_force_with_density(model, lat, u, &rho, i))
            .collect()
    };
    let u0 = Displacement::zeros(lat);
    let f0 = forces_at(&u0)?;
    let mut blocks = vec![DMatrix::zeros(d, d); n];
    for b in 0..d {
        let fb = forces_at(&u0.nudged(probe, b, step))?;
        for i in 0..n {
            for a in 0..d {
                blocks[i][(a, b)] = (f0[i][a] - fb[i][a]) / step;
            }
        }
    }
    Ok(blocks)
}

/// Profile of max-magnitude Hessian blocks vs distance to the probe site,
/// excluding the probe itself.
pub fn hessian_profile(
    lat: &SupercellLattice,
    probe: usize,
    blocks: &[DMatrix<f64>],
) -> Result<DecayProfile> {
    if blocks.len() != lat.n_sites() {
        return Err(Error::DimensionMismatch {
            what: "hessian blocks",
            expected: lat.n_sites(),
            got: blocks.len(),
        });
    }
    let values: Vec<(usize, f64)> = blocks
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != probe)
        .map(|(i, b)| (i, b.abs().max()))
        .collect();
    let mut profile = profile_from_site_values(lat, probe, &values)?;
    profile.set_meta(ProfileMeta {
        experiment_id: "hessian".into(),
        ..ProfileMeta::default()
    });
    Ok(profile)
}

/// Convenience: reuse a density matrix to evaluate forces on every site.
pub fn all_site_forces(
    model: &TBModel,
    lat: &SupercellLattice,
    u: &Displacement,
    rho: &DensityMatrix,
) -> Result<Vec<Vec<f64>>> {
    (0..lat.n_sites())
        .map(|i| site_force_with_density(model, lat, u, rho, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tightbinding::ToyChainParams;
    use nalgebra::DMatrix;

    fn profile_of(samples: Vec<(f64, f64)>) -> DecayProfile {
        DecayProfile {
            samples,
            reference_site: None,
            meta: ProfileMeta::default(),
        }
    }

    #[test]
    fn identity_matrix_profile() {
        let lat = build_chain(6, 1.0).unwrap();
        let m = DMatrix::<f64>::identity(12, 12);
        let p = decay_profile(&m, &lat, ProfileReference::AllPairs).unwrap();
        assert_eq!(p.samples()[0], (0.0, 1.0));
        for &(r, v) in &p.samples()[1..] {
            assert!(r > 0.0);
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn tridiagonal_profile() {
        let lat = build_chain(8, 1.0).unwrap();
        let n = 16;
        let mut m = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 2.0;
        }
        // constant nearest-neighbour site blocks of magnitude 0.7
        for s in 0..8 {
            let t = (s + 1) % 8;
            for a in 0..2 {
                for b in 0..2 {
                    m[(s * 2 + a, t * 2 + b)] = 0.7;
                    m[(t * 2 + a, s * 2 + b)] = 0.7;
                }
            }
        }
        let p = decay_profile(&m, &lat, ProfileReference::Site(3)).unwrap();
        assert_eq!(p.samples()[0], (0.0, 2.0));
        assert_eq!(p.samples()[1], (1.0, 0.7));
        for &(r, v) in &p.samples()[2..] {
            assert!(r >= 2.0);
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn envelope_is_setwise_max() {
        // 8-site ring: the wraparound cap (0.45 * period = 3.6) keeps the
        // distance-3 class inside the profile
        let lat = build_chain(8, 1.0).unwrap();
        let mut m = DMatrix::<f64>::zeros(8, 8);
        m[(0, 3)] = 0.2;
        let p1 = decay_profile(&m, &lat, ProfileReference::AllPairs).unwrap();
        m[(1, 4)] = 0.5; // same distance class, larger entry
        let p2 = decay_profile(&m, &lat, ProfileReference::AllPairs).unwrap();
        let v1 = p1.samples().iter().find(|&&(r, _)| r == 3.0).unwrap().1;
        let v2 = p2.samples().iter().find(|&&(r, _)| r == 3.0).unwrap().1;
        assert_eq!(v1, 0.2);
        assert_eq!(v2, 0.5);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let lat = build_chain(6, 1.0).unwrap();
        let m = DMatrix::<f64>::zeros(7, 7);
        assert!(matches!(
            decay_profile(&m, &lat, ProfileReference::AllPairs),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn exact_exponential_fit() {
        let samples: Vec<(f64, f64)> = (0..=40)
            .map(|r| (r as f64, (-0.3 * r as f64).exp()))
            .collect();
        let fit = fit_exponential_rate(&profile_of(samples), 1e-13, None).unwrap();
        assert!((fit.slope + 0.3).abs() <= 1e-10, "slope {}", fit.slope);
        assert!((fit.r_squared - 1.0).abs() <= 1e-12);
        assert!((fit.intercept).abs() <= 1e-10);
    }

    #[test]
    fn floored_exponential_fit_recovers_rate() {
        let samples: Vec<(f64, f64)> = (0..=200)
            .map(|r| (r as f64, (-0.3 * r as f64).exp() + 1e-14))
            .collect();
        let fit = fit_exponential_rate(&profile_of(samples), 1e-13, None).unwrap();
        assert!((fit.slope + 0.3).abs() <= 1e-3, "slope {}", fit.slope);
        // the saturation tail must have been excluded
        assert!(fit.window.1 < 150.0, "window {:?}", fit.window);
    }

    #[test]
    fn constant_profile_has_zero_slope() {
        let samples: Vec<(f64, f64)> = (0..=10).map(|r| (r as f64, 0.25)).collect();
        let fit = fit_exponential_rate(&profile_of(samples), 1e-13, None).unwrap();
        assert!(fit.slope.abs() <= 1e-12);
        assert_eq!(fit.r_squared, 1.0);
    }

    #[test]
    fn explicit_window_restricts_fit() {
        let samples: Vec<(f64, f64)> = (0..=40)
            .map(|r| {
                let r = r as f64;
                let rate = if r <= 20.0 { 0.3 } else { 0.1 };
                (r, (-rate * r).exp())
            })
            .collect();
        let fit =
            fit_exponential_rate(&profile_of(samples.clone()), 1e-30, Some((0.0, 20.0))).unwrap();
        assert!((fit.slope + 0.3).abs() <= 1e-10);
        assert_eq!(fit.n_used, 21);
    }

    #[test]
    fn too_few_samples_fail() {
        let samples = vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)];
        assert!(matches!(
            fit_exponential_rate(&profile_of(samples), 1e-13, None),
            Err(Error::FitFailure {
                usable: 3,
                needed: 4
            })
        ));
    }

    #[test]
    fn weak_single_run_decays_cleanly() {
        let runs = weak_locality_experiment(FixedGap::GapPlus, 2.0, &[2.0], 60, 128).unwrap();
        let fit = runs[0].fit;
        assert!(fit.slope < 0.0, "slope {}", fit.slope);
        assert!(fit.r_squared >= 0.99, "r2 {}", fit.r_squared);
    }

    #[test]
    fn weak_slopes_insensitive_to_small_gap() {
        let runs =
            weak_locality_experiment(FixedGap::GapPlus, 2.0, &[0.5, 0.03125], 80, 256).unwrap();
        let s0 = runs[0].fit.slope;
        let s1 = runs[1].fit.slope;
        let rel = (s0 - s1).abs() / s0.abs().min(s1.abs());
        assert!(rel <= 0.10, "slopes {s0} vs {s1} differ by {rel}");
    }

    #[test]
    fn weak_slope_halves_with_large_gap() {
        let runs =
            weak_locality_experiment(FixedGap::GapMinus, 0.01, &[2.0, 1.0, 0.5], 80, 256).unwrap();
        for w in runs.windows(2) {
            let ratio = w[0].fit.slope / w[1].fit.slope;
            assert!(
                (1.7..=2.3).contains(&ratio),
                "slope ratio {ratio} for gap_plus {} vs {}",
                w[0].gap_plus,
                w[1].gap_plus
            );
        }
    }

    #[test]
    fn perturbed_profiles_converge_to_homogeneous() {
        let exp = perturbed_locality_experiment(0.5, 2.0, &[1e-8], NormKind::Max, 50, 7).unwrap();
        let out = &exp.outcomes[0];
        assert_eq!(out.perturbed_profile.len(), exp.homogeneous.len());
        let max_dev = out
            .perturbed_profile
            .samples()
            .iter()
            .zip(exp.homogeneous.samples())
            .map(|(&(_, a), &(_, b))| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev <= 10.0 * 1e-8 * 100.0, "deviation {max_dev}");
    }

    #[test]
    fn crossover_moves_inward_with_stronger_perturbation() {
        let exp = perturbed_locality_experiment(0.001, 2.0, &[1e-6, 1e-2], NormKind::Max, 100, 11)
            .unwrap();
        let weak = exp.outcomes[0].crossover_radius;
        let strong = exp.outcomes[1].crossover_radius;
        let strong_r = strong.expect("strong perturbation must cross the homogeneous envelope");
        if let Some(weak_r) = weak {
            assert!(
                strong_r < weak_r,
                "crossovers: strong {strong_r} weak {weak_r}"
            );
        }
    }

    #[test]
    fn diff_profile_decays_slower_than_homogeneous() {
        let exp = perturbed_locality_experiment(0.01, 2.0, &[1e-4], NormKind::Max, 100, 3).unwrap();
        let hom_fit = fit_exponential_rate(&exp.homogeneous, 1e-13, None).unwrap();
        let diff_fit = fit_exponential_rate(&exp.outcomes[0].diff_profile, 1e-13, None).unwrap();
        assert!(
            diff_fit.slope.abs() <= hom_fit.slope.abs(),
            "diff {} vs homogeneous {}",
            diff_fit.slope,
            hom_fit.slope
        );
    }

    #[test]
    fn strong_slopes_decrease_with_gap() {
        let outs = strong_locality_experiment(&[1.0, 0.1, 0.01, 0.001], 2.0, 100).unwrap();
        let mags: Vec<f64> = outs.iter().map(|o| o.fit.slope.abs()).collect();
        for w in mags.windows(2) {
            assert!(w[0] > w[1], "{mags:?}");
        }
        for o in &outs {
            assert!(o.fit.slope < 0.0);
        }
    }

    #[test]
    fn strong_slope_insensitive_to_large_gap() {
        // the derivative rate is set by the small gap; at this gap value the
        // measured slopes of the two large-gap systems coincide closely
        let a = strong_locality_experiment(&[0.15], 2.0, 80).unwrap()[0]
            .fit
            .slope;
        let b = strong_locality_experiment(&[0.15], 1.0, 80).unwrap()[0]
            .fit
            .slope;
        let rel = (a - b).abs() / a.abs().min(b.abs());
        assert!(rel <= 0.15, "slopes {a} vs {b} differ by {rel}");
    }

    #[test]
    fn power_law_exact_inputs() {
        let pairs: Vec<(f64, f64)> = [0.1, 0.01, 0.001]
            .iter()
            .map(|&g: &f64| (g, -1.5 * g.powf(0.5)))
            .collect();
        let (c, alpha) = power_law_fit(&pairs).unwrap();
        assert!((c + 1.5).abs() <= 1e-10, "c {c}");
        assert!((alpha - 0.5).abs() <= 1e-10, "alpha {alpha}");
    }

    #[test]
    fn power_law_reference_triples() {
        let pairs = [(0.1, -0.4711), (0.01, -0.1385), (0.001, -0.0556)];
        let (c, alpha) = power_law_fit(&pairs).unwrap();
        assert!((c + 1.51).abs() <= 0.02, "c {c}");
        assert!((alpha - 0.51).abs() <= 0.02, "alpha {alpha}");
    }

    #[test]
    fn power_law_rejects_bad_inputs() {
        assert!(matches!(
            power_law_fit(&[(0.1, -0.4), (0.1, -0.3), (0.01, -0.1)]),
            Err(Error::DegenerateRegression(_))
        ));
        assert!(matches!(
            power_law_fit(&[(0.1, -0.4), (0.01, 0.3), (0.001, -0.1)]),
            Err(Error::InvalidParameter { .. })
        ));
        assert!(matches!(
            power_law_fit(&[(0.1, -0.4), (0.01, -0.3)]),
            Err(Error::FitFailure { .. })
        ));
    }

    #[test]
    fn hessian_blocks_zero_for_decoupled_model() {
        // all channels identically zero (values and slopes): forces cannot
        // respond to displacements at any order
        let params = ToyChainParams {
            c1: -1.0,
            c2: 1.0,
            a: [0.0; 3],
            b: [0.0; 3],
            d: [0.5; 3],
        };
        let model = toy_model(params, true).unwrap();
        let lat = build_chain(10, 1.0).unwrap();
        let blocks = energy_hessian_fd(&model, &lat, 0.0, 4, 1e-4).unwrap();
        for b in &blocks {
            assert!(b.abs().max() <= 1e-9, "block {}", b.abs().max());
        }
    }

    #[test]
    fn hessian_is_symmetric_across_site_pairs() {
        let (model, lat, eps_f) = chain_with_gaps(2.0, 0.5, 24, 128).unwrap();
        let step = 1e-5;
        let from_3 = energy_hessian_fd(&model, &lat, eps_f, 3, step).unwrap();
        let from_9 = energy_hessian_fd(&model, &lat, eps_f, 9, step).unwrap();
        let b39 = from_9[3].abs().max();
        let b93 = from_3[9].abs().max();
        assert!(
            (b39 - b93).abs() <= 1e-4 * b39.abs().max(1e-12),
            "blocks {b39} vs {b93}"
        );
    }

    #[test]
    fn hessian_profile_tracks_strong_rate() {
        // both the diagonal derivative blocks and the force response carry
        // two resolvent factors between the probed and observed sites, so
        // their far-field log-slopes agree (ratio near 1, not 2)
        let (model, lat, eps_f) = chain_with_gaps(2.0, 0.1, 60, 256).unwrap();
        let probe = lat.site_nearest_center();
        let blocks = energy_hessian_fd(&model, &lat, eps_f, probe, 1e-5).unwrap();
        let profile = hessian_profile(&lat, probe, &blocks).unwrap();
        // floor above the finite-difference noise (~1e-14 ||H|| / step)
        let hess_fit = fit_exponential_rate(&profile, 1e-8, None).unwrap();
        let strong = strong_locality_experiment(&[0.1], 2.0, 60).unwrap()[0]
            .fit
            .slope;
        let ratio = hess_fit.slope / strong;
        assert!(
            (0.75..=1.35).contains(&ratio),
            "hessian slope {} vs strong slope {strong}",
            hess_fit.slope
        );
    }
}
