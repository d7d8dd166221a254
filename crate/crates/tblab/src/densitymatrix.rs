//! Zero-temperature density matrices by spectral projection and resolvent
//! contour quadrature, resolvent decay probes, and derivatives of the
//! density matrix with respect to atomic displacements.

use crate::error::{Error, Result};
use crate::lattice::{Displacement, SupercellLattice};
use crate::locality::{decay_profile, DecayProfile, ProfileReference};
use crate::tightbinding::{assemble_hamiltonian, Hamiltonian, TBModel};
use nalgebra::{Complex, DMatrix, DVector};

/// Eigenvalues within this distance of the Fermi level make the projector
/// ill-defined.
const FERMI_TOL: f64 = 1e-8;

/// Quadrature node cap for the adaptive contour integration.
const MAX_CONTOUR_NODES: usize = 1 << 14;

/// Successive quadrature iterates must agree to this Frobenius norm.
const CONTOUR_CONVERGENCE: f64 = 1e-10;

/// Zero-temperature density matrix: the spectral projector onto eigenstates
/// below the Fermi level.
#[derive(Clone, Debug)]
pub struct DensityMatrix {
    matrix: DMatrix<f64>,
    eps_f: f64,
    n_occupied: usize,
}

impl DensityMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn eps_f(&self) -> f64 {
        self.eps_f
    }

    pub fn n_occupied(&self) -> usize {
        self.n_occupied
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }
}

/// Eigendecomposition sorted ascending and split at the Fermi level.
#[derive(Clone, Debug)]
pub struct SpectralSplit {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
    pub n_occ: usize,
}

/// Full symmetric eigendecomposition with ascending eigenvalues.
pub(crate) fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let n = order.len();
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Diagonalize and split at `eps_f` (no proximity tolerance; callers that
/// need a safely open gap check separately).
pub fn spectral_split(h: &Hamiltonian, eps_f: f64) -> SpectralSplit {
    let (values, vectors) = sorted_symmetric_eigen(h.matrix());
    let n_occ = values.iter().filter(|&&e| e < eps_f).count();
    SpectralSplit {
        values,
        vectors,
        n_occ,
    }
}

/// Density matrix from a full symmetric eigendecomposition:
/// `rho = V 1_{eps < eps_f} V^T`, symmetrized to be exactly symmetric.
pub fn density_matrix_spectral(h: &Hamiltonian, eps_f: f64) -> Result<DensityMatrix> {
    let split = spectral_split(h, eps_f);
    let dist = split
        .values
        .iter()
        .map(|e| (e - eps_f).abs())
        .fold(f64::INFINITY, f64::min);
    if dist < FERMI_TOL {
        return Err(Error::FermiLevelInSpectrum {
            eps_f,
            dist,
            tol: FERMI_TOL,
        });
    }
    let vocc = split.vectors.columns(0, split.n_occ);
    let raw = &vocc * vocc.transpose();
    let matrix = (&raw + raw.transpose()) * 0.5;
    Ok(DensityMatrix {
        matrix,
        eps_f,
        n_occupied: split.n_occ,
    })
}

/// Circular integration contour in the complex energy plane.
#[derive(Clone, Copy, Debug)]
pub struct Contour {
    pub center: Complex<f64>,
    pub radius: f64,
    /// Initial quadrature node count; the integrator doubles from here.
    pub n_points: usize,
}

impl Contour {
    pub fn new(center: Complex<f64>, radius: f64, n_points: usize) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::InvalidContour(format!(
                "radius must be positive, got {radius}"
            )));
        }
        Ok(Self {
            center,
            radius,
            n_points: n_points.max(4),
        })
    }

    /// Circle around the occupied spectrum of `h`: centered between the
    /// lowest eigenvalue and `eps_f`, with the radius extended by `margin`
    /// beyond the midpoint so the contour clears both spectral edges.
    pub fn enclosing(h: &Hamiltonian, eps_f: f64, margin: f64) -> Result<Self> {
        if !(margin > 0.0) {
            return Err(Error::InvalidContour(format!(
                "margin must be positive, got {margin}"
            )));
        }
        let (values, _) = sorted_symmetric_eigen(h.matrix());
        let sigma_min = values[0];
        if !(eps_f > sigma_min) {
            return Err(Error::InvalidContour(format!(
                "Fermi level {eps_f} is not above the spectral minimum {sigma_min}"
            )));
        }
        Self::new(
            Complex::new(0.5 * (sigma_min + eps_f), 0.0),
            0.5 * (eps_f - sigma_min) + margin,
            16,
        )
    }
}

/// Validate a contour against the spectrum: no eigenvalue may sit on the
/// circle, and the enclosed set must be a nonempty proper lower portion of
/// the spectrum. Returns (occupied count, implied Fermi level).
fn validate_contour(contour: &Contour, values: &DVector<f64>) -> Result<(usize, f64)> {
    let inside = |e: f64| (Complex::new(e, 0.0) - contour.center).norm() < contour.radius;
    for &e in values.iter() {
        let edge_dist = ((Complex::new(e, 0.0) - contour.center).norm() - contour.radius).abs();
        if edge_dist < FERMI_TOL {
            return Err(Error::InvalidContour(format!(
                "eigenvalue {e} lies within {edge_dist:.2e} of the contour circle"
            )));
        }
    }
    // values are sorted: enclosed states must be exactly a prefix
    let n_in = values.iter().filter(|&&e| inside(e)).count();
    if n_in == 0 {
        return Err(Error::InvalidContour(
            "contour encloses no eigenvalues".into(),
        ));
    }
    if n_in == values.len() {
        return Err(Error::InvalidContour(
            "contour encloses the entire spectrum".into(),
        ));
    }
    if !(0..n_in).all(|i| inside(values[i])) {
        return Err(Error::InvalidContour(
            "enclosed eigenvalues are not a lower spectral interval".into(),
        ));
    }
    Ok((n_in, 0.5 * (values[n_in - 1] + values[n_in])))
}

/// Add resolvent samples `(z_k - H)^{-1} e^{i theta_k}` for
/// `theta_k = 2 pi k / denom`, `k = start, start+step, ...`, into `sum`.
///
/// For a real center and real `H` the circle is conjugate-symmetric: the
/// node at `-theta` contributes exactly the conjugate of the node at
/// `theta`, so only the upper half is solved and the lower half is added as
/// the conjugate (complex arithmetic conjugate-commutes bit for bit).
fn add_contour_nodes(
    sum: &mut DMatrix<Complex<f64>>,
    hc: &DMatrix<Complex<f64>>,
    contour: &Contour,
    denom: usize,
    start: usize,
    step: usize,
) -> Result<()> {
    let dim = hc.nrows();
    let fold = contour.center.im == 0.0;
    let mut k = start;
    while k < denom {
        let partner = (denom - k) % denom;
        if fold && partner < k {
            k += step;
            continue; // already added as the conjugate of its partner
        }
        let theta = 2.0 * std::f64::consts::PI * k as f64 / denom as f64;
        let phase = Complex::new(theta.cos(), theta.sin());
        let z = contour.center + phase * contour.radius;
        let mut a = -hc.clone();
        for i in 0..dim {
            a[(i, i)] += z;
        }
        let resolvent = a.lu().try_inverse().ok_or_else(|| {
            Error::InvalidContour(format!("resolvent is singular at node angle {theta}"))
        })?;
        let term = resolvent * phase;
        if fold && partner != k {
            *sum += term.map(|v| v.conj());
        }
        *sum += term;
        k += step;
    }
    Ok(())
}

/// Density matrix by trapezoidal quadrature of the resolvent around the
/// contour, doubling the node count until successive iterates agree.
///
/// Node doubling reuses all previously evaluated resolvents (the uniform
/// grid refines into itself). The converged iterate must have a negligible
/// imaginary part; its real part is symmetrized and returned.
pub fn density_matrix_contour(h: &Hamiltonian, contour: &Contour) -> Result<DensityMatrix> {
    let (values, _) = sorted_symmetric_eigen(h.matrix());
    let (n_occupied, eps_f) = validate_contour(contour, &values)?;

    let dim = h.dim();
    let hc = h.matrix().map(Complex::from);
    let mut n = contour.n_points.max(4).next_power_of_two();
    let mut sum = DMatrix::<Complex<f64>>::zeros(dim, dim);
    add_contour_nodes(&mut sum, &hc, contour, n, 0, 1)?;
    let mut prev = &sum * Complex::from(contour.radius / n as f64);

    loop {
        add_contour_nodes(&mut sum, &hc, contour, 2 * n, 1, 2)?;
        n *= 2;
        let rho = &sum * Complex::from(contour.radius / n as f64);
        let residual = (&rho - &prev).norm();
        if residual < CONTOUR_CONVERGENCE {
            let imag_norm = rho.map(|z| z.im).norm();
            if imag_norm > 1e-10 {
                return Err(Error::QuadratureFailure {
                    nodes: n,
                    residual: imag_norm,
                });
            }
            let real = rho.map(|z| z.re);
            let matrix = (&real + real.transpose()) * 0.5;
            return Ok(DensityMatrix {
                matrix,
                eps_f,
                n_occupied,
            });
        }
        if n >= MAX_CONTOUR_NODES {
            return Err(Error::QuadratureFailure { nodes: n, residual });
        }
        prev = rho;
    }
}

/// Distance-binned envelope of resolvent magnitudes `|(z - H)^{-1}|` over
/// all site pairs.
pub fn resolvent_decay_profile(
    h: &Hamiltonian,
    lat: &SupercellLattice,
    z: Complex<f64>,
) -> Result<DecayProfile> {
    let (values, _) = sorted_symmetric_eigen(h.matrix());
    let dist = values
        .iter()
        .map(|&e| (Complex::new(e, 0.0) - z).norm())
        .fold(f64::INFINITY, f64::min);
    if dist < FERMI_TOL {
        return Err(Error::ResolventPoleTooClose {
            dist,
            tol: FERMI_TOL,
        });
    }
    let dim = h.dim();
    let mut a = h.matrix().map(|x| -Complex::from(x));
    for i in 0..dim {
        a[(i, i)] += z;
    }
    let resolvent = a
        .lu()
        .try_inverse()
        .ok_or_else(|| Error::InvalidContour("resolvent is singular".into()))?;
    let magnitudes = resolvent.map(|v| v.norm());
    decay_profile(&magnitudes, lat, ProfileReference::AllPairs)
}

/// Sparse entries of `dH/d[u(site)_axis]` as `(row, col, value)` triplets.
///
/// Only blocks whose bond touches `site` appear. Diagonal environment
/// contributions are symmetrized exactly as in assembly.
pub fn hamiltonian_derivative_triplets(
    model: &TBModel,
    lat: &SupercellLattice,
    u: &Displacement,
    site: usize,
    axis: usize,
) -> Result<Vec<(usize, usize, f64)>> {
    if site >= lat.n_sites() {
        return Err(Error::IndexOutOfRange {
            index: site,
            len: lat.n_sites(),
        });
    }
    if axis >= lat.dim() {
        return Err(Error::IndexOutOfRange {
            index: axis,
            len: lat.dim(),
        });
    }
    let nb = model.n_orb();
    let d = lat.dim();
    let zk = lat.species_of(site);
    let mut triplets = Vec::new();
    let mut push_block = |row: usize, col: usize, block: &DMatrix<f64>| {
        for a in 0..nb {
            for b in 0..nb {
                let v = block[(a, b)];
                if v != 0.0 {
                    triplets.push((row * nb + a, col * nb + b, v));
                }
            }
        }
    };

    let mut du = vec![0.0; d];
    for m in 0..lat.n_sites() {
        if m == site {
            continue;
        }
        let zm = lat.species_of(m);
        // bond images from `site` to `m` (the vector x_{m,site})
        let base = lat.min_image_offset(m, site);
        for (a, (um, uk)) in u.get(m).iter().zip(u.get(site)).enumerate() {
            du[a] = um - uk;
        }
        let mut dh_hop = DMatrix::zeros(nb, nb);
        let mut denv_m = DMatrix::zeros(nb, nb); // d/du_site of env on (m, m)
        let mut denv_k = DMatrix::zeros(nb, nb); // d/du_site of env on (site, site)
        crate::tightbinding::for_each_image(lat, &base, &du, model.cutoff(), false, |bond| {
            // x_{m,site} moves by -e_axis under u(site)
            dh_hop -= &model.hopping_gradient(bond, zm, zk)[axis];
            denv_m -= &model.env_gradient(bond, zm, zk)[axis];
            // the reversed bond x_{site,m} moves by +e_axis
            let rev: Vec<f64> = bond.iter().map(|x| -x).collect();
            denv_k += &model.env_gradient(&rev, zk, zm)[axis];
        });
        if dh_hop.iter().any(|&x| x != 0.0) {
            push_block(m, site, &dh_hop);
            push_block(site, m, &dh_hop.transpose());
        }
        let denv_m = (&denv_m + denv_m.transpose()) * 0.5;
        if denv_m.iter().any(|&x| x != 0.0) {
            push_block(m, m, &denv_m);
        }
        let denv_k = (&denv_k + denv_k.transpose()) * 0.5;
        if denv_k.iter().any(|&x| x != 0.0) {
            push_block(site, site, &denv_k);
        }
    }
    Ok(triplets)
}

/// Occupied/unoccupied pairs closer than this make the first-order
/// perturbation formula ill-conditioned.
const DEGENERACY_TOL: f64 = 1e-12;

/// Site-diagonal block of the density-matrix derivative, computed from a
/// prepared eigendecomposition and sparse `dH` triplets:
/// `drho = sum_{i occ, j unocc} (v_i' dH v_j) / (eps_i - eps_j)
/// (v_i v_j' + v_j v_i')`, restricted to block `(observe, observe)`.
pub(crate) fn derivative_block_from_split(
    split: &SpectralSplit,
    triplets: &[(usize, usize, f64)],
    n_orb: usize,
    observe: usize,
) -> Result<DMatrix<f64>> {
    let n = split.values.len();
    let n_occ = split.n_occ;
    let n_un = n - n_occ;
    if n_occ == 0 || n_un == 0 {
        return Ok(DMatrix::zeros(n_orb, n_orb));
    }
    let min_gap = split.values[n_occ] - split.values[n_occ - 1];
    if min_gap.abs() < DEGENERACY_TOL {
        return Err(Error::IllConditionedDerivative { denom: min_gap });
    }
    let vocc = split.vectors.columns(0, n_occ);
    let vun = split.vectors.columns(n_occ, n_un);

    // K_{ij} = (v_i' dH v_j) / (eps_i - eps_j), accumulated sparsely
    let mut k = DMatrix::zeros(n_occ, n_un);
    for &(r, c, v) in triplets {
        for i in 0..n_occ {
            let a = v * vocc[(r, i)];
            if a != 0.0 {
                for j in 0..n_un {
                    k[(i, j)] += a * vun[(c, j)];
                }
            }
        }
    }
    for i in 0..n_occ {
        for j in 0..n_un {
            k[(i, j)] /= split.values[i] - split.values[n_occ + j];
        }
    }

    let p = vocc.rows(observe * n_orb, n_orb);
    let q = vun.rows(observe * n_orb, n_orb);
    let b = p * &k * q.transpose();
    Ok(&b + b.transpose())
}

/// Analytic derivative `d rho_{ll} / d[u(k)_axis]` of the diagonal density
/// block at `observe` with respect to displacing `probe` along `axis`,
/// evaluated in the eigenbasis of `H(u)`.
pub fn density_derivative_analytic(
    model: &TBModel,
    lat: &SupercellLattice,
    u: &Displacement,
    eps_f: f64,
    probe: usize,
    axis: usize,
    observe: usize,
) -> Result<DMatrix<f64>> {
    if observe >= lat.n_sites() {
        return Err(Error::IndexOutOfRange {
            index: observe,
            len: lat.n_sites(),
        });
    }
    let h = assemble_hamiltonian(model, lat, u)?;
    let split = spectral_split(&h, eps_f);
    let triplets = hamiltonian_derivative_triplets(model, lat, u, probe, axis)?;
    derivative_block_from_split(&split, &triplets, model.n_orb(), observe)
}

/// Central finite-difference oracle for `density_derivative_analytic`.
pub fn density_derivative_fd(
    model: &TBModel,
    lat: &SupercellLattice,
    u: &Displacement,
    eps_f: f64,
    probe: usize,
    axis: usize,
    observe: usize,
    step: f64,
) -> Result<DMatrix<f64>> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter {
            what: "step",
            detail: format!("must be positive, got {step}"),
        });
    }
    if observe >= lat.n_sites() {
        return Err(Error::IndexOutOfRange {
            index: observe,
            len: lat.n_sites(),
        });
    }
    let nb = model.n_orb();
    let block = |u: &Displacement| -> Result<DMatrix<f64>> {
        let h = assemble_hamiltonian(model, lat, u)?;
        let rho = density_matrix_spectral(&h, eps_f)?;
        Ok(rho
            .matrix()
            .view((observe * nb, observe * nb), (nb, nb))
            .clone_owned())
    };
    let plus = block(&u.nudged(probe, axis, step))?;
    let minus = block(&u.nudged(probe, axis, -step))?;
    Ok((plus - minus) / (2.0 * step))
}

/// Total electronic energy `E = Tr(rho H)`: the sum of occupied eigenvalues.
pub fn total_energy(h: &Hamiltonian, eps_f: f64) -> Result<f64> {
    let split = spectral_split(h, eps_f);
    let dist = split
        .values
        .iter()
        .map(|e| (e - eps_f).abs())
        .fold(f64::INFINITY, f64::min);
    if dist < FERMI_TOL {
        return Err(Error::FermiLevelInSpectrum {
            eps_f,
            dist,
            tol: FERMI_TOL,
        });
    }
    Ok(split.values.iter().take(split.n_occ).sum())
}

/// Force on `site`: `-Tr(rho dH/d[u(site)])` per axis (the zero-temperature
/// derivative of `Tr(rho H)`, exact for an idempotent spectral projector).
pub fn site_force(
    model: &TBModel,
    lat: &SupercellLattice,
    u: &Displacement,
    eps_f: f64,
    site: usize,
) -> Result<Vec<f64>> {
    let h = assemble_hamiltonian(model, lat, u)?;
    let rho = density_matrix_spectral(&h, eps_f)?;
    site_force_with_density(model, lat, u, &rho, site)
}

/// Force evaluation reusing an already computed density matrix.
pub fn site_force_with_density(
    model: &TBModel,
    lat: &SupercellLattice,
    u: &Displacement,
    rho: &DensityMatrix,
    site: usize,
) -> Result<Vec<f64>> {
    let mut force = vec![0.0; lat.dim()];
    for (axis, f) in force.iter_mut().enumerate() {
        let triplets = hamiltonian_derivative_triplets(model, lat, u, site, axis)?;
        let mut tr = 0.0;
        for &(r, c, v) in &triplets {
            tr += rho.matrix()[(c, r)] * v;
        }
        *f = -tr;
    }
    Ok(force)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_chain, Displacement};
    use crate::tightbinding::{toy_model, ToyChainParams};

    fn chain_setup(
        n: usize,
        gp: f64,
        gm: f64,
    ) -> (TBModel, crate::lattice::SupercellLattice, Hamiltonian, f64) {
        let params = crate::bloch::solve_params_for_gaps(gp, gm).unwrap();
        let model = toy_model(params, true).unwrap();
        let lat = build_chain(n, 1.0).unwrap();
        let h = assemble_hamiltonian(&model, &lat, &Displacement::zeros(&lat)).unwrap();
        let base = crate::lattice::MultiLattice::chain(1.0).unwrap();
        let bs = crate::bloch::band_structure(&model, &base, 64, 1).unwrap();
        let eps_f = bs.eps_f();
        (model, lat, h, eps_f)
    }

    #[test]
    fn spectral_projector_on_diagonal_matrix() {
        let h = Hamiltonian::from_matrix(
            DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0])),
            1,
        )
        .unwrap();
        let rho = density_matrix_spectral(&h, 0.0).unwrap();
        assert_eq!(
            rho.matrix(),
            &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])
        );
        assert_eq!(rho.n_occupied(), 1);
    }

    #[test]
    fn spectral_projector_on_offdiagonal_matrix() {
        let h = Hamiltonian::from_matrix(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]), 1)
            .unwrap();
        let rho = density_matrix_spectral(&h, 0.0).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert!((rho.matrix() - want).abs().max() < 1e-15);
    }

    #[test]
    fn fermi_level_on_eigenvalue_rejected() {
        let h = Hamiltonian::from_matrix(
            DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0])),
            1,
        )
        .unwrap();
        assert!(matches!(
            density_matrix_spectral(&h, 1.0 + 1e-10),
            Err(Error::FermiLevelInSpectrum { .. })
        ));
    }

    #[test]
    fn projector_invariants_on_chain() {
        let (_, _, h, eps_f) = chain_setup(40, 2.0, 0.5);
        let rho = density_matrix_spectral(&h, eps_f).unwrap();
        let dim = rho.dim() as f64;

        let idem = (rho.matrix() * rho.matrix() - rho.matrix()).norm();
        assert!(idem <= 1e-10 * dim, "idempotency {idem}");
        assert_eq!(rho.matrix(), &rho.matrix().transpose());
        assert!((rho.trace() - 40.0).abs() <= 1e-10, "trace {}", rho.trace());

        let comm = (rho.matrix() * h.matrix() - h.matrix() * rho.matrix()).norm();
        assert!(comm <= 1e-9 * h.matrix().norm(), "commutator {comm}");

        // gauge invariance under a constant spectral shift
        let shifted =
            Hamiltonian::from_matrix(h.matrix() + DMatrix::identity(h.dim(), h.dim()) * 3.0, 2)
                .unwrap();
        let rho2 = density_matrix_spectral(&shifted, eps_f + 3.0).unwrap();
        assert!((rho.matrix() - rho2.matrix()).norm() <= 1e-10);
    }

    #[test]
    fn contour_projector_on_diagonal_matrix() {
        let h = Hamiltonian::from_matrix(
            DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0])),
            1,
        )
        .unwrap();
        let contour = Contour::new(Complex::new(-1.0, 0.0), 0.5, 8).unwrap();
        let rho = density_matrix_contour(&h, &contour).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!((rho.matrix() - want).abs().max() <= 1e-10);
        assert_eq!(rho.n_occupied(), 1);
    }

    #[test]
    fn contour_matches_spectral_on_chain() {
        let (_, _, h, eps_f) = chain_setup(30, 2.0, 0.5);
        let spectral = density_matrix_spectral(&h, eps_f).unwrap();
        let contour = Contour::enclosing(&h, eps_f, 0.25 * 0.5).unwrap();
        let quad = density_matrix_contour(&h, &contour).unwrap();
        let diff = (spectral.matrix() - quad.matrix()).norm();
        assert!(diff <= 1e-8, "contour vs spectral {diff}");
        assert_eq!(quad.n_occupied(), 30);
    }

    #[test]
    fn contour_reaching_conduction_band_rejected() {
        let h = Hamiltonian::from_matrix(
            DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0])),
            1,
        )
        .unwrap();
        let whole = Contour::new(Complex::new(0.0, 0.0), 1.5, 8).unwrap();
        assert!(matches!(
            density_matrix_contour(&h, &whole),
            Err(Error::InvalidContour(_))
        ));
        let touching = Contour::new(Complex::new(-1.0, 0.0), 2.0, 8).unwrap();
        assert!(matches!(
            density_matrix_contour(&h, &touching),
            Err(Error::InvalidContour(_))
        ));
    }

    #[test]
    fn hopeless_clearance_fails_quadrature() {
        let h = Hamiltonian::from_matrix(
            DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 1.0])),
            1,
        )
        .unwrap();
        // the occupied eigenvalue clears the circle by only 1e-7: legal, but
        // the trapezoid cannot converge within the node cap
        let contour = Contour::new(Complex::new(-0.5, 0.0), 0.5 + 1e-7, 8).unwrap();
        assert!(matches!(
            density_matrix_contour(&h, &contour),
            Err(Error::QuadratureFailure { .. })
        ));
    }

    #[test]
    fn resolvent_profile_decoupled_and_norm_identity() {
        let p = ToyChainParams::with_nn_values(-1.0, 1.0, 0.0, 0.0, 0.0);
        let model = toy_model(p, true).unwrap();
        let lat = build_chain(10, 1.0).unwrap();
        let h = assemble_hamiltonian(&model, &lat, &Displacement::zeros(&lat)).unwrap();
        let profile = resolvent_decay_profile(&h, &lat, Complex::new(0.0, 0.0)).unwrap();
        for &(r, m) in profile.samples() {
            if r > 0.0 {
                assert_eq!(m, 0.0, "off-diagonal resolvent at distance {r}");
            } else {
                assert!((m - 1.0).abs() < 1e-12, "diagonal 1/dist");
            }
        }
    }

    #[test]
    fn resolvent_operator_norm_is_inverse_distance() {
        let (_, lat, h, eps_f) = chain_setup(20, 2.0, 0.5);
        let z = Complex::new(eps_f, 0.0);
        let (values, _) = sorted_symmetric_eigen(h.matrix());
        let dist = values
            .iter()
            .map(|&e| (Complex::new(e, 0.0) - z).norm())
            .fold(f64::INFINITY, f64::min);

        let dim = h.dim();
        let mut a = h.matrix().map(|x| -Complex::from(x));
        for i in 0..dim {
            a[(i, i)] += z;
        }
        let resolvent = a.lu().try_inverse().unwrap();
        let top = resolvent.svd(false, false).singular_values[0];
        assert!(
            (top - 1.0 / dist).abs() <= 1e-10 * top,
            "norm {top} vs 1/dist {}",
            1.0 / dist
        );
        let _ = lat;
    }

    #[test]
    fn resolvent_rate_grows_with_distance_to_spectrum() {
        // narrow indirect gap: the decay rate near the band edge is set by
        // the clearance to the spectrum and grows sharply toward mid-gap,
        // staying below the band-collision cap so the ordering is strict
        let (_, lat, h, eps_f) = chain_setup(60, 2.0, 0.1);
        let (values, _) = sorted_symmetric_eigen(h.matrix());
        let vmax = values
            .iter()
            .filter(|&&e| e < eps_f)
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut rates = Vec::new();
        for frac in [0.1, 0.5, 1.0] {
            let z = Complex::new(vmax + frac * (eps_f - vmax), 0.0);
            let profile = resolvent_decay_profile(&h, &lat, z).unwrap();
            // fixed window: beyond it the profile flattens onto the
            // finite-ring plateau carried by the extended edge eigenstates
            // (level ~ (2/dim)/clearance), which is not the decay rate
            let fit =
                crate::locality::fit_exponential_rate(&profile, 1e-13, Some((1.0, 8.0))).unwrap();
            rates.push(-fit.slope);
        }
        assert!(rates[0] > 0.0);
        assert!(rates[1] > rates[0], "{rates:?}");
        assert!(rates[2] > rates[1], "{rates:?}");
    }

    #[test]
    fn pole_in_spectrum_rejected() {
        let (_, lat, h, _) = chain_setup(10, 2.0, 2.0);
        let (values, _) = sorted_symmetric_eigen(h.matrix());
        let res = resolvent_decay_profile(&h, &lat, Complex::new(values[3], 0.0));
        assert!(matches!(res, Err(Error::ResolventPoleTooClose { .. })));
    }

    #[test]
    fn derivative_zero_for_decoupled_model() {
        // all channels identically zero (values and slopes) so dH/du vanishes
        let p = ToyChainParams {
            c1: -1.0,
            c2: 1.0,
            a: [0.0; 3],
            b: [0.0; 3],
            d: [0.5; 3],
        };
        let model = toy_model(p, true).unwrap();
        let lat = build_chain(8, 1.0).unwrap();
        let u = Displacement::zeros(&lat);
        let block = density_derivative_analytic(&model, &lat, &u, 0.0, 3, 0, 5).unwrap();
        assert_eq!(block, DMatrix::zeros(2, 2));
        let fd = density_derivative_fd(&model, &lat, &u, 0.0, 3, 0, 5, 1e-4).unwrap();
        assert!(fd.abs().max() < 1e-12);
    }

    #[test]
    fn derivative_matches_finite_differences() {
        // small indirect gap: derivative blocks decay slowly, so even the
        // far-separated pair stays orders of magnitude above the
        // finite-difference noise floor and relative errors are meaningful
        let (model, lat, _, eps_f) = chain_setup(30, 2.0, 0.05);
        let u = crate::lattice::make_perturbation(
            &lat,
            crate::lattice::PerturbationProfile::Localized,
            1e-3,
            crate::lattice::NormKind::Max,
            2.0,
            13,
        )
        .unwrap();
        for (probe, observe) in [(4usize, 4usize), (10, 12), (25, 3)] {
            let analytic =
                density_derivative_analytic(&model, &lat, &u, eps_f, probe, 0, observe).unwrap();
            assert!(
                (&analytic - analytic.transpose()).abs().max() <= 1e-12,
                "block symmetry"
            );
            let mut best = f64::INFINITY;
            for step in [1e-4, 1e-5, 1e-6] {
                let fd = density_derivative_fd(&model, &lat, &u, eps_f, probe, 0, observe, step)
                    .unwrap();
                let rel = (&fd - &analytic).norm() / analytic.norm().max(1e-30);
                best = best.min(rel);
            }
            assert!(best <= 1e-5, "probe {probe} observe {observe}: best {best}");
        }
    }

    #[test]
    fn fd_error_shrinks_quadratically() {
        let (model, lat, _, eps_f) = chain_setup(24, 2.0, 0.5);
        let u = Displacement::zeros(&lat);
        let analytic = density_derivative_analytic(&model, &lat, &u, eps_f, 5, 0, 7).unwrap();
        let err = |step: f64| {
            let fd = density_derivative_fd(&model, &lat, &u, eps_f, 5, 0, 7, step).unwrap();
            (&fd - &analytic).norm()
        };
        let ratio = err(1e-3) / err(1e-4);
        assert!(
            (50.0..=200.0).contains(&ratio),
            "second-order step ratio {ratio}"
        );
    }

    #[test]
    fn degenerate_split_is_ill_conditioned() {
        let h = Hamiltonian::from_matrix(
            DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, 0.0, 1e-14, 1.0])),
            1,
        )
        .unwrap();
        let split = spectral_split(&h, 5e-15);
        let res = derivative_block_from_split(&split, &[(0, 1, 1.0)], 1, 0);
        assert!(matches!(res, Err(Error::IllConditionedDerivative { .. })));
    }

    #[test]
    fn forces_vanish_on_homogeneous_chain() {
        let (model, lat, _, eps_f) = chain_setup(20, 2.0, 0.5);
        let u = Displacement::zeros(&lat);
        for site in [0, 7, 19] {
            let f = site_force(&model, &lat, &u, eps_f, site).unwrap();
            assert!(f[0].abs() <= 1e-10, "site {site} force {}", f[0]);
        }
    }

    #[test]
    fn force_matches_energy_finite_difference_and_sums_to_zero() {
        let (model, lat, _, eps_f) = chain_setup(20, 2.0, 0.5);
        let u = crate::lattice::make_perturbation(
            &lat,
            crate::lattice::PerturbationProfile::Global,
            5e-3,
            crate::lattice::NormKind::Max,
            2.0,
            21,
        )
        .unwrap();
        let energy = |u: &Displacement| -> f64 {
            let h = assemble_hamiltonian(&model, &lat, u).unwrap();
            total_energy(&h, eps_f).unwrap()
        };
        let mut total = 0.0;
        for site in 0..lat.n_sites() {
            let f = site_force(&model, &lat, &u, eps_f, site).unwrap()[0];
            total += f;
            if site % 7 == 0 {
                // step large enough that eigensolver noise (~1e-14 * ||H||)
                // stays far below the central-difference quotient
                let step = 1e-4;
                let fd = -(energy(&u.nudged(site, 0, step)) - energy(&u.nudged(site, 0, -step)))
                    / (2.0 * step);
                let scale = f.abs().max(1e-6);
                assert!(
                    (f - fd).abs() / scale <= 1e-5,
                    "site {site}: analytic {f} vs fd {fd}"
                );
            }
        }
        assert!(total.abs() <= 1e-9, "net force {total}");
    }
}
