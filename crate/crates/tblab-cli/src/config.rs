//! Experiment configuration: TOML schema, defaults, and fail-closed
//! resolution into a validated execution plan.
//!
//! Unknown keys are rejected by the deserializer; sections that the declared
//! `kind` does not use are rejected during resolution, so a typo can neither
//! silently add nor silently disable a knob.

use std::path::PathBuf;

use serde::Deserialize;
use tblab::bloch::solve_params_for_gaps;
use tblab::lattice::NormKind;
use tblab::locality::FixedGap;

/// Reciprocal-grid resolution when a config leaves `kgrid` unset. Matches
/// what the library experiments use when they locate the Fermi level
/// themselves, so manifests reproduce the runs exactly.
pub const DEFAULT_KGRID: usize = tblab::locality::DEFAULT_KGRID;

/// Profiles need a few distance classes below the wraparound cap.
const MIN_ATOMS: usize = 4;

/// Default finite-difference step for Hessian probes.
const DEFAULT_HESSIAN_STEP: f64 = 1e-4;

/// Default fit floor for Hessian profiles; sits above the finite-difference
/// noise that the library's analytic-derivative profiles do not have.
const DEFAULT_HESSIAN_FLOOR: f64 = 1e-8;

/// Experiment family selector.
#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    WeakHomogeneous,
    WeakPerturbed,
    Strong,
    Hessian,
    Bands,
    Gaps,
}

impl Kind {
    pub fn label(self) -> &'static str {
        match self {
            Kind::WeakHomogeneous => "weak_homogeneous",
            Kind::WeakPerturbed => "weak_perturbed",
            Kind::Strong => "strong",
            Kind::Hessian => "hessian",
            Kind::Bands => "bands",
            Kind::Gaps => "gaps",
        }
    }
}

/// Top-level config file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub kind: Kind,
    /// Output directory; overridden by `TBLAB_OUT` and by `--out`.
    pub out: Option<PathBuf>,
    /// Seed for randomized draws; overridden by `--seed`. Defaults to 0.
    pub seed: Option<u64>,
    pub model: Option<ModelSection>,
    pub weak: Option<WeakSection>,
    pub perturbed: Option<PerturbedSection>,
    pub strong: Option<StrongSection>,
    pub hessian: Option<HessianSection>,
}

/// Model description for `bands`/`gaps`: either gap targets handed to the
/// solver, or the five nearest-neighbour values given directly.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub gap_plus: Option<f64>,
    pub gap_minus: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub f1: Option<f64>,
    pub f2: Option<f64>,
    pub f3: Option<f64>,
    pub kgrid: Option<usize>,
}

/// Which gap a weak sweep holds fixed.
#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FixedField {
    GapPlus,
    GapMinus,
}

impl From<FixedField> for FixedGap {
    fn from(f: FixedField) -> Self {
        match f {
            FixedField::GapPlus => FixedGap::GapPlus,
            FixedField::GapMinus => FixedGap::GapMinus,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakSection {
    pub fixed: FixedField,
    pub fixed_value: f64,
    pub varying: Vec<f64>,
    pub n_atoms: usize,
    pub kgrid: Option<usize>,
}

/// Strain norm selector for perturbation draws.
#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum NormField {
    Max,
    L2,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbedSection {
    pub gap_plus: f64,
    pub gap_minus: f64,
    pub eps_list: Vec<f64>,
    pub norm: NormField,
    /// Weight rate of the l2 strain seminorm; only with `norm = "l2"`.
    pub upsilon: Option<f64>,
    pub n_atoms: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrongSection {
    pub gap_plus: f64,
    pub gap_minus_list: Vec<f64>,
    pub n_atoms: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HessianSection {
    pub gap_plus: f64,
    pub gap_minus: f64,
    pub n_atoms: usize,
    pub step: Option<f64>,
    /// Fit floor above the finite-difference noise of the Hessian probe.
    pub floor: Option<f64>,
}

/// Model input resolved from a `[model]` section.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelSpec {
    Targets {
        gap_plus: f64,
        gap_minus: f64,
    },
    NnValues {
        c1: f64,
        c2: f64,
        f1: f64,
        f2: f64,
        f3: f64,
    },
}

/// Fully validated execution plan for one experiment family.
#[derive(Clone, Debug)]
pub enum Plan {
    WeakHomogeneous {
        fixed: FixedGap,
        fixed_value: f64,
        varying: Vec<f64>,
        n_atoms: usize,
        kgrid: usize,
    },
    WeakPerturbed {
        gap_plus: f64,
        gap_minus: f64,
        eps_list: Vec<f64>,
        norm_kind: NormKind,
        n_atoms: usize,
    },
    Strong {
        gap_plus: f64,
        gap_minus_list: Vec<f64>,
        n_atoms: usize,
    },
    Hessian {
        gap_plus: f64,
        gap_minus: f64,
        n_atoms: usize,
        step: f64,
        floor: f64,
    },
    Bands {
        model: ModelSpec,
        kgrid: usize,
    },
    Gaps {
        model: ModelSpec,
        kgrid: usize,
    },
}

impl Plan {
    pub fn kind(&self) -> Kind {
        match self {
            Plan::WeakHomogeneous { .. } => Kind::WeakHomogeneous,
            Plan::WeakPerturbed { .. } => Kind::WeakPerturbed,
            Plan::Strong { .. } => Kind::Strong,
            Plan::Hessian { .. } => Kind::Hessian,
            Plan::Bands { .. } => Kind::Bands,
            Plan::Gaps { .. } => Kind::Gaps,
        }
    }

    /// Every gap pair the plan will hand to the solver.
    pub fn gap_pairs(&self) -> Vec<(f64, f64)> {
        match self {
            Plan::WeakHomogeneous {
                fixed,
                fixed_value,
                varying,
                ..
            } => varying
                .iter()
                .map(|&v| match fixed {
                    FixedGap::GapPlus => (*fixed_value, v),
                    FixedGap::GapMinus => (v, *fixed_value),
                })
                .collect(),
            Plan::WeakPerturbed {
                gap_plus,
                gap_minus,
                ..
            } => vec![(*gap_plus, *gap_minus)],
            Plan::Strong {
                gap_plus,
                gap_minus_list,
                ..
            } => gap_minus_list.iter().map(|&gm| (*gap_plus, gm)).collect(),
            Plan::Hessian {
                gap_plus,
                gap_minus,
                ..
            } => vec![(*gap_plus, *gap_minus)],
            Plan::Bands { model, .. } | Plan::Gaps { model, .. } => match model {
                ModelSpec::Targets {
                    gap_plus,
                    gap_minus,
                } => vec![(*gap_plus, *gap_minus)],
                ModelSpec::NnValues { .. } => Vec::new(),
            },
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Validate and build the plan, optionally forcing the kind (the `bands`
    /// and `gaps` subcommands run those views of a config whose declared kind
    /// may differ; only then are foreign sections tolerated).
    pub fn resolve(&self, forced: Option<Kind>) -> Result<Plan, Vec<String>> {
        let kind = forced.unwrap_or(self.kind);
        let mut issues = Vec::new();
        if forced.is_none() {
            self.check_unused_sections(kind, &mut issues);
        }
        let plan = self.build_plan(kind, &mut issues);
        match plan {
            Some(p) if issues.is_empty() => Ok(p),
            _ => Err(issues),
        }
    }

    fn check_unused_sections(&self, kind: Kind, issues: &mut Vec<String>) {
        let used: &[&str] = match kind {
            Kind::WeakHomogeneous => &["weak"],
            Kind::WeakPerturbed => &["perturbed"],
            Kind::Strong => &["strong"],
            Kind::Hessian => &["hessian"],
            Kind::Bands | Kind::Gaps => &["model"],
        };
        let present: [(&str, bool); 5] = [
            ("model", self.model.is_some()),
            ("weak", self.weak.is_some()),
            ("perturbed", self.perturbed.is_some()),
            ("strong", self.strong.is_some()),
            ("hessian", self.hessian.is_some()),
        ];
        for (name, is_present) in present {
            if is_present && !used.contains(&name) {
                issues.push(format!(
                    "section [{name}] is not used by kind {}",
                    kind.label()
                ));
            }
        }
    }

    fn build_plan(&self, kind: Kind, issues: &mut Vec<String>) -> Option<Plan> {
        match kind {
            Kind::WeakHomogeneous => {
                let Some(w) = &self.weak else {
                    issues.push("kind weak_homogeneous needs a [weak] section".into());
                    return None;
                };
                check_atoms("weak.n_atoms", w.n_atoms, issues);
                let kgrid = check_kgrid("weak.kgrid", w.kgrid, issues);
                check_positive("weak.fixed_value", w.fixed_value, issues);
                if w.varying.is_empty() {
                    issues.push("weak.varying must list at least one gap value".into());
                }
                for &v in &w.varying {
                    check_positive("weak.varying entry", v, issues);
                    let (gp, gm) = match w.fixed {
                        FixedField::GapPlus => (w.fixed_value, v),
                        FixedField::GapMinus => (v, w.fixed_value),
                    };
                    check_gap_order(gp, gm, issues);
                }
                Some(Plan::WeakHomogeneous {
                    fixed: w.fixed.into(),
                    fixed_value: w.fixed_value,
                    varying: w.varying.clone(),
                    n_atoms: w.n_atoms,
                    kgrid,
                })
            }
            Kind::WeakPerturbed => {
                let Some(p) = &self.perturbed else {
                    issues.push("kind weak_perturbed needs a [perturbed] section".into());
                    return None;
                };
                check_atoms("perturbed.n_atoms", p.n_atoms, issues);
                check_positive("perturbed.gap_plus", p.gap_plus, issues);
                check_positive("perturbed.gap_minus", p.gap_minus, issues);
                check_gap_order(p.gap_plus, p.gap_minus, issues);
                if p.eps_list.is_empty() {
                    issues.push("perturbed.eps_list must list at least one strength".into());
                }
                for &e in &p.eps_list {
                    check_positive("perturbed.eps_list entry", e, issues);
                }
                let norm_kind = match (p.norm, p.upsilon) {
                    (NormField::Max, None) => NormKind::Max,
                    (NormField::Max, Some(_)) => {
                        issues.push("perturbed.upsilon is only used with norm = \"l2\"".into());
                        NormKind::Max
                    }
                    (NormField::L2, upsilon) => {
                        let upsilon = upsilon.unwrap_or(1.0);
                        check_positive("perturbed.upsilon", upsilon, issues);
                        NormKind::L2Upsilon { upsilon }
                    }
                };
                Some(Plan::WeakPerturbed {
                    gap_plus: p.gap_plus,
                    gap_minus: p.gap_minus,
                    eps_list: p.eps_list.clone(),
                    norm_kind,
                    n_atoms: p.n_atoms,
                })
            }
            Kind::Strong => {
                let Some(s) = &self.strong else {
                    issues.push("kind strong needs a [strong] section".into());
                    return None;
                };
                check_atoms("strong.n_atoms", s.n_atoms, issues);
                check_positive("strong.gap_plus", s.gap_plus, issues);
                if s.gap_minus_list.is_empty() {
                    issues.push("strong.gap_minus_list must list at least one gap value".into());
                }
                for &gm in &s.gap_minus_list {
                    check_positive("strong.gap_minus_list entry", gm, issues);
                    check_gap_order(s.gap_plus, gm, issues);
                }
                Some(Plan::Strong {
                    gap_plus: s.gap_plus,
                    gap_minus_list: s.gap_minus_list.clone(),
                    n_atoms: s.n_atoms,
                })
            }
            Kind::Hessian => {
                let Some(h) = &self.hessian else {
                    issues.push("kind hessian needs a [hessian] section".into());
                    return None;
                };
                check_atoms("hessian.n_atoms", h.n_atoms, issues);
                check_positive("hessian.gap_plus", h.gap_plus, issues);
                check_positive("hessian.gap_minus", h.gap_minus, issues);
                check_gap_order(h.gap_plus, h.gap_minus, issues);
                let step = h.step.unwrap_or(DEFAULT_HESSIAN_STEP);
                check_positive("hessian.step", step, issues);
                let floor = h.floor.unwrap_or(DEFAULT_HESSIAN_FLOOR);
                check_positive("hessian.floor", floor, issues);
                Some(Plan::Hessian {
                    gap_plus: h.gap_plus,
                    gap_minus: h.gap_minus,
                    n_atoms: h.n_atoms,
                    step,
                    floor,
                })
            }
            Kind::Bands | Kind::Gaps => {
                let Some(m) = &self.model else {
                    issues.push(format!("kind {} needs a [model] section", kind.label()));
                    return None;
                };
                let kgrid = check_kgrid("model.kgrid", m.kgrid, issues);
                let model = resolve_model(m, issues)?;
                Some(match kind {
                    Kind::Bands => Plan::Bands { model, kgrid },
                    _ => Plan::Gaps { model, kgrid },
                })
            }
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

fn resolve_model(m: &ModelSection, issues: &mut Vec<String>) -> Option<ModelSpec> {
    let targets = [m.gap_plus, m.gap_minus];
    let values = [m.c1, m.c2, m.f1, m.f2, m.f3];
    let any_target = targets.iter().any(Option::is_some);
    let any_value = values.iter().any(Option::is_some);
    match (any_target, any_value) {
        (true, true) => {
            issues.push(
                "model: give either gap targets (gap_plus, gap_minus) or explicit values \
                 (c1, c2, f1, f2, f3), not both"
                    .into(),
            );
            None
        }
        (false, false) => {
            issues.push("model: empty; set gap targets or explicit values".into());
            None
        }
        (true, false) => match (m.gap_plus, m.gap_minus) {
            (Some(gp), Some(gm)) => {
                check_positive("model.gap_plus", gp, issues);
                check_positive("model.gap_minus", gm, issues);
                check_gap_order(gp, gm, issues);
                Some(ModelSpec::Targets {
                    gap_plus: gp,
                    gap_minus: gm,
                })
            }
            _ => {
                issues.push("model: gap targets need both gap_plus and gap_minus".into());
                None
            }
        },
        (false, true) => match (m.c1, m.c2, m.f1, m.f2, m.f3) {
            (Some(c1), Some(c2), Some(f1), Some(f2), Some(f3)) => {
                for (name, v) in [
                    ("model.c1", c1),
                    ("model.c2", c2),
                    ("model.f1", f1),
                    ("model.f2", f2),
                    ("model.f3", f3),
                ] {
                    check_finite(name, v, issues);
                }
                Some(ModelSpec::NnValues { c1, c2, f1, f2, f3 })
            }
            _ => {
                issues.push("model: explicit values need all of c1, c2, f1, f2, f3".into());
                None
            }
        },
    }
}

fn check_atoms(name: &str, n: usize, issues: &mut Vec<String>) {
    if n < MIN_ATOMS {
        issues.push(format!(
            "{name} = {n}: need at least {MIN_ATOMS} sites for a decay profile"
        ));
    }
}

fn check_kgrid(name: &str, kgrid: Option<usize>, issues: &mut Vec<String>) -> usize {
    let k = kgrid.unwrap_or(DEFAULT_KGRID);
    if k < 8 {
        issues.push(format!("{name} = {k}: need at least 8 reciprocal points"));
    }
    k
}

fn check_positive(name: &str, v: f64, issues: &mut Vec<String>) {
    if !(v > 0.0 && v.is_finite()) {
        issues.push(format!("{name} = {v}: must be positive and finite"));
    }
}

fn check_finite(name: &str, v: f64, issues: &mut Vec<String>) {
    if !v.is_finite() {
        issues.push(format!("{name} = {v}: must be finite"));
    }
}

fn check_gap_order(gap_plus: f64, gap_minus: f64, issues: &mut Vec<String>) {
    if gap_minus > gap_plus {
        issues.push(format!(
            "gap ordering violated: gap_minus {gap_minus} > gap_plus {gap_plus}"
        ));
    }
}

/// Dry-run the gap solver on every pair the plan would use.
pub fn probe_solver(plan: &Plan) -> Vec<String> {
    plan.gap_pairs()
        .iter()
        .filter_map(|&(gp, gm)| {
            solve_params_for_gaps(gp, gm)
                .err()
                .map(|e| format!("gap pair ({gp}, {gm}) is not solvable: {e}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const WEAK: &str = r#"
        kind = "weak_homogeneous"
        out = "runs/weak"
        seed = 7

        [weak]
        fixed = "gap_plus"
        fixed_value = 2.0
        varying = [0.5, 0.125]
        n_atoms = 100
    "#;

    #[test]
    fn weak_config_parses_and_resolves() {
        let cfg = Config::parse(WEAK).unwrap();
        assert_eq!(cfg.seed(), 7);
        let plan = cfg.resolve(None).unwrap();
        match &plan {
            Plan::WeakHomogeneous {
                fixed,
                fixed_value,
                varying,
                n_atoms,
                kgrid,
            } => {
                assert_eq!(*fixed, FixedGap::GapPlus);
                assert_eq!(*fixed_value, 2.0);
                assert_eq!(varying, &[0.5, 0.125]);
                assert_eq!(*n_atoms, 100);
                assert_eq!(*kgrid, DEFAULT_KGRID);
            }
            other => panic!("wrong plan {other:?}"),
        }
        assert_eq!(plan.gap_pairs(), vec![(2.0, 0.5), (2.0, 0.125)]);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = WEAK.replace("seed = 7", "sed = 7");
        let err = Config::parse(&text).unwrap_err();
        assert!(err.contains("sed"), "{err}");
    }

    #[test]
    fn unused_section_is_an_issue() {
        let text =
            format!("{WEAK}\n[strong]\ngap_plus = 2.0\ngap_minus_list = [0.1]\nn_atoms = 50\n");
        let cfg = Config::parse(&text).unwrap();
        let issues = cfg.resolve(None).unwrap_err();
        assert!(issues.iter().any(|i| i.contains("[strong]")), "{issues:?}");
    }

    #[test]
    fn gap_ordering_violation_is_reported() {
        let text = r#"
            kind = "gaps"
            [model]
            gap_plus = 0.5
            gap_minus = 2.0
        "#;
        let cfg = Config::parse(text).unwrap();
        let issues = cfg.resolve(None).unwrap_err();
        assert!(
            issues.iter().any(|i| i.contains("gap ordering violated")),
            "{issues:?}"
        );
    }

    #[test]
    fn tiny_chain_is_a_size_violation() {
        let text = WEAK.replace("n_atoms = 100", "n_atoms = 1");
        let cfg = Config::parse(&text).unwrap();
        let issues = cfg.resolve(None).unwrap_err();
        assert!(
            issues.iter().any(|i| i.contains("weak.n_atoms = 1")),
            "{issues:?}"
        );
    }

    #[test]
    fn model_section_is_exclusive() {
        let text = r#"
            kind = "bands"
            [model]
            gap_plus = 2.0
            gap_minus = 0.5
            c1 = -1.0
        "#;
        let cfg = Config::parse(text).unwrap();
        let issues = cfg.resolve(None).unwrap_err();
        assert!(issues.iter().any(|i| i.contains("not both")), "{issues:?}");
    }

    #[test]
    fn forced_kind_tolerates_foreign_sections() {
        let text = format!("{WEAK}\n[model]\ngap_plus = 2.0\ngap_minus = 0.5\n");
        let cfg = Config::parse(&text).unwrap();
        // As written the config fails strict resolution (unused [model])...
        assert!(cfg.resolve(None).is_err());
        // ...but the gaps view runs from the [model] section alone.
        let plan = cfg.resolve(Some(Kind::Gaps)).unwrap();
        assert_eq!(
            plan.gap_pairs(),
            vec![(2.0, 0.5)],
            "forced gaps view must use the model targets"
        );
    }

    #[test]
    fn upsilon_with_max_norm_is_rejected() {
        let text = r#"
            kind = "weak_perturbed"
            [perturbed]
            gap_plus = 2.0
            gap_minus = 0.5
            eps_list = [1e-4]
            norm = "max"
            upsilon = 1.0
            n_atoms = 50
        "#;
        let cfg = Config::parse(text).unwrap();
        let issues = cfg.resolve(None).unwrap_err();
        assert!(issues.iter().any(|i| i.contains("upsilon")), "{issues:?}");
    }
}
