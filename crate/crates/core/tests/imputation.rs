use clustord::data::{ClusteredDataset, Variable};
use clustord::datagen::{simulate_dataset, GenConfig};
use clustord::error::ErrorKind;
use clustord::impute::{fcs_impute, jm_impute, FcsSpec, Imputer, JmSpec};
use clustord::missingness::{apply_missingness, Mechanism, MissingnessSet};
use clustord::rng::seeded;

fn incomplete(mechanism: Mechanism, seed: u64) -> (ClusteredDataset, ClusteredDataset) {
    let d = simulate_dataset(&GenConfig { n_clusters: 120, ..GenConfig::default() }, seed).unwrap();
    let mut specs = MissingnessSet::standard(mechanism, 0.3, 0.5);
    specs.calibrate(&d).unwrap();
    let holes = apply_missingness(&d, &specs, &mut seeded(seed + 100)).unwrap();
    (d, holes)
}

fn short_jm() -> JmSpec {
    JmSpec { m_imputations: 3, burn_in: 150, between: 25, ..JmSpec::default() }
}

fn short_fcs() -> FcsSpec {
    FcsSpec { m_imputations: 3, burn_in: 150, between: 25, ..FcsSpec::default() }
}

fn outcome_shares(d: &ClusteredDataset) -> [f64; 4] {
    let mut c = [0.0; 4];
    for (_, m) in d.members() {
        c[m.y().unwrap() as usize - 1] += 1.0;
    }
    c.map(|v| v / d.n_members() as f64)
}

fn assert_completes(original: &ClusteredDataset, completed: &[ClusteredDataset], m: usize) {
    assert_eq!(completed.len(), m);
    for c in completed {
        assert!(!c.has_missing());
        assert!(c.validate().is_ok());
        for (a, b) in original.members().zip(c.members()) {
            for v in Variable::ALL {
                if let Some(kept) = a.1.get(v) {
                    assert_eq!(b.1.get(v), Some(kept));
                }
            }
        }
    }
}

#[test]
fn jm_fills_every_hole_and_keeps_observed_cells() {
    let (_, holes) = incomplete(Mechanism::Mar, 1);
    let completed = jm_impute(&holes, &short_jm(), &mut seeded(9)).unwrap();
    assert_completes(&holes, &completed, 3);
    assert_ne!(completed[0], completed[1]);
}

#[test]
fn fcs_fills_every_hole_and_keeps_observed_cells() {
    let (_, holes) = incomplete(Mechanism::Mar, 2);
    let completed = fcs_impute(&holes, &short_fcs(), &mut seeded(9)).unwrap();
    assert_completes(&holes, &completed, 3);
    assert_ne!(completed[0], completed[1]);
}

#[test]
fn imputation_is_deterministic_in_the_stream() {
    let (_, holes) = incomplete(Mechanism::Mcar, 3);
    for imputer in [Imputer::Jm(short_jm()), Imputer::Fcs(short_fcs())] {
        let a = imputer.impute(&holes, &mut seeded(4)).unwrap();
        let b = imputer.impute(&holes, &mut seeded(4)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn mcar_imputations_preserve_outcome_marginals() {
    let (full, holes) = incomplete(Mechanism::Mcar, 5);
    let truth = outcome_shares(&full);
    // A third of roughly 1700 members are imputed; 0.04 is several binomial
    // SEs of the imputed share on top of the posterior spread.
    for imputer in [Imputer::Jm(short_jm()), Imputer::Fcs(short_fcs())] {
        let completed = imputer.impute(&holes, &mut seeded(6)).unwrap();
        for c in &completed {
            let got = outcome_shares(c);
            for k in 0..4 {
                assert!((got[k] - truth[k]).abs() < 0.04, "{imputer:?} category {}: {got:?} vs {truth:?}", k + 1);
            }
        }
    }
}

#[test]
fn unobserved_category_cannot_be_imputed() {
    let (_, mut holes) = incomplete(Mechanism::Mcar, 7);
    for c in &mut holes.clusters {
        for m in &mut c.members {
            if m.y() == Some(4) {
                m.set(Variable::Y, None);
            }
        }
    }
    for imputer in [Imputer::Jm(short_jm()), Imputer::Fcs(short_fcs())] {
        let err = imputer.impute(&holes, &mut seeded(1)).unwrap_err();
        assert_eq!(err.kind(), ErrorKind::Data, "{err}");
    }
}
