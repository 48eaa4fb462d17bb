use drdtr_core::dataset::PanelDataset;
use drdtr_core::learners::{learn, learn_aipw_simultaneous_with, learn_dr_with, LearnedDtr, LearnerConfig, Method};
use drdtr_core::policytree::{Dtr, PolicyClass};
use drdtr_core::simeval::{generate, true_welfare, DgpKind, DgpSpec, DiscreteDgp, OracleNuisance};

fn constant_actions(dtr: &Dtr) -> Vec<usize> {
    (1..=dtr.num_stages())
        .map(|t| {
            let tree = dtr.stage(t).as_tree().expect("tree policy");
            assert_eq!(tree.depth, 0);
            tree.leaves[0]
        })
        .collect()
}

fn oracle_dr(kind: DgpKind, simultaneous: bool) -> Vec<usize> {
    let dgp = kind.discrete().unwrap();
    let pop = generate(&DgpSpec { kind, n: 200_000, seed: 11 }).unwrap();
    let source = OracleNuisance { dgp: &dgp, data: &pop.data };
    let cfg = LearnerConfig::new(Method::Dr, kind.default_classes(), 1);
    let learned = if simultaneous {
        learn_aipw_simultaneous_with(&pop.data, &cfg, &source).unwrap()
    } else {
        learn_dr_with(&pop.data, &cfg, &source).unwrap()
    };
    constant_actions(&learned.dtr)
}

#[test]
fn backward_induction_picks_the_myopic_regime() {
    assert_eq!(oracle_dr(DgpKind::AppendixD, false), vec![0, 0]);
    assert_eq!(DiscreteDgp::appendix_d().value(&Dtr::constant(&[0, 0])), 0.6);
}

#[test]
fn modified_design_reaches_the_first_best() {
    assert_eq!(oracle_dr(DgpKind::AppendixDModified, false), vec![1, 1]);
}

#[test]
fn simultaneous_search_finds_the_global_best() {
    assert_eq!(oracle_dr(DgpKind::AppendixD, true), vec![1, 1]);
}

#[test]
fn csv_round_trip_is_lossless() {
    let pop = generate(&DgpSpec { kind: DgpKind::Dgp1, n: 40, seed: 5 }).unwrap();
    let mut buf = Vec::new();
    pop.data.to_csv_writer(&mut buf).unwrap();
    let back = PanelDataset::read_csv(buf.as_slice(), pop.data.schema(), std::path::Path::new("mem")).unwrap();
    assert_eq!(back, pop.data);
    let mut again = Vec::new();
    back.to_csv_writer(&mut again).unwrap();
    assert_eq!(buf, again);
}

#[test]
fn learned_regime_survives_json() {
    let pop = generate(&DgpSpec { kind: DgpKind::CustomDiscrete, n: 400, seed: 8 }).unwrap();
    let cfg = LearnerConfig::new(Method::Dr, vec![PolicyClass::trees(1), PolicyClass::trees(1)], 21);
    let learned = learn(&pop.data, &cfg).unwrap();
    let json = learned.to_json().unwrap();
    let back: LearnedDtr = serde_json::from_str(&json).unwrap();
    assert_eq!(back.to_json().unwrap(), json);
    assert_eq!(true_welfare(&pop, &back.dtr).unwrap(), true_welfare(&pop, &learned.dtr).unwrap());
}

#[test]
fn same_seed_same_regime() {
    let pop = generate(&DgpSpec { kind: DgpKind::Dgp2, n: 300, seed: 9 }).unwrap();
    for method in [Method::Dr, Method::Ipw, Method::QSearch] {
        let cfg = LearnerConfig::new(method, DgpKind::Dgp2.default_classes(), 4);
        let a = learn(&pop.data, &cfg).unwrap().to_json().unwrap();
        let b = learn(&pop.data, &cfg).unwrap().to_json().unwrap();
        assert_eq!(a, b, "{method}");
    }
}
