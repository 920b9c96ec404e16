//! Analytic loss gradients against central finite differences (f64, step
//! 1e-5) on random 32×32 score maps. Set A is computed once at the base
//! point and held fixed while probing, since the argmax selection is not
//! differentiated.

use super::*;
use gleo::grid::build_correspondence_set;
use gleo::losses::{evaluate_objective, gle_from_pair, gle_grads, AlignedPair, GleTerms, LossGrads, LossOptions, Objective};
use gleo::{DenseMap, Homography};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const MAX_REL: f64 = 1e-4;
/// Below this magnitude an entry is compared absolutely.
pub const FLOOR: f64 = 1e-6;
pub const SIDE: usize = 32;

pub struct Case {
    pub s1: DenseMap<f64>,
    pub s2: DenseMap<f64>,
    pub w1: DenseMap<f64>,
    pub w2: DenseMap<f64>,
    pub h: Homography,
    pub set: gleo::grid::CorrespondenceSet,
}

pub fn case(seed: u64) -> Case {
    let mut r: ChaCha8Rng = rng(seed);
    loop {
        let s1 = random_map(&mut r, SIDE, SIDE);
        let s2 = random_map(&mut r, SIDE, SIDE);
        let h = random_homography(&mut r, SIDE);
        let set = build_correspondence_set(&s1, &s2, &h).unwrap();
        if set.len() >= 2 {
            let g = SIDE / 8;
            let w1 = DenseMap::from_fn(g, g, |_, _| r.gen_range(0.05..0.95));
            let w2 = DenseMap::from_fn(g, g, |_, _| r.gen_range(0.05..0.95));
            return Case { s1, s2, w1, w2, h, set };
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Loss {
    Le,
    WeightedLe,
    LocalCertainty,
    Gle,
    RegMse,
}

impl Loss {
    pub fn uses_weights(self) -> bool {
        matches!(self, Loss::WeightedLe | Loss::LocalCertainty | Loss::Gle)
    }

    pub fn value(self, c: &Case, s1: &DenseMap<f64>, s2: &DenseMap<f64>, w1: &DenseMap<f64>, w2: &DenseMap<f64>) -> f64 {
        let pair = AlignedPair::with_set(s1, s2, &c.h, c.set.clone()).unwrap();
        let opts = LossOptions::default();
        match self {
            Loss::Le => evaluate_objective(Objective::Le, &pair, None, &opts, false).unwrap().loss.value,
            Loss::RegMse => evaluate_objective(Objective::RegMse, &pair, None, &opts, false).unwrap().loss.value,
            Loss::WeightedLe => gle_from_pair(&pair, w1, w2, &opts).unwrap().weighted_le.value,
            Loss::LocalCertainty => gle_from_pair(&pair, w1, w2, &opts).unwrap().local_certainty.value,
            Loss::Gle => gle_from_pair(&pair, w1, w2, &opts).unwrap().total.value,
        }
    }

    pub fn grads(self, c: &Case) -> LossGrads<f64> {
        let pair = AlignedPair::with_set(&c.s1, &c.s2, &c.h, c.set.clone()).unwrap();
        let opts = LossOptions::default();
        let weights = Some((&c.w1, &c.w2));
        match self {
            Loss::Le => evaluate_objective(Objective::Le, &pair, None, &opts, true).unwrap().grads.unwrap(),
            Loss::RegMse => evaluate_objective(Objective::RegMse, &pair, None, &opts, true).unwrap().grads.unwrap(),
            Loss::Gle => evaluate_objective(Objective::Gle, &pair, weights, &opts, true).unwrap().grads.unwrap(),
            Loss::WeightedLe => gle_grads(&pair, &c.w1, &c.w2, &opts, GleTerms::WEIGHTED_LE).unwrap(),
            Loss::LocalCertainty => gle_grads(&pair, &c.w1, &c.w2, &opts, GleTerms::LOCAL_CERTAINTY).unwrap(),
        }
    }
}

fn with_data(m: &DenseMap<f64>, data: &[f64]) -> DenseMap<f64> {
    DenseMap::new(m.height(), m.width(), data.to_vec()).unwrap()
}

pub fn check(loss: Loss, seed: u64) -> Vec<(&'static str, f64, f64)> {
    let c = case(seed);
    let g = loss.grads(&c);
    let mut report = Vec::new();

    let n1 = numeric_gradient(c.s1.as_slice(), STEP, |x| loss.value(&c, &with_data(&c.s1, x), &c.s2, &c.w1, &c.w2));
    report.push(("score_1", relative_errors(g.score_1.as_slice(), &n1, FLOOR)));
    let n2 = numeric_gradient(c.s2.as_slice(), STEP, |x| loss.value(&c, &c.s1, &with_data(&c.s2, x), &c.w1, &c.w2));
    report.push(("score_2", relative_errors(g.score_2.as_slice(), &n2, FLOOR)));
    assert!(n1.iter().chain(&n2).any(|v| v.abs() > 1e-3), "{loss:?}: degenerate case, no score sensitivity");

    if loss.uses_weights() {
        let gw1 = g.weight_1.expect("weight gradient");
        let gw2 = g.weight_2.expect("weight gradient");
        let m1 = numeric_gradient(c.w1.as_slice(), STEP, |x| loss.value(&c, &c.s1, &c.s2, &with_data(&c.w1, x), &c.w2));
        report.push(("weight_1", relative_errors(gw1.as_slice(), &m1, FLOOR)));
        let m2 = numeric_gradient(c.w2.as_slice(), STEP, |x| loss.value(&c, &c.s1, &c.s2, &c.w1, &with_data(&c.w2, x)));
        report.push(("weight_2", relative_errors(gw2.as_slice(), &m2, FLOOR)));
    } else {
        assert!(g.weight_1.is_none() && g.weight_2.is_none());
    }

    report.into_iter().map(|(name, (worst, norm))| (name, worst, norm)).collect()
}
