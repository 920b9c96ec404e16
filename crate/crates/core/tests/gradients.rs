mod common;

use common::gradcheck::{case, check, Loss, MAX_REL};

fn assert_close(loss: Loss) {
    for seed in 0..3 {
        for (name, worst, norm) in check(loss, seed) {
            assert!(worst < MAX_REL && norm < MAX_REL, "{loss:?} {name} seed {seed}: entrywise {worst:.3e}, norm {norm:.3e}");
        }
    }
}

#[test]
fn le_gradient() {
    assert_close(Loss::Le);
}

#[test]
fn weighted_le_gradient() {
    assert_close(Loss::WeightedLe);
}

#[test]
fn local_certainty_gradient() {
    assert_close(Loss::LocalCertainty);
}

#[test]
fn gle_gradient() {
    assert_close(Loss::Gle);
}

#[test]
fn regmse_gradient() {
    assert_close(Loss::RegMse);
}

#[test]
fn gle_gradient_is_sum_of_term_gradients() {
    let c = case(7);
    let all = Loss::Gle.grads(&c);
    let a = Loss::WeightedLe.grads(&c);
    let b = Loss::LocalCertainty.grads(&c);
    for (t, (x, y)) in all.score_1.as_slice().iter().zip(a.score_1.as_slice().iter().zip(b.score_1.as_slice())) {
        assert!((t - (x + y)).abs() < 1e-12);
    }
    let (wa, wb) = (a.weight_1.unwrap(), b.weight_1.unwrap());
    for (t, (x, y)) in all.weight_1.unwrap().as_slice().iter().zip(wa.as_slice().iter().zip(wb.as_slice())) {
        assert!((t - (x + y)).abs() < 1e-12);
    }
}
