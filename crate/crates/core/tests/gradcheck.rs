//! Central finite differences against the analytic gradients of the
//! pretraining objectives and the segmentation loss.

mod common;

use common::{segmentation_gradcheck, stage1_gradcheck, stage2_gradcheck, GradReport};

fn assert_close(name: &str, r: GradReport) {
    assert!(r.params <= 5000, "{name}: {} parameters", r.params);
    assert!(r.max_rel_err < 1e-4, "{name}: max relative error {:e}", r.max_rel_err);
}

#[test]
fn stage1_total_loss() {
    assert_close("stage1", stage1_gradcheck(3));
}

#[test]
fn stage2_total_loss() {
    assert_close("stage2", stage2_gradcheck(3));
}

#[test]
fn segmentation_bce_dice() {
    assert_close("segmentation", segmentation_gradcheck(3));
}
