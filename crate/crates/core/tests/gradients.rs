mod gradcheck;

const TOLERANCE: f64 = 1e-4;

#[test]
fn focal_loss_gradient() {
    let err = gradcheck::check_focal(11);
    assert!(err < TOLERANCE, "relative error {err}");
}

#[test]
fn instance_distillation_gradient() {
    let err = gradcheck::check_ikd(12);
    assert!(err < TOLERANCE, "relative error {err}");
}

#[test]
fn global_distillation_gradient() {
    let err = gradcheck::check_gkd(13);
    assert!(err < TOLERANCE, "relative error {err}");
}

#[test]
fn iou_branch_gradient() {
    let err = gradcheck::check_iou_branch(14);
    assert!(err < TOLERANCE, "relative error {err}");
}

#[test]
fn box_regression_gradient() {
    let err = gradcheck::check_box_regression(15);
    assert!(err < TOLERANCE, "relative error {err}");
}
