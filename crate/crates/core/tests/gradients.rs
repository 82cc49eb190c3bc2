mod support;

use support::grad_cases::{self, sweep, Case, SEEDS, TOLERANCE};

fn run(case: Case) {
    let s = sweep(case).unwrap();
    println!(
        "max rel error {:.2e}, {} coordinates, {} below floor, {} skipped at branch points",
        s.max_rel_error, s.checked, s.below_floor, s.kinks
    );
    assert!(s.checked > 0);
    assert!(
        s.max_rel_error < TOLERANCE,
        "relative error {:.3e} at seed {} ({:?}) over {SEEDS} seeds",
        s.max_rel_error,
        s.seed,
        s.at
    );
}

#[test]
fn conv2d() {
    run(grad_cases::conv);
}

#[test]
fn max_pool() {
    run(grad_cases::max_pool);
}

#[test]
fn avg_pool() {
    run(grad_cases::avg_pool);
}

#[test]
fn affine() {
    run(grad_cases::affine);
}

#[test]
fn batch_norm_train() {
    run(grad_cases::batch_norm);
}

#[test]
fn batch_norm_infer() {
    run(grad_cases::batch_norm_infer);
}

#[test]
fn relu_sigmoid_dropout() {
    run(grad_cases::activations);
}

#[test]
fn reductions_concat_mul() {
    run(grad_cases::reductions);
}

#[test]
fn cbam_channel_attention() {
    run(grad_cases::channel_attention);
}

#[test]
fn cbam_spatial_attention() {
    run(grad_cases::spatial_attention);
}

#[test]
fn cbam_block() {
    run(grad_cases::cbam_block);
}

#[test]
fn bce_head() {
    run(grad_cases::bce_head);
}

#[test]
fn cnn3_cbam_composite() {
    run(grad_cases::cnn3_cbam);
}
