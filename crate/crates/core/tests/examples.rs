mod roi_conv_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/roi_conv.rs"));
}

#[test]
fn roi_conv_example_runs() {
    roi_conv_example::run_example().expect("roi_conv example should run");
}

mod synthetic_data_example {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/synthetic_data.rs"
    ));
}

#[test]
fn synthetic_data_example_runs() {
    synthetic_data_example::run_example().expect("synthetic_data example should run");
}

mod rpn_proposals_example {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/rpn_proposals.rs"
    ));
}

#[test]
fn rpn_proposals_example_runs() {
    rpn_proposals_example::run_example().expect("rpn_proposals example should run");
}

mod metrics_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/metrics.rs"));
}

#[test]
fn metrics_example_runs() {
    metrics_example::run_example().expect("metrics example should run");
}

mod gradient_check_example {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/gradient_check.rs"
    ));
}

#[test]
fn gradient_check_example_runs() {
    gradient_check_example::run_example().expect("gradient_check example should run");
}

mod checkpoint_example {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/checkpoint.rs"
    ));
}

#[test]
fn checkpoint_example_runs() {
    checkpoint_example::run_example().expect("checkpoint example should run");
}

mod bench_example {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/bench.rs"));
}

#[test]
fn bench_example_runs() {
    bench_example::run_example().expect("bench example should run");
}

mod train_and_evaluate_example {
    include!(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/examples/train_and_evaluate.rs"
    ));
}

#[test]
fn train_and_evaluate_example_runs() {
    train_and_evaluate_example::run_example().expect("train_and_evaluate example should run");
}
