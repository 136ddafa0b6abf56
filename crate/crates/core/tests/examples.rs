mod permutation {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/permutation.rs"));
}

#[test]
fn permutation_example_runs() {
    permutation::run_example().expect("permutation example should run");
}

mod flash_entropy {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/flash_entropy.rs"));
}

#[test]
fn flash_entropy_example_runs() {
    flash_entropy::run_example().expect("flash_entropy example should run");
}

mod flash_backward {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/flash_backward.rs"));
}

#[test]
fn flash_backward_example_runs() {
    flash_backward::run_example().expect("flash_backward example should run");
}

mod monarch_attention {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/monarch_attention.rs"));
}

#[test]
fn monarch_attention_example_runs() {
    monarch_attention::run_example().expect("monarch_attention example should run");
}

mod video_first_frame {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/video_first_frame.rs"));
}

#[test]
fn video_first_frame_example_runs() {
    video_first_frame::run_example().expect("video_first_frame example should run");
}

mod cost_report {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/cost_report.rs"));
}

#[test]
fn cost_report_example_runs() {
    cost_report::run_example().expect("cost_report example should run");
}

mod matn_io {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/matn_io.rs"));
}

#[test]
fn matn_io_example_runs() {
    matn_io::run_example().expect("matn_io example should run");
}

mod frame_sweep {
    include!(concat!(env!("CARGO_MANIFEST_DIR"), "/examples/frame_sweep.rs"));
}

#[test]
fn frame_sweep_example_runs() {
    frame_sweep::run_example().expect("frame_sweep example should run");
}
