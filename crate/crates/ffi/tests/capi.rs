//! Exercise the C ABI end to end: build a checkpoint with the Rust API, then
//! drive it exclusively through the extern "C" surface.

use mintflow_ffi::*;
use rand::SeedableRng;
use std::ffi::{CStr, CString};

fn make_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    use mintflow::flow::{Block, FlowModel, PreprocessConfig};
    use mintflow::masks::Orientation;
    use mintflow::mint::{MintInit, MintParams};
    use rand::Rng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    // Well away from the identity start so the solver has real work to do.
    let mut layer = |o: Orientation| {
        let mut init = MintInit::new(1, 2, 3, o);
        init.weight_scale = 0.8;
        let mut p = MintParams::init(&init, &mut rng).unwrap();
        for b in p.b1.iter_mut().chain(&mut p.b2).chain(&mut p.b3) {
            *b = rng.random_range(-0.3..0.3);
        }
        p.log_t[0] = 0.2;
        p
    };
    let model = FlowModel::new(
        (1, 4, 4),
        vec![Block::PairedMint {
            lower: layer(Orientation::Lower),
            upper: layer(Orientation::Upper),
        }],
        PreprocessConfig { lambda: 0.05, levels: 256 },
    )
    .unwrap();
    let path = dir.join("ckpt");
    mintflow::train::save_checkpoint(&model, None, 0, 5, &path).unwrap();
    path
}

#[test]
fn load_query_score_sample_free() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = make_checkpoint(dir.path());
    let cpath = CString::new(ckpt.to_str().unwrap()).unwrap();

    let mut handle: *mut MfModel = std::ptr::null_mut();
    assert_eq!(unsafe { mf_model_load(cpath.as_ptr(), &mut handle) }, MfStatus::Ok);
    assert!(!handle.is_null());

    let (mut c, mut h, mut w) = (0usize, 0usize, 0usize);
    assert_eq!(
        unsafe { mf_model_input_shape(handle, &mut c, &mut h, &mut w) },
        MfStatus::Ok
    );
    assert_eq!((c, h, w), (1, 4, 4));
    let mut dims = 0usize;
    assert_eq!(unsafe { mf_model_dims(handle, &mut dims) }, MfStatus::Ok);
    assert_eq!(dims, 16);

    // log_prob on two logit-space images.
    let x: Vec<f64> = (0..2 * dims).map(|i| (i as f64 / 10.0).sin()).collect();
    let mut lp = [0.0f64; 2];
    assert_eq!(
        unsafe { mf_log_prob(handle, x.as_ptr(), 2, lp.as_mut_ptr()) },
        MfStatus::Ok
    );
    assert!(lp.iter().all(|v| v.is_finite()));

    // bpd on raw pixels, deterministic in the seed.
    let pixels: Vec<f64> = (0..2 * dims).map(|i| (i * 13 % 256) as f64).collect();
    let (mut b1, mut b2) = (0.0f64, 0.0f64);
    assert_eq!(
        unsafe { mf_bpd(handle, pixels.as_ptr(), 2, 9, &mut b1) },
        MfStatus::Ok
    );
    assert_eq!(
        unsafe { mf_bpd(handle, pixels.as_ptr(), 2, 9, &mut b2) },
        MfStatus::Ok
    );
    assert_eq!(b1, b2);
    assert!(b1.is_finite());

    // Samples land in pixel range and are seed-deterministic.
    let mut s1 = vec![0.0f64; 3 * dims];
    let mut s2 = vec![0.0f64; 3 * dims];
    let mut clipped = -1.0f64;
    assert_eq!(
        unsafe { mf_sample(handle, 3, 21, 1.0, 120, s1.as_mut_ptr(), &mut clipped) },
        MfStatus::Ok
    );
    assert_eq!(
        unsafe { mf_sample(handle, 3, 21, 1.0, 120, s2.as_mut_ptr(), std::ptr::null_mut()) },
        MfStatus::Ok
    );
    assert_eq!(s1, s2);
    assert!((0.0..=1.0).contains(&clipped));
    assert!(s1.iter().all(|&p| (0.0..=255.0).contains(&p)));

    // An empty batch is legal and writes nothing.
    let before = lp;
    assert_eq!(
        unsafe { mf_log_prob(handle, x.as_ptr(), 0, lp.as_mut_ptr()) },
        MfStatus::Ok
    );
    assert_eq!(lp, before);

    // A wildly out-of-range step size drives the iteration to non-finite
    // values, which must surface as a divergence status with a message.
    let status = unsafe {
        mf_sample(handle, 1, 3, 50.0, 600, s1.as_mut_ptr(), std::ptr::null_mut())
    };
    assert_eq!(status, MfStatus::Diverged);
    let msg = unsafe { CStr::from_ptr(mf_last_error()) }.to_string_lossy();
    assert!(msg.contains("block"), "{msg}");

    unsafe { mf_model_free(handle) };
}

#[test]
fn generated_header_exists_and_declares_the_api() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/mintflow.h");
    let text = std::fs::read_to_string(&header).expect("header generated at build time");
    for symbol in [
        "mf_model_load",
        "mf_model_free",
        "mf_log_prob",
        "mf_bpd",
        "mf_sample",
        "mf_last_error",
        "MfModel",
        "MfStatus",
    ] {
        assert!(text.contains(symbol), "header missing {symbol}");
    }
}
