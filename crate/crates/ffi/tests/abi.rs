use std::ffi::{CStr, CString};
use std::ptr;

use sbd_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(sbd_last_error()) }
        .to_string_lossy()
        .into_owned()
}

fn tmp(name: &str) -> std::path::PathBuf {
    std::env::temp_dir().join(format!("sbd-ffi-{}-{name}", std::process::id()))
}

unsafe fn tiny_model(seed: u64) -> *mut SbdModel {
    let mut m = ptr::null_mut();
    assert_eq!(
        sbd_model_init(1, 2, 16, 8, 16, seed, &mut m),
        SBD_OK,
        "{}",
        last_error()
    );
    m
}

unsafe fn two_stage_plan() -> *mut SbdPlan {
    let mut p = ptr::null_mut();
    assert_eq!(sbd_plan_new(&mut p), SBD_OK);
    assert_eq!(
        sbd_plan_add_stage(
            p,
            4,
            0.0,
            0,
            SBD_POLICY_ANCESTRAL,
            SBD_REMASK_SNAPSHOT,
            1.0,
            0.9
        ),
        SBD_OK
    );
    assert_eq!(
        sbd_plan_add_stage(
            p,
            16,
            0.5,
            0,
            SBD_POLICY_ANCESTRAL,
            SBD_REMASK_SNAPSHOT,
            1.0,
            0.9
        ),
        SBD_OK
    );
    p
}

unsafe fn tokens(g: *const SbdGeneration) -> Vec<u32> {
    let mut buf = vec![0u32; sbd_generation_len(g)];
    assert_eq!(
        sbd_generation_tokens(g, buf.as_mut_ptr(), buf.len()),
        SBD_OK
    );
    buf
}

#[test]
fn generate_is_deterministic_and_in_vocab() {
    unsafe {
        let m = tiny_model(3);
        let p = two_stage_plan();
        let mut a = ptr::null_mut();
        let mut b = ptr::null_mut();
        assert_eq!(
            sbd_generate(m, p, 16, 7, &mut a),
            SBD_OK,
            "{}",
            last_error()
        );
        assert_eq!(sbd_generate(m, p, 16, 7, &mut b), SBD_OK);
        let ta = tokens(a);
        assert_eq!(ta.len(), 16);
        assert_eq!(ta, tokens(b));
        assert!(ta.iter().all(|&t| (t as usize) < sbd_model_vocab_size(m)));

        let mut conf = vec![0.0; 16];
        assert_eq!(sbd_generation_confidences(a, conf.as_mut_ptr(), 16), SBD_OK);
        assert!(conf.iter().all(|c| (0.0..=1.0).contains(c)));

        assert_eq!(sbd_generation_stage_count(a), 2);
        assert_eq!(sbd_generation_stage_nfes(a, 0), 16);
        assert!(sbd_generation_stage_nfes(a, 1) > 0);
        assert_eq!(sbd_generation_stage_nfes(a, 9), 0);

        sbd_generation_free(a);
        sbd_generation_free(b);
        sbd_plan_free(p);
        sbd_model_free(m);
    }
}

#[test]
fn short_buffer_reports_required_size() {
    unsafe {
        let m = tiny_model(1);
        let p = two_stage_plan();
        let mut g = ptr::null_mut();
        assert_eq!(sbd_generate(m, p, 16, 0, &mut g), SBD_OK);
        let mut buf = [0u32; 4];
        assert_eq!(
            sbd_generation_tokens(g, buf.as_mut_ptr(), 4),
            SBD_ERR_BUFFER
        );
        assert!(last_error().contains("16"));
        sbd_generation_free(g);
        sbd_plan_free(p);
        sbd_model_free(m);
    }
}

#[test]
fn null_and_invalid_arguments() {
    unsafe {
        let mut g = ptr::null_mut();
        assert_eq!(
            sbd_generate(ptr::null(), ptr::null(), 16, 0, &mut g),
            SBD_ERR_NULL
        );
        assert!(g.is_null());
        assert!(last_error().contains("null"));

        let m = tiny_model(0);
        let mut p = ptr::null_mut();
        sbd_plan_new(&mut p);
        assert_eq!(
            sbd_plan_add_stage(p, 4, 0.0, 0, 9, SBD_REMASK_SNAPSHOT, 1.0, 0.9),
            SBD_ERR_CONFIG
        );
        // Block size that does not divide the length.
        sbd_plan_add_stage(
            p,
            5,
            0.0,
            0,
            SBD_POLICY_ANCESTRAL,
            SBD_REMASK_SNAPSHOT,
            1.0,
            0.9,
        );
        assert_eq!(sbd_generate(m, p, 16, 0, &mut g), SBD_ERR_CONFIG);
        // Longer than the model context.
        let q = two_stage_plan();
        assert_ne!(sbd_generate(m, q, 32, 0, &mut g), SBD_OK);
        assert!(g.is_null());

        let missing = CString::new(tmp("missing.ckpt").to_str().unwrap()).unwrap();
        let mut loaded = ptr::null_mut();
        assert_eq!(
            sbd_model_load(missing.as_ptr(), &mut loaded),
            SBD_ERR_CHECKPOINT
        );
        assert!(loaded.is_null());

        sbd_plan_free(p);
        sbd_plan_free(q);
        sbd_model_free(m);
        sbd_model_free(ptr::null_mut());
    }
}

#[test]
fn checkpoint_round_trip_preserves_samples() {
    unsafe {
        let m = tiny_model(5);
        let p = two_stage_plan();
        let path = tmp("rt.ckpt");
        let c = CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(sbd_model_save(m, c.as_ptr()), SBD_OK, "{}", last_error());
        let mut n = ptr::null_mut();
        assert_eq!(
            sbd_model_load(c.as_ptr(), &mut n),
            SBD_OK,
            "{}",
            last_error()
        );

        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        sbd_generate(m, p, 16, 11, &mut a);
        sbd_generate(n, p, 16, 11, &mut b);
        assert_eq!(tokens(a), tokens(b));

        std::fs::write(&path, b"not a checkpoint").unwrap();
        let mut bad = ptr::null_mut();
        assert_eq!(sbd_model_load(c.as_ptr(), &mut bad), SBD_ERR_CHECKPOINT);
        std::fs::remove_file(&path).ok();

        sbd_generation_free(a);
        sbd_generation_free(b);
        sbd_plan_free(p);
        sbd_model_free(m);
        sbd_model_free(n);
    }
}

#[test]
fn markov_scoring() {
    unsafe {
        let path = tmp("chain.txt");
        // Deterministic cycle 0 -> 1 -> 0.
        std::fs::write(&path, "2\n0 1\n1 0\n").unwrap();
        let c = CString::new(path.to_str().unwrap()).unwrap();
        let mut mk = ptr::null_mut();
        assert_eq!(
            sbd_markov_load(c.as_ptr(), &mut mk),
            SBD_OK,
            "{}",
            last_error()
        );
        assert!(sbd_markov_entropy_rate(mk).abs() < 1e-12);

        let seqs = [0u32, 1, 0, 1, 1, 0, 1, 0];
        let mut ppl = 0.0;
        assert_eq!(
            sbd_markov_gen_ppl(mk, seqs.as_ptr(), 2, 4, &mut ppl),
            SBD_OK,
            "{}",
            last_error()
        );
        assert!(ppl.is_finite() && ppl >= 1.0);
        std::fs::remove_file(&path).ok();
        sbd_markov_free(mk);
        assert!(sbd_markov_entropy_rate(ptr::null()).is_nan());
    }
}

#[test]
fn header_declares_every_export() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/sbd.h")).unwrap();
    let src = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/src/lib.rs")).unwrap();
    for line in src.lines().filter(|l| l.contains("extern \"C\" fn ")) {
        let name = line.split("fn ").nth(1).unwrap().split('(').next().unwrap();
        assert!(
            header.contains(&format!("{name}(")),
            "{name} missing from header"
        );
    }
}
