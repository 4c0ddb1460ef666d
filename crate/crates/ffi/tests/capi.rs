use std::ffi::{CStr, CString};
use std::ptr;

use ibpcat_ffi::*;

fn last_error() -> String {
    let p = ibp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn toy_dataset() -> *mut IbpDataset {
    let cards = [2usize, 3];
    let data = [1u32, 1, 2, 3, 1, 2, 2, 3, 1, 1, 2, 2];
    let mut ds = ptr::null_mut();
    let status = unsafe { ibp_dataset_new(6, 2, cards.as_ptr(), data.as_ptr(), &mut ds) };
    assert_eq!(status, IbpStatus::Ok);
    ds
}

#[test]
fn dataset_round_trip_and_errors() {
    let ds = toy_dataset();
    unsafe {
        assert_eq!(ibp_dataset_n_rows(ds), 6);
        assert_eq!(ibp_dataset_n_cols(ds), 2);
        ibp_dataset_free(ds);
    }
    let cards = [2usize];
    let bad = [3u32];
    let mut out = ptr::null_mut();
    let status = unsafe { ibp_dataset_new(1, 1, cards.as_ptr(), bad.as_ptr(), &mut out) };
    assert_ne!(status, IbpStatus::Ok);
    assert!(out.is_null());
    assert!(!last_error().is_empty());

    let status = unsafe { ibp_dataset_new(1, 1, ptr::null(), bad.as_ptr(), &mut out) };
    assert_eq!(status, IbpStatus::NullPointer);
}

#[test]
fn load_reports_parse_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "R:2\n1\n5\n").unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ibp_dataset_load(c.as_ptr(), &mut out) }, IbpStatus::Parse);
    assert!(last_error().contains(":3"));
}

#[test]
fn log_marginal_matches_library() {
    let ds = toy_dataset();
    let entries = [1u8, 0, 1, 1, 0, 0, 1, 0, 0, 1, 1, 1];
    let mut z = ptr::null_mut();
    unsafe {
        assert_eq!(ibp_features_new(6, 2, entries.as_ptr(), &mut z), IbpStatus::Ok);
        assert_eq!(ibp_features_k(z), 2);
        let mut buf = [0u8; 12];
        assert_eq!(ibp_features_copy(z, buf.as_mut_ptr(), 12), IbpStatus::Ok);
        assert_eq!(buf, entries);
        assert_eq!(ibp_features_copy(z, buf.as_mut_ptr(), 11), IbpStatus::Dimension);
        let mut lm = 0.0;
        assert_eq!(ibp_log_marginal(ds, z, 1.0, &mut lm), IbpStatus::Ok);

        let x = ibpcat::ObservationMatrix::from_one_based(6, vec![2, 3], &[1, 1, 2, 3, 1, 2, 2, 3, 1, 1, 2, 2]).unwrap();
        let zz = ibpcat::LatentFeatureState::from_rows(6, 2, &entries).unwrap();
        let h = ibpcat::Hyperparams::new(1.0, 1.0, 0).unwrap();
        let expected = ibpcat::laplace::total_log_marginal(&x, &zz, &h).unwrap();
        assert_eq!(lm, expected);

        assert_eq!(ibp_log_marginal(ds, z, -1.0, &mut lm), IbpStatus::InvalidArgument);
        ibp_features_free(z);
        ibp_dataset_free(ds);
    }
}

#[test]
fn gibbs_and_vi_runs() {
    let ds = toy_dataset();
    unsafe {
        let mut cfg = ibp_gibbs_config_default(3);
        cfg.n_iterations = 5;
        cfg.burn_in = 1;
        let mut res = ptr::null_mut();
        assert_eq!(ibp_gibbs_run(ds, &cfg, &mut res), IbpStatus::Ok);
        let n = ibp_gibbs_n_iterations(res);
        assert_eq!(n, 5);
        let mut ks = vec![0usize; n];
        let mut lms = vec![0.0; n];
        assert_eq!(ibp_gibbs_trace(res, ks.as_mut_ptr(), lms.as_mut_ptr(), n), IbpStatus::Ok);
        let mut z = ptr::null_mut();
        assert_eq!(ibp_gibbs_final_features(res, &mut z), IbpStatus::Ok);
        assert_eq!(ibp_features_k(z), ks[n - 1]);
        ibp_features_free(z);
        ibp_gibbs_result_free(res);

        cfg.burn_in = 10;
        assert_eq!(ibp_gibbs_run(ds, &cfg, &mut res), IbpStatus::InvalidArgument);

        let vcfg = IbpViConfig {
            truncation: 3,
            alpha: 1.0,
            sigma_b_sq: 1.0,
            seed: 1,
            max_cycles: 20,
            tolerance: 1e-8,
        };
        let mut v = ptr::null_mut();
        assert_eq!(ibp_vi_run(ds, &vcfg, &mut v), IbpStatus::Ok);
        let len = ibp_vi_bound_len(v);
        let mut bounds = vec![0.0; len];
        assert_eq!(ibp_vi_bounds(v, bounds.as_mut_ptr(), len), IbpStatus::Ok);
        assert!(bounds.windows(2).all(|w| w[1] >= w[0] - 1e-6));
        let mut nu = vec![0.0; 18];
        assert_eq!(ibp_vi_nu(v, nu.as_mut_ptr(), 18), IbpStatus::Ok);
        assert!(nu.iter().all(|&p| p > 0.0 && p < 1.0));
        let mut zb = ptr::null_mut();
        assert_eq!(ibp_vi_binarize(v, 0.5, &mut zb), IbpStatus::Ok);
        assert_eq!(ibp_features_k(zb), 3);
        ibp_features_free(zb);
        ibp_vi_result_free(v);
        ibp_dataset_free(ds);
    }
}

#[test]
fn null_handles_are_rejected() {
    unsafe {
        assert_eq!(ibp_dataset_n_rows(ptr::null()), 0);
        ibp_dataset_free(ptr::null_mut());
        let mut out = ptr::null_mut();
        assert_eq!(ibp_gibbs_run(ptr::null(), ptr::null(), &mut out), IbpStatus::NullPointer);
        assert!(last_error().contains("null"));
    }
}

#[test]
fn header_is_generated() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/ibpcat.h")).unwrap();
    for name in ["ibp_dataset_new", "ibp_gibbs_run", "ibp_vi_run", "IBP_STATUS_PANIC", "typedef struct IbpDataset"] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
