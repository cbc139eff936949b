use std::ffi::{c_char, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use distcomp_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { dc_last_error(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

/// Two agents, `M = 3`, `N = 2`.
fn system() -> *mut DcSystem {
    let h = [
        1.0, 0.2, //
        -0.3, 0.8, //
        0.5, 0.5, //
        0.9, -0.1, //
        0.1, 1.1, //
        -0.7, 0.4,
    ];
    let mut s = ptr::null_mut();
    assert_eq!(
        unsafe { dc_system_new(h.as_ptr(), 2, 3, 2, 0.2, 0.5, &mut s) },
        DcStatus::Ok
    );
    s
}

#[test]
fn costs_and_quantizer() {
    let mut total = 0u64;
    unsafe {
        assert_eq!(dc_cost_global(64, 6, 4, 200, &mut total), DcStatus::Ok);
        assert_eq!(total, 1444);
        assert_eq!(dc_cost_local(6, 4, 200, &mut total), DcStatus::Ok);
        assert_eq!(total, 840);

        let (mut idx, mut val) = (0u64, 0.0);
        assert_eq!(dc_quantize(2, 1.0, 0.3, &mut idx, &mut val), DcStatus::Ok);
        assert_eq!((idx, val), (2, 0.25));
        assert_eq!(dc_quantize(0, 1.0, 0.3, &mut idx, &mut val), DcStatus::InvalidInput);
        assert!(last_error().contains("bit count"));
        assert_eq!(dc_cost_local(6, 4, 200, ptr::null_mut()), DcStatus::NullPointer);
        assert!(last_error().contains("out_total"));
    }
}

#[test]
fn evd_round_trip_through_estimator() {
    let s = system();
    unsafe {
        let mut p = ptr::null_mut();
        assert_eq!(dc_policy_evd(s, 2, &mut p), DcStatus::Ok);
        let mut k_max = 0;
        assert_eq!(dc_policy_k_max(p, &mut k_max), DcStatus::Ok);
        assert_eq!(k_max, 2);
        let mut est = ptr::null_mut();
        assert_eq!(dc_estimator_new(s, p, &mut est), DcStatus::Ok);

        let (mut d1, mut d2) = (0.0, 0.0);
        assert_eq!(dc_estimator_mse(est, 1, &mut d1), DcStatus::Ok);
        assert_eq!(dc_estimator_mse(est, 2, &mut d2), DcStatus::Ok);
        assert!(d2 <= d1 && d2 > 0.0);

        // compress a noiseless observation of x = (1, -1) and estimate it back
        let ys = [[1.0 - 0.2, -0.3 - 0.8, 0.0], [0.9 + 0.1, 0.1 - 1.1, -0.7 - 0.4]];
        let mut received = [0.0; 4];
        for (i, y) in ys.iter().enumerate() {
            assert_eq!(
                dc_policy_compress(p, i, 2, y.as_ptr(), received[2 * i..].as_mut_ptr()),
                DcStatus::Ok
            );
        }
        let mut x = [0.0; 2];
        assert_eq!(
            dc_estimator_estimate(est, 2, received.as_ptr(), x.as_mut_ptr()),
            DcStatus::Ok
        );
        assert!(x[0] > 0.3 && x[1] < -0.3, "{x:?}");

        assert_eq!(dc_estimator_mse(est, 3, &mut d1), DcStatus::InvalidInput);
        assert_eq!(
            dc_policy_compress(p, 2, 1, ys[0].as_ptr(), received.as_mut_ptr()),
            DcStatus::InvalidInput
        );

        dc_estimator_free(est);
        dc_policy_free(p);
        dc_system_free(s);
    }
}

#[test]
fn bcd_beats_evd_at_one_stage() {
    let s = system();
    unsafe {
        let (mut e, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(dc_policy_evd(s, 1, &mut e), DcStatus::Ok);
        assert_eq!(dc_policy_bcd(s, 1, &mut b), DcStatus::Ok);
        let (mut ee, mut eb) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(dc_estimator_new(s, e, &mut ee), DcStatus::Ok);
        assert_eq!(dc_estimator_new(s, b, &mut eb), DcStatus::Ok);
        let (mut de, mut db) = (0.0, 0.0);
        dc_estimator_mse(ee, 1, &mut de);
        dc_estimator_mse(eb, 1, &mut db);
        assert!(db <= de + 1e-12, "bcd {db} evd {de}");
        for h in [ee, eb] {
            dc_estimator_free(h);
        }
        dc_policy_free(e);
        dc_policy_free(b);
        dc_system_free(s);
    }
}

#[test]
fn bad_inputs_report_errors() {
    unsafe {
        let mut s = ptr::null_mut();
        let h = [1.0, f64::NAN];
        assert_eq!(
            dc_system_new(h.as_ptr(), 1, 1, 2, 0.0, 1.0, &mut s),
            DcStatus::InvalidInput
        );
        assert!(s.is_null());
        assert_eq!(
            dc_system_new(ptr::null(), 1, 1, 2, 0.0, 1.0, &mut s),
            DcStatus::NullPointer
        );
        assert_eq!(
            dc_policy_evd(ptr::null(), 1, &mut ptr::null_mut()),
            DcStatus::NullPointer
        );

        let mut net = ptr::null_mut();
        let missing = CString::new("/nonexistent/policy.ckpt").unwrap();
        assert_eq!(dc_network_load(missing.as_ptr(), &mut net), DcStatus::Io);
        assert!(last_error().contains("/nonexistent/policy.ckpt"));

        // freeing null handles is a no-op
        dc_system_free(ptr::null_mut());
        dc_policy_free(ptr::null_mut());
        dc_network_free(ptr::null_mut());
        dc_estimator_free(ptr::null_mut());
    }
    // a short buffer still gets a terminated prefix and the full length
    let mut buf = [1 as c_char; 4];
    let n = unsafe { dc_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 3);
    assert_eq!(buf[3], 0);
}

#[test]
fn network_checkpoint_through_the_c_api() {
    use distcomp::network::{checkpoint, Architecture, PolicyNetwork, RangeMode};
    use distcomp::RngStream;

    let dir = tempfile::tempdir().unwrap();
    let arch = Architecture {
        m: 3,
        n: 2,
        agents: 2,
        k_max: 2,
        hidden: vec![4],
        tied_heads: false,
    };
    let mut net = PolicyNetwork::new(arch, RangeMode::Trainable, &RngStream::new(1, "ffi")).unwrap();
    net.ranges.fill(2.0);
    let path = dir.path().join("policy.ckpt");
    checkpoint::save(&net, &Default::default(), &path).unwrap();

    let s = system();
    unsafe {
        let mut handle = ptr::null_mut();
        let c_path = CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(
            dc_network_load(c_path.as_ptr(), &mut handle),
            DcStatus::Ok,
            "{}",
            last_error()
        );
        let mut p = ptr::null_mut();
        assert_eq!(dc_network_policy(handle, s, &mut p), DcStatus::Ok, "{}", last_error());
        let mut k = 0;
        dc_policy_k_max(p, &mut k);
        assert_eq!(k, 2);
        dc_policy_free(p);
        dc_network_free(handle);
        dc_system_free(s);
    }
}

fn target_dir() -> PathBuf {
    // .../target/<profile>/deps/c_api-<hash>
    let exe = std::env::current_exe().unwrap();
    exe.parent().unwrap().parent().unwrap().to_path_buf()
}

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

#[test]
fn header_compiles_and_links_from_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "distcomp.h"
int main(void) {
    uint64_t total = 0;
    if (dc_cost_global(64, 6, 4, 200, &total) != DC_STATUS_OK || total != 1444) return 1;
    double h[6] = {1.0, 0.0, 0.0, 1.0, 0.5, 0.5};
    DcSystem *s = NULL;
    if (dc_system_new(h, 1, 3, 2, 0.0, 1.0, &s) != DC_STATUS_OK) return 2;
    DcPolicy *p = NULL;
    if (dc_policy_evd(s, 2, &p) != DC_STATUS_OK) return 3;
    DcEstimator *e = NULL;
    if (dc_estimator_new(s, p, &e) != DC_STATUS_OK) return 4;
    double mse = 0.0;
    if (dc_estimator_mse(e, 2, &mse) != DC_STATUS_OK) return 5;
    if (dc_quantize(0, 1.0, 0.0, NULL, NULL) != DC_STATUS_INVALID_INPUT) return 6;
    char msg[64];
    if (dc_last_error(msg, sizeof msg) == 0) return 7;
    printf("%.6f\n", mse);
    dc_estimator_free(e);
    dc_policy_free(p);
    dc_system_free(s);
    return 0;
}
"#,
    )
    .unwrap();
    let lib = target_dir().join("libdistcomp_ffi.a");
    let exe = dir.path().join("main");
    let mut cmd = Command::new("cc");
    cmd.arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(header_dir())
        .arg(&src);
    if lib.exists() {
        cmd.arg(&lib).args(["-lpthread", "-ldl", "-lm"]).arg("-o").arg(&exe);
    } else {
        // the static archive is only produced when the library itself is built
        cmd.arg("-fsyntax-only");
    }
    let out = match cmd.output() {
        Ok(o) => o,
        Err(e) => {
            eprintln!("skipping: no C compiler ({e})");
            return;
        }
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    if lib.exists() {
        let run = Command::new(&exe).output().unwrap();
        assert!(run.status.success(), "exit {:?}", run.status.code());
        // M=3 identity-ish channel with K=N recovers the centralized bound (0 < mse < 2)
        let mse: f64 = String::from_utf8_lossy(&run.stdout).trim().parse().unwrap();
        assert!(mse > 0.0 && mse < 2.0);
    }
}
