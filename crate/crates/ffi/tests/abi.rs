use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use gjn_ffi::*;

const TANDEM: &str = r#"
routing = [[0.0, 1.0], [0.0, 0.0]]

[[stations]]
arrival = { family = "exponential", rate = 1.0 }
service = { family = "exponential", rate = 1.0 }

[[stations]]
service = { family = "exponential", rate = 1.0 }
"#;

fn network(text: &str) -> *mut GjnNetwork {
    let text = CString::new(text).unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { gjn_network_from_toml(text.as_ptr(), &mut net) }, GjnStatus::Ok);
    net
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(gjn_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn tandem_round_trip() {
    let base = network(TANDEM);
    let mut dim = 0;
    assert_eq!(unsafe { gjn_network_num_stations(base, &mut dim) }, GjnStatus::Ok);
    assert_eq!(dim, 2);

    let kappa0 = [1.0, 1.0];
    let mut member = ptr::null_mut();
    assert_eq!(
        unsafe { gjn_heavy_traffic_member(base, kappa0.as_ptr(), 2, 400, &mut member) },
        GjnStatus::Ok
    );
    let mut rho = [0.0; 2];
    assert_eq!(
        unsafe { gjn_network_traffic(member, ptr::null_mut(), rho.as_mut_ptr(), 2) },
        GjnStatus::Ok
    );
    assert!(rho.iter().all(|r| (r - 0.95).abs() < 1e-12));

    let z = [1.0, 1.0];
    let mut bound = 0.0;
    assert_eq!(
        unsafe { gjn_drain_time_bound(member, z.as_ptr(), 2, &mut bound) },
        GjnStatus::Ok
    );
    // w = (2, 1), drain rate 0.05.
    assert!((bound - 60.0).abs() < 1e-9);

    let mut rbm = ptr::null_mut();
    assert_eq!(
        unsafe { gjn_rbm_from_heavy_traffic(base, kappa0.as_ptr(), 2, &mut rbm) },
        GjnStatus::Ok
    );
    let mut gamma = [0.0; 4];
    assert_eq!(unsafe { gjn_rbm_covariance(rbm, gamma.as_mut_ptr(), 4) }, GjnStatus::Ok);
    assert_eq!(gamma, [2.0, -1.0, -1.0, 2.0]);
    let mut eta = [0.0; 2];
    assert_eq!(
        unsafe { gjn_rbm_product_form_rates(rbm, eta.as_mut_ptr(), 2) },
        GjnStatus::Ok
    );
    assert!(eta.iter().all(|e| (e - 1.0).abs() < 1e-12));

    let mut samples = vec![0.0; 200];
    assert_eq!(
        unsafe { gjn_rbm_stationary_sample(rbm, 100, 3, samples.as_mut_ptr(), 200) },
        GjnStatus::Ok
    );
    assert!(samples.iter().all(|v| *v >= 0.0));

    unsafe {
        gjn_rbm_free(rbm);
        gjn_network_free(member);
        gjn_network_free(base);
    }
}

#[test]
fn errors_carry_codes_and_messages() {
    let bad =
        CString::new("routing = [[1.5]]\n[[stations]]\nservice = { family = \"exponential\", rate = 1.0 }").unwrap();
    let mut net = ptr::null_mut();
    let status = unsafe { gjn_network_from_toml(bad.as_ptr(), &mut net) };
    assert_eq!(status, GjnStatus::Parse);
    assert!(net.is_null());
    assert!(!last_error().is_empty());

    let mut dim = 0;
    assert_eq!(
        unsafe { gjn_network_num_stations(ptr::null(), &mut dim) },
        GjnStatus::NullPointer
    );
    assert_eq!(last_error(), "net is null");

    // Base with rho = 0.5 is not critical.
    let base = network(&TANDEM.replacen("rate = 1.0", "rate = 0.5", 1));
    let kappa0 = [1.0, 1.0];
    let mut rbm = ptr::null_mut();
    assert_eq!(
        unsafe { gjn_rbm_from_heavy_traffic(base, kappa0.as_ptr(), 2, &mut rbm) },
        GjnStatus::NotCritical
    );

    let mut short = [0.0; 1];
    assert_eq!(
        unsafe { gjn_network_traffic(base, short.as_mut_ptr(), ptr::null_mut(), 1) },
        GjnStatus::BufferTooSmall
    );
    unsafe { gjn_network_free(base) };

    let name = unsafe { CStr::from_ptr(gjn_status_str(GjnStatus::NoProductForm)) };
    assert_eq!(name.to_str().unwrap(), "no product form");
}

#[test]
fn deterministic_tandem_has_no_product_form() {
    let base = network(&TANDEM.replacen(
        "service = { family = \"exponential\", rate = 1.0 }",
        "service = { family = \"deterministic\", value = 1.0 }",
        1,
    ));
    let kappa0 = [1.0, 1.0];
    let mut rbm = ptr::null_mut();
    assert_eq!(
        unsafe { gjn_rbm_from_heavy_traffic(base, kappa0.as_ptr(), 2, &mut rbm) },
        GjnStatus::Ok
    );
    let mut eta = [0.0; 2];
    assert_eq!(
        unsafe { gjn_rbm_product_form_rates(rbm, eta.as_mut_ptr(), 2) },
        GjnStatus::NoProductForm
    );
    unsafe {
        gjn_rbm_free(rbm);
        gjn_network_free(base);
    }
}

#[test]
fn explicit_rbm_and_reflection() {
    let beta = [-1.0];
    let gamma = [2.0];
    let routing = [0.0];
    let mut rbm = ptr::null_mut();
    assert_eq!(
        unsafe { gjn_rbm_new(beta.as_ptr(), gamma.as_ptr(), routing.as_ptr(), 1, &mut rbm) },
        GjnStatus::Ok
    );
    let mut drift = [0.0];
    assert_eq!(unsafe { gjn_rbm_drift(rbm, drift.as_mut_ptr(), 1) }, GjnStatus::Ok);
    assert_eq!(drift, [-1.0]);
    unsafe { gjn_rbm_free(rbm) };

    let times = [0.0, 1.0, 2.0, 3.0];
    let x = [1.0, -1.0, 0.5, -2.0];
    let (mut y, mut q) = ([0.0; 4], [0.0; 4]);
    let status = unsafe {
        gjn_reflect(
            times.as_ptr(),
            x.as_ptr(),
            4,
            1,
            routing.as_ptr(),
            y.as_mut_ptr(),
            q.as_mut_ptr(),
        )
    };
    assert_eq!(status, GjnStatus::Ok);
    assert_eq!(y, [0.0, 1.0, 1.0, 2.0]);
    assert_eq!(q, [1.0, 0.0, 1.5, 0.0]);
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/gjn.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in [
        "gjn_network_from_toml",
        "gjn_rbm_product_form_rates",
        "gjn_reflect",
        "GJN_STATUS_NO_PRODUCT_FORM",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(out) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    else {
        eprintln!("no C compiler found; skipped syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
