use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use deepide_ffi::*;

fn last_error() -> String {
    let p = deepide_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn unit_grid(n: usize) -> *mut DeepideGrid {
    let mut g = ptr::null_mut();
    let (lo, hi) = (0.0, 1.0);
    assert_eq!(unsafe { deepide_grid_uniform(1, &lo, &hi, &n, &mut g) }, DeepideStatus::Ok);
    g
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(deepide_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn errors_set_thread_local_message() {
    deepide_clear_last_error();
    assert!(deepide_last_error_message().is_null());
    let mut g = ptr::null_mut();
    let (lo, hi, n) = (1.0, 0.0, 3usize);
    assert_eq!(unsafe { deepide_grid_uniform(1, &lo, &hi, &n, &mut g) }, DeepideStatus::InvalidArgument);
    assert!(g.is_null());
    assert!(last_error().contains("lower < upper"));

    assert_eq!(unsafe { deepide_grid_uniform(1, &0.0, &1.0, &n, ptr::null_mut()) }, DeepideStatus::NullPointer);
    // another thread sees its own slot
    std::thread::spawn(|| assert!(deepide_last_error_message().is_null())).join().unwrap();
}

#[test]
fn forward_train_and_hamiltonian() {
    let g = unit_grid(4);
    let init = [0.1, -0.2, 0.3, 0.0, 0.5, 0.5, -0.5, 0.2];
    let target = [0.2, 0.1, 0.0, -0.1, 0.4, 0.3, 0.2, 0.1];
    let mut data = ptr::null_mut();
    assert_eq!(unsafe { deepide_training_set_new(g, g, 2, init.as_ptr(), target.as_ptr(), &mut data) }, DeepideStatus::Ok);
    assert_eq!(unsafe { deepide_training_set_len(data) }, 2);
    assert_eq!(unsafe { deepide_training_set_grid_len(data) }, 4);

    let mut ctrl = ptr::null_mut();
    let mut cls = ptr::null_mut();
    assert_eq!(unsafe { deepide_control_zeros(data, 1.0, 10, &mut ctrl) }, DeepideStatus::Ok);
    assert_eq!(unsafe { deepide_classifier_identity(data, &mut cls) }, DeepideStatus::Ok);

    // zero control with σ(0) = 0 leaves the data in place
    let mut term = [0.0; 8];
    assert_eq!(unsafe { deepide_forward(data, ctrl, DeepideActivation::Tanh, term.as_mut_ptr(), 8) }, DeepideStatus::Ok);
    assert_eq!(term, init);
    assert_eq!(unsafe { deepide_forward(data, ctrl, DeepideActivation::Tanh, term.as_mut_ptr(), 7) }, DeepideStatus::ShapeMismatch);

    let (mut l0, mut l1, mut res) = (0.0, 0.0, [0.0; 4]);
    let st = unsafe {
        deepide_evaluate(
            data,
            ctrl,
            cls,
            DeepideActivation::Sigmoid,
            DeepidePredictor::Identity,
            DeepideLoss::Mse,
            &mut l0,
            res.as_mut_ptr(),
        )
    };
    assert_eq!(st, DeepideStatus::Ok);
    let st = unsafe {
        deepide_train(data, ctrl, cls, DeepideActivation::Sigmoid, DeepidePredictor::Identity, DeepideLoss::Mse, 1.0, 300, &mut l1)
    };
    assert_eq!(st, DeepideStatus::Ok);
    assert!(l1 <= 0.01 * l0, "{l0} -> {l1}");

    let bx = DeepideBox { a_min: -1.0, a_max: 1.0, b_min: -1.0, b_max: 1.0 };
    let r = [0.0; 8];
    let mut h = f64::NAN;
    let st = unsafe { deepide_hjb_hamiltonian(g, 2, init.as_ptr(), r.as_ptr(), bx, DeepideActivation::Sigmoid, &mut h) };
    assert_eq!(st, DeepideStatus::Ok);
    assert_eq!(h, 0.0);
    let bad = DeepideBox { a_min: 1.0, ..bx };
    let st = unsafe { deepide_hjb_hamiltonian(g, 2, init.as_ptr(), r.as_ptr(), bad, DeepideActivation::Sigmoid, &mut h) };
    assert_eq!(st, DeepideStatus::InvalidArgument);

    unsafe {
        deepide_classifier_free(cls);
        deepide_control_free(ctrl);
        deepide_training_set_free(data);
        deepide_grid_free(g);
        // NULL is accepted everywhere
        deepide_grid_free(ptr::null_mut());
        deepide_training_set_free(ptr::null_mut());
    }
}

#[test]
fn loads_the_shipped_bundle() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/toy2");
    let path = CString::new(root.to_str().unwrap()).unwrap();
    let mut data = ptr::null_mut();
    assert_eq!(unsafe { deepide_training_set_load(path.as_ptr(), &mut data) }, DeepideStatus::Ok);
    assert_eq!(unsafe { deepide_training_set_len(data) }, 2);
    unsafe { deepide_training_set_free(data) };

    let missing = CString::new("/no/such/bundle").unwrap();
    assert_eq!(unsafe { deepide_training_set_load(missing.as_ptr(), &mut data) }, DeepideStatus::Io);
}

/// Compiles `tests/smoke.c` against the generated header and the static
/// library and runs it.
#[test]
fn c_program_links_against_header() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("deepide.h").exists(), "header not generated");
    // the test binary lives in target/<profile>/deps
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libdeepide_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let out = std::env::temp_dir().join(format!("deepide_smoke_{}", std::process::id()));
    let status = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let run = Command::new(&out).output().unwrap();
    let _ = std::fs::remove_file(&out);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
