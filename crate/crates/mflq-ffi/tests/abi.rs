//! Exercises every exported symbol of the C ABI, including error paths,
//! and keeps the handwritten header in sync with the implementation.

use std::ffi::{CStr, CString};
use std::fs;
use std::path::Path;
use std::ptr;

use mflq_ffi::*;

const SCALAR_BASE: &str = r#"
n = 1
m = 1
A = [[-1.0]]
Abar = [[0.0]]
B = [[1.0]]
Bbar = [[0.0]]
C = [[0.0]]
Cbar = [[0.0]]
D = [[0.0]]
Dbar = [[0.0]]
Q = [[1.0]]
Qbar = [[0.0]]
S = [[0.0]]
Sbar = [[0.0]]
R = [[1.0]]
Rbar = [[0.0]]
"#;

const NOISY_RL: &str = r#"
n = 1
m = 1
seed = 19
A = [[-1.0]]
Abar = [[0.0]]
B = [[1.0]]
Bbar = [[0.0]]
C = [[0.5]]
Cbar = [[0.0]]
D = [[0.0]]
Dbar = [[0.0]]
Q = [[1.0]]
Qbar = [[0.0]]
S = [[0.0]]
Sbar = [[0.0]]
R = [[1.0]]
Rbar = [[0.0]]

[gain]
K = [[-1.0]]
Khat = [[-1.0]]

[grid]
dt = 0.01
steps = 300

[rl]
states = 3
paths = 2000
epsilon = 0.05
max_iter = 20
state_range = [0.5, 3.0]
"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(mflq_last_error()) }
        .to_str()
        .unwrap()
        .to_owned()
}

fn parse(text: &str) -> *mut MflqProblem {
    let c_text = CString::new(text).unwrap();
    let mut problem: *mut MflqProblem = ptr::null_mut();
    let status = unsafe { mflq_problem_parse(c_text.as_ptr(), &mut problem) };
    assert_eq!(status, MflqStatus::Ok, "{}", last_error());
    assert!(!problem.is_null());
    problem
}

#[test]
fn problem_lifecycle_and_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s0.toml");
    fs::write(&path, SCALAR_BASE).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();

    let mut problem: *mut MflqProblem = ptr::null_mut();
    let status = unsafe { mflq_problem_load(c_path.as_ptr(), &mut problem) };
    assert_eq!(status, MflqStatus::Ok, "{}", last_error());
    assert!(last_error().is_empty());
    unsafe {
        assert_eq!(mflq_problem_state_dim(problem), 1);
        assert_eq!(mflq_problem_control_dim(problem), 1);
        assert_eq!(mflq_problem_warning_count(problem), 0);
        assert!(mflq_problem_warning(problem, 0).is_null());
        mflq_problem_free(problem);
        mflq_problem_free(ptr::null_mut());
    }

    // Null-handle accessors degrade to zero rather than crashing.
    unsafe {
        assert_eq!(mflq_problem_state_dim(ptr::null()), 0);
        assert_eq!(mflq_problem_control_dim(ptr::null()), 0);
        assert_eq!(mflq_problem_warning_count(ptr::null()), 0);
    }
}

#[test]
fn load_failures_set_the_thread_local_message() {
    let mut problem: *mut MflqProblem = ptr::null_mut();
    let missing = CString::new("/nonexistent/missing.toml").unwrap();
    let status = unsafe { mflq_problem_load(missing.as_ptr(), &mut problem) };
    assert_eq!(status, MflqStatus::Usage);
    assert!(last_error().contains("missing.toml"), "{}", last_error());
    assert!(problem.is_null());

    let garbage = CString::new("n = oops").unwrap();
    let status = unsafe { mflq_problem_parse(garbage.as_ptr(), &mut problem) };
    assert_eq!(status, MflqStatus::Usage);
    assert!(last_error().contains("parse"), "{}", last_error());

    let status = unsafe { mflq_problem_parse(ptr::null(), &mut problem) };
    assert_eq!(status, MflqStatus::Usage);
    assert!(last_error().contains("null"), "{}", last_error());

    let text = CString::new(SCALAR_BASE).unwrap();
    let status = unsafe { mflq_problem_parse(text.as_ptr(), ptr::null_mut()) };
    assert_eq!(status, MflqStatus::Usage);
}

#[test]
fn asymmetric_weights_surface_as_warnings() {
    let text = SCALAR_BASE.replace("R = [[1.0]]", "R = [[-1.0]]");
    let problem = parse(&text);
    unsafe {
        assert_eq!(mflq_problem_warning_count(problem), 1);
        let w = CStr::from_ptr(mflq_problem_warning(problem, 0)).to_str().unwrap();
        assert!(w.contains("definiteness"), "{w}");
        assert!(mflq_problem_warning(problem, 1).is_null());
        mflq_problem_free(problem);
    }
}

#[test]
fn model_based_solve_returns_the_scalar_solution() {
    let problem = parse(SCALAR_BASE);
    let mut solution: *mut MflqSolution = ptr::null_mut();
    let status = unsafe { mflq_solve_model_based(problem, 0.0, 0, &mut solution) };
    assert_eq!(status, MflqStatus::Ok, "{}", last_error());

    let root = std::f64::consts::SQRT_2 - 1.0;
    unsafe {
        assert_eq!(mflq_solution_state_dim(solution), 1);
        assert_eq!(mflq_solution_control_dim(solution), 1);
        assert!(mflq_solution_iterations(solution) >= 1);

        let mut buf = [0.0_f64];
        for (which, expect) in [
            (MflqMatrix::P, root),
            (MflqMatrix::Phat, root),
            (MflqMatrix::K, -root),
            (MflqMatrix::Khat, -root),
        ] {
            let status = mflq_solution_get_matrix(solution, which, buf.as_mut_ptr(), 1);
            assert_eq!(status, MflqStatus::Ok);
            assert!((buf[0] - expect).abs() < 1e-10, "{which:?}: {}", buf[0]);
        }

        let (mut rp, mut rph) = (f64::NAN, f64::NAN);
        let status = mflq_solution_residuals(solution, &mut rp, &mut rph);
        assert_eq!(status, MflqStatus::Ok);
        assert!(rp < 1e-10 && rph < 1e-10, "{rp}, {rph}");

        // Buffer-length mismatches are usage errors, not memory errors.
        let status = mflq_solution_get_matrix(solution, MflqMatrix::P, buf.as_mut_ptr(), 2);
        assert_eq!(status, MflqStatus::Usage);
        assert!(last_error().contains("1 doubles"), "{}", last_error());

        mflq_solution_free(solution);
        mflq_solution_free(ptr::null_mut());
        mflq_problem_free(problem);
    }
}

#[test]
fn trajectory_driven_solve_agrees_with_the_exact_root() {
    let problem = parse(NOISY_RL);
    let mut solution: *mut MflqSolution = ptr::null_mut();
    let status = unsafe { mflq_solve_trajectory_driven(problem, &mut solution) };
    assert_eq!(status, MflqStatus::Ok, "{}", last_error());
    // Positive root of p² + 1.75p − 1 = 0.
    let root = (-1.75_f64 + (1.75_f64 * 1.75 + 4.0).sqrt()) / 2.0;
    unsafe {
        let mut p = [0.0_f64];
        assert_eq!(
            mflq_solution_get_matrix(solution, MflqMatrix::P, p.as_mut_ptr(), 1),
            MflqStatus::Ok
        );
        assert!((p[0] - root).abs() < 0.1 * root, "P = {}", p[0]);
        mflq_solution_free(solution);
        mflq_problem_free(problem);
    }
}

#[test]
fn solver_failures_map_to_the_matching_status() {
    // Unstable plant, no gain: the auto zero start is not a stabilizer.
    let text = SCALAR_BASE.replace("A = [[-1.0]]", "A = [[2.0]]");
    let problem = parse(&text);
    let mut solution: *mut MflqSolution = ptr::null_mut();
    let status = unsafe { mflq_solve_model_based(problem, 0.0, 0, &mut solution) };
    assert_eq!(status, MflqStatus::Precondition);
    assert!(last_error().contains("stabilizer"), "{}", last_error());
    unsafe { mflq_problem_free(problem) };

    // Trajectory-driven without a [gain] block is a usage error.
    let problem = parse(SCALAR_BASE);
    let status = unsafe { mflq_solve_trajectory_driven(problem, &mut solution) };
    assert_eq!(status, MflqStatus::Usage);
    assert!(last_error().contains("[gain]"), "{}", last_error());
    unsafe { mflq_problem_free(problem) };

    // Noise-free trajectories cannot identify P: numerical failure.
    let text = format!(
        "{SCALAR_BASE}\n[gain]\nK = [[-1.0]]\nKhat = [[-1.0]]\n\n\
         [grid]\ndt = 0.01\nsteps = 400\n\n\
         [rl]\nstates = 3\npaths = 50\nstate_range = [0.5, 3.0]\n"
    );
    let problem = parse(&text);
    let status = unsafe { mflq_solve_trajectory_driven(problem, &mut solution) };
    assert_eq!(status, MflqStatus::Numerical);
    assert!(last_error().contains("rank"), "{}", last_error());
    unsafe { mflq_problem_free(problem) };

    // Null problem handles are usage errors.
    let status = unsafe { mflq_solve_model_based(ptr::null(), 0.0, 0, &mut solution) };
    assert_eq!(status, MflqStatus::Usage);
}

#[test]
fn standalone_residual_check_scores_candidates() {
    let problem = parse(SCALAR_BASE);
    let (mut rp, mut rph) = (f64::NAN, f64::NAN);

    // The zero candidate leaves exactly the state weights.
    let zero = [0.0_f64];
    let status = unsafe {
        mflq_check_residuals(problem, zero.as_ptr(), zero.as_ptr(), 1, &mut rp, &mut rph)
    };
    assert_eq!(status, MflqStatus::Ok, "{}", last_error());
    assert_eq!(rp, 1.0);
    assert_eq!(rph, 1.0);

    // The exact root scores (near) zero.
    let root = [std::f64::consts::SQRT_2 - 1.0];
    let status = unsafe {
        mflq_check_residuals(problem, root.as_ptr(), root.as_ptr(), 1, &mut rp, &mut rph)
    };
    assert_eq!(status, MflqStatus::Ok);
    assert!(rp < 1e-15 && rph < 1e-15, "{rp}, {rph}");

    // Dimension mismatches and null pointers are usage errors.
    let status = unsafe {
        mflq_check_residuals(problem, zero.as_ptr(), zero.as_ptr(), 2, &mut rp, &mut rph)
    };
    assert_eq!(status, MflqStatus::Usage);
    let status = unsafe {
        mflq_check_residuals(problem, ptr::null(), zero.as_ptr(), 1, &mut rp, &mut rph)
    };
    assert_eq!(status, MflqStatus::Usage);
    unsafe { mflq_problem_free(problem) };
}

/// The handwritten header and the implementation must export the same
/// symbol set.
#[test]
fn header_and_implementation_export_the_same_symbols() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let source = fs::read_to_string(root.join("src/lib.rs")).unwrap();
    let header = fs::read_to_string(root.join("include/mflq.h")).unwrap();

    let mut exported: Vec<String> = source
        .lines()
        .filter_map(|line| {
            let line = line.trim();
            let name = line
                .strip_prefix("pub unsafe extern \"C\" fn ")
                .or_else(|| line.strip_prefix("pub extern \"C\" fn "))?;
            Some(name.split('(').next().unwrap().to_owned())
        })
        .collect();
    assert!(!exported.is_empty());
    exported.sort();
    exported.dedup();

    for name in &exported {
        assert!(
            header.contains(&format!("{name}(")),
            "{name} is exported but missing from include/mflq.h"
        );
    }

    // Every `mflq_...(` use in the header (declarations and examples alike)
    // must name a real export.
    let bytes = header.as_bytes();
    let mut pos = 0;
    while let Some(found) = header[pos..].find("mflq_") {
        let start = pos + found;
        let mut end = start;
        while end < bytes.len() && (bytes[end].is_ascii_alphanumeric() || bytes[end] == b'_') {
            end += 1;
        }
        if bytes.get(end) == Some(&b'(') {
            let name = &header[start..end];
            assert!(
                exported.iter().any(|e| e == name),
                "header references {name} which the implementation does not export"
            );
        }
        pos = end;
    }
}

/// If a C compiler is available, the header must stand alone as valid C.
#[test]
fn header_compiles_as_c_when_a_compiler_is_present() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = root.join("include/mflq.h");
    let dir = tempfile::tempdir().unwrap();
    let main_c = dir.path().join("use_header.c");
    fs::write(&main_c, "#include \"mflq.h\"\nint main(void) { return MFLQ_OK; }\n").unwrap();
    for compiler in ["cc", "gcc", "clang"] {
        let result = std::process::Command::new(compiler)
            .arg("-fsyntax-only")
            .arg("-I")
            .arg(header.parent().unwrap())
            .arg(&main_c)
            .output();
        if let Ok(out) = result {
            assert!(
                out.status.success(),
                "{compiler} rejected the header:\n{}",
                String::from_utf8_lossy(&out.stderr)
            );
            return;
        }
    }
    eprintln!("no C compiler found; skipped the syntax check");
}
