//! Shared fixtures for the integration suites. Not every suite uses every
//! helper, so dead-code analysis is silenced for this module.
#![allow(dead_code)]

use dseg::gradcheck::max_rel_error;
use dseg::tensor::{Ctx, Elem, Mode, Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Train-mode context without a tape, for forward-only finite differences.
pub fn fwd_ctx<'a, T: Elem>() -> Ctx<'a, T> {
    Ctx { tape: None, mode: Mode::Train }
}

/// Run one forward+backward of `f` (which must end in a scalar) and compare
/// the analytic gradient of `wrt` against central finite differences.
pub fn check_grad<F>(wrt: &Tensor<f64>, forward: F, tol: f64, what: &str)
where
    F: Fn(&Ctx<'_, f64>) -> Tensor<f64>,
{
    wrt.set_requires_grad(true);
    wrt.zero_grad();
    let tape = Tape::new();
    let ctx = Ctx { tape: Some(&tape), mode: Mode::Train };
    let root = forward(&ctx);
    tape.backward(&root).unwrap();
    let analytic = wrt.grad().unwrap_or_else(|| panic!("{what}: no gradient reached the input"));
    let err = max_rel_error(wrt, &analytic, || forward(&fwd_ctx()).item(), FD_STEP);
    assert!(err <= tol, "{what}: gradient rel. err {err:.3e} exceeds {tol:.1e}");
}
