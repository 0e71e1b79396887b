//! Dense symmetric linear algebra used by the SPD layers.

mod matrix;
mod qr;
mod sym;

pub use matrix::{dot, Matrix};
pub use qr::thin_qr;
pub use sym::{
    clamp_fn, eig_fn_backward, mat_exp_sym, mat_log_spd, sym_eig, EigPair, SymMatrix, DEGENERATE_GAP,
    MAX_EIG_DIM, MAX_SWEEPS,
};
pub(crate) use sym::log_from_eig;
