//! Shared fixtures for the criterion benchmarks.

use symsde_core::expr::Expr;
use symsde_core::mc::SimulationConfig;
use symsde_core::models::{bm2d, lotka_volterra, v_beta, LotkaVolterraParams};
use symsde_core::symmetry::InfinitesimalSymmetry;
use symsde_core::SdeModel;

pub fn planar_model() -> SdeModel {
    bm2d()
}

pub fn lv_model() -> SdeModel {
    lotka_volterra(&LotkaVolterraParams {
        alpha: 1.0,
        beta: 1.0,
        gamma: 1.0,
        delta: 1.0,
        sigma_tilde: 1.0,
    })
    .expect("valid parameters")
}

pub fn rotational_symmetry() -> InfinitesimalSymmetry {
    v_beta(&Expr::var("z")).expect("registry symmetry")
}

pub fn small_sim(n_paths: usize) -> SimulationConfig {
    SimulationConfig {
        n_paths,
        dt: 1e-3,
        horizon: 1.0,
        seed: 7,
        chunk_size: 4096,
    }
}
