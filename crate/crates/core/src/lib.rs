//! Exact symbolic machinery for decay certificates of oscillatory kernels
//! `K(u) = int e^{i(P_nu(u+z) - P_mu(z))} Psi(u, z) dz` with homogeneous
//! phases adapted to a nondegenerate quadratic form.

pub mod coeffcalc;
pub mod config;
pub mod lemmas;
pub mod matrixcert;
pub mod oscint;
pub mod polyring;
pub mod quadform;
