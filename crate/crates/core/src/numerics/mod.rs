//! Numerical kernels shared by the estimation modules.

pub mod normal;
pub mod optim;
pub mod quadrature;
pub mod roots;
pub mod sobol;
pub mod splines;
