//! Risk-bounded safety verification of polynomial trajectories and tubes
//! under probabilistic uncertainty.

pub mod contour;
pub mod montecarlo;
pub mod polyalg;
pub mod scenario;
pub mod sdp;
pub mod soscert;
pub mod uncertainty;
pub mod verifier;
