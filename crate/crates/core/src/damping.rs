//! Levenberg-style step damping shared by the iterative solvers.
//!
//! Each outer iteration takes one damped Gauss-Newton step: the candidate is
//! accepted only if the weighted cost, evaluated with the iteration's frozen
//! correspondences and weights, does not increase. A rejected step multiplies
//! the damping by 10 and retries (up to [`MAX_RETRIES`] times); a successful
//! step divides it by 2.

/// One outer-iteration record: weighted cost before and after the accepted
/// (or finally rejected) step, at the iteration's own association.
#[derive(Debug, Clone, Copy)]
pub struct CostStep {
    pub cost_before: f64,
    pub cost_after: f64,
    pub damping: f64,
    pub accepted: bool,
}

impl CostStep {
    /// Damped steps must never increase the weighted cost they were accepted
    /// against.
    pub fn is_non_increasing(&self) -> bool {
        !self.accepted || self.cost_after <= self.cost_before
    }
}

pub(crate) const MAX_RETRIES: usize = 5;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Damping {
    pub lambda: f64,
}

impl Damping {
    pub fn new() -> Self {
        Self { lambda: 1e-8 }
    }

    pub fn on_accept(&mut self) {
        self.lambda = (self.lambda / 2.0).max(1e-12);
    }

    pub fn on_reject(&mut self) {
        self.lambda *= 10.0;
    }
}
