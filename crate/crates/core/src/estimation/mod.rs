//! Robust nonlinear least squares: single-frame pose optimization, stereo depth
//! initialization and multi-view map-point refinement.

mod point;
mod pose;
pub mod solver;

pub use solver::{levenberg_marquardt, levenberg_marquardt_observed, IterationLog, SolveOutcome};
pub use point::{refine_point, refine_point_with, refine_points, PointEstimate, PointOptions};
pub use pose::{optimize_pose, optimize_pose_with, PoseEstimate, PoseOptions};

use crate::error::{Error, Result};

/// Smallest usable stereo disparity, in pixels.
pub const DISPARITY_MIN: f64 = 0.5;

/// 95% quantile of the chi-square distribution with 2 degrees of freedom.
pub const CHI2_2DOF_95: f64 = 5.991;

/// Huber threshold matching the 2-DoF 95% quantile at 1 px noise.
pub const DEFAULT_HUBER_DELTA: f64 = 2.447;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RobustKernel {
    None,
    Huber { delta: f64 },
}

impl RobustKernel {
    pub fn huber(delta: f64) -> Result<Self> {
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::invalid(format!("huber delta {delta} must be > 0")));
        }
        Ok(RobustKernel::Huber { delta })
    }

    /// Robustified squared norm `rho(s)`; equals `s` inside the quadratic zone.
    pub fn rho(&self, s: f64) -> f64 {
        match *self {
            RobustKernel::None => s,
            RobustKernel::Huber { delta } => {
                if s <= delta * delta {
                    s
                } else {
                    2.0 * delta * s.sqrt() - delta * delta
                }
            }
        }
    }

    /// IRLS weight `rho'(s)`.
    pub fn weight(&self, s: f64) -> f64 {
        match *self {
            RobustKernel::None => 1.0,
            RobustKernel::Huber { delta } => {
                if s <= delta * delta {
                    1.0
                } else {
                    delta / s.sqrt()
                }
            }
        }
    }
}

impl Default for RobustKernel {
    fn default() -> Self {
        RobustKernel::Huber {
            delta: DEFAULT_HUBER_DELTA,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    /// Stop once an accepted step lowers the cost by less than this fraction.
    pub convergence_tol: f64,
    pub damping_init: f64,
    pub damping_scale: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            convergence_tol: 1e-8,
            damping_init: 1e-4,
            damping_scale: 10.0,
        }
    }
}

impl SolverConfig {
    pub fn pose() -> Self {
        Self::default()
    }

    pub fn point() -> Self {
        Self {
            max_iterations: 5,
            ..Self::default()
        }
    }

    pub fn bundle() -> Self {
        Self {
            max_iterations: 20,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations < 1 {
            return Err(Error::invalid("max_iterations must be >= 1"));
        }
        if !(self.convergence_tol > 0.0 && self.damping_init > 0.0 && self.damping_scale > 1.0) {
            return Err(Error::invalid(
                "tolerance and damping must be positive, damping_scale > 1",
            ));
        }
        Ok(())
    }
}

/// Depth from a rectified stereo pair: `fx * baseline / (uL - uR)`.
pub fn stereo_depth(fx: f64, baseline: f64, u_left: f64, u_right: f64) -> Result<f64> {
    stereo_depth_with_min(fx, baseline, u_left, u_right, DISPARITY_MIN)
}

pub fn stereo_depth_with_min(
    fx: f64,
    baseline: f64,
    u_left: f64,
    u_right: f64,
    disparity_min: f64,
) -> Result<f64> {
    let disparity = u_left - u_right;
    if !(disparity > disparity_min) {
        return Err(Error::UnreliableDisparity { disparity });
    }
    Ok(fx * baseline / disparity)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stereo_depth_substitution() {
        assert_eq!(stereo_depth(100.0, 0.1, 12.0, 10.0).unwrap(), 5.0);
    }

    #[test]
    fn stereo_depth_rejects_zero_disparity() {
        assert!(matches!(
            stereo_depth(100.0, 0.1, 10.0, 10.0),
            Err(Error::UnreliableDisparity { .. })
        ));
        assert!(stereo_depth(100.0, 0.1, 10.4, 10.0).is_err());
    }

    #[test]
    fn huber_is_continuous_at_threshold() {
        let k = RobustKernel::huber(2.0).unwrap();
        assert!((k.rho(4.0) - 4.0).abs() < 1e-15);
        assert!((k.rho(4.0 + 1e-9) - 4.0).abs() < 1e-8);
        assert_eq!(k.weight(16.0), 0.5);
        assert!(RobustKernel::huber(0.0).is_err());
    }

    #[test]
    fn solver_config_validation() {
        assert!(SolverConfig::default().validate().is_ok());
        let bad = SolverConfig {
            max_iterations: 0,
            ..SolverConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
