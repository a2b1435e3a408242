//! Precision policies for matrix multiplies, and the dynamic loss scaler used
//! by the mixed policy.
//!
//! There is no reduced-precision hardware on the CPU path, so `high` and
//! `mixed` are emulated by rounding matmul operands (and, for `mixed`,
//! results) onto the narrower format while master weights, norms, softmax
//! and the loss stay in the working precision.

use serde::{Deserialize, Serialize};

use crate::tensor::{Rounding, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// Full working-precision matmuls.
    #[default]
    Highest,
    /// TensorFloat-32 style matmuls (10 explicit mantissa bits).
    High,
    /// Half-precision forward/backward matmuls with loss scaling.
    Mixed,
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "highest" => Ok(Precision::Highest),
            "high" => Ok(Precision::High),
            "mixed" => Ok(Precision::Mixed),
            other => Err(format!("unknown precision `{other}` (highest|high|mixed)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExecContext {
    pub precision: Precision,
    pub matmul_operands: Rounding,
    pub matmul_output: Rounding,
    pub loss_scaling: bool,
}

impl Default for ExecContext {
    fn default() -> Self {
        Self {
            precision: Precision::Highest,
            matmul_operands: Rounding::None,
            matmul_output: Rounding::None,
            loss_scaling: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PrecisionSetup {
    pub ctx: ExecContext,
    pub warning: Option<String>,
}

/// Resolve a policy into an execution context for element type `T`.
///
/// `high` only has a meaning for 32-bit floats; for other element types it
/// degrades to `highest` and reports a warning.
pub fn apply_precision_policy<T: Scalar>(policy: Precision) -> PrecisionSetup {
    let base = ExecContext::default();
    let setup = match policy {
        Precision::Highest => PrecisionSetup {
            ctx: base,
            warning: None,
        },
        Precision::High if T::NAME == "f32" => PrecisionSetup {
            ctx: ExecContext {
                precision: Precision::High,
                matmul_operands: Rounding::Tf32,
                ..base
            },
            warning: None,
        },
        Precision::High => PrecisionSetup {
            ctx: base,
            warning: Some(format!(
                "precision `high` is not supported for {} tensors; running at `highest`",
                T::NAME
            )),
        },
        Precision::Mixed => PrecisionSetup {
            ctx: ExecContext {
                precision: Precision::Mixed,
                matmul_operands: Rounding::F16,
                matmul_output: Rounding::F16,
                loss_scaling: true,
            },
            warning: None,
        },
    };
    if let Some(w) = &setup.warning {
        log::warn!("{w}");
    }
    setup
}

/// Dynamic loss scaler: multiply the loss seed by `scale`, unscale gradients,
/// skip the step and back off on overflow, grow after a run of clean steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossScaler {
    pub scale: f64,
    pub growth_factor: f64,
    pub backoff_factor: f64,
    pub growth_interval: u64,
    pub good_steps: u64,
}

impl Default for LossScaler {
    fn default() -> Self {
        Self {
            scale: 65536.0,
            growth_factor: 2.0,
            backoff_factor: 0.5,
            growth_interval: 2000,
            good_steps: 0,
        }
    }
}

impl LossScaler {
    /// Record the outcome of one step; returns whether the step should be applied.
    pub fn update(&mut self, grads_finite: bool) -> bool {
        if grads_finite {
            self.good_steps += 1;
            if self.good_steps >= self.growth_interval {
                self.scale *= self.growth_factor;
                self.good_steps = 0;
            }
            true
        } else {
            self.scale = (self.scale * self.backoff_factor).max(1.0);
            self.good_steps = 0;
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn high_on_f64_degrades_with_warning() {
        let setup = apply_precision_policy::<f64>(Precision::High);
        assert_eq!(setup.ctx, ExecContext::default());
        assert!(setup.warning.unwrap().contains("not supported"));
    }

    #[test]
    fn high_on_f32_rounds_operands_only() {
        let setup = apply_precision_policy::<f32>(Precision::High);
        assert!(setup.warning.is_none());
        assert_eq!(setup.ctx.matmul_operands, Rounding::Tf32);
        assert_eq!(setup.ctx.matmul_output, Rounding::None);
    }

    #[test]
    fn scaler_backs_off_and_grows() {
        let mut s = LossScaler {
            growth_interval: 2,
            ..LossScaler::default()
        };
        assert!(!s.update(false));
        assert_eq!(s.scale, 32768.0);
        assert!(s.update(true));
        assert!(s.update(true));
        assert_eq!(s.scale, 65536.0);
    }
}
