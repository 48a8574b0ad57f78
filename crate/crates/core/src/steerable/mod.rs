//! Equivariant layers over [`crate::group`] field types.

mod layers;
mod projector;
mod schur;

pub use layers::{equivariant_relu, group_max_pool, Layer, Network, NetworkBuilder, PlainConv, SteerableConv};
pub use projector::{basis_dimension, kernel_constraint_residual, kernel_projector, project_kernel};
pub use schur::{corollary_deviation, fit_sum_form, verify_schur_form, SchurReport};

use crate::group::{act_on_feature_map, FeatureMap, GroupElement};
use crate::{Result, Scalar};

/// `max |h(g x) - g h(x)|` for one network, input and group element.
pub fn equivariance_error<T: Scalar>(net: &Network<T>, x: &FeatureMap<T>, g: &GroupElement) -> Result<f64> {
    let gx = act_on_feature_map(net.in_field(), g, x)?;
    let lhs = net.forward_map(&gx)?;
    let rhs = act_on_feature_map(net.out_field(), g, &net.forward_map(x)?)?;
    Ok(lhs.max_abs_diff(&rhs))
}
