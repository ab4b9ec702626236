//! Small differentiable core: flat parameter vectors, dense MLPs with
//! hand-written reverse passes, Adam, and finite-difference checking.

mod adam;
mod bundle;
mod gradcheck;
mod mlp;
pub(crate) mod params;

pub use adam::{adam_step, AdamState};
pub use bundle::Bundle;
pub(crate) use mlp::dot as mlp_dot;
pub use gradcheck::{central_difference, grad_check, grad_check_fn, max_relative_error};
pub use mlp::{
    loss_gradients, mlp_forward, Activation, ForwardCache, Mlp, MlpSpec, OutputTransform,
    SampleLoss,
};
pub use params::{Layout, LayoutEntry, ParamVector};

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Sums with a pairwise tree. The tree shape depends only on the length.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let (lo, hi) = xs.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct() {
        let xs = [0.3, -1.2, 2.0];
        let direct: f64 = xs.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&xs) - direct).abs() < 1e-14);
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn pairwise_sum_small() {
        assert_eq!(pairwise_sum(&[]), 0.0);
        assert_eq!(pairwise_sum(&[1.0, 2.0, 3.0, 4.0, 5.0]), 15.0);
    }
}
