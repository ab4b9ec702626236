use crate::numcore::log_sum_exp;
use crate::taskenc::score_with_grad;
use crate::Result;

/// InfoNCE value and gradients with respect to every input vector.
#[derive(Clone, Debug)]
pub struct InfoNce {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negatives: Vec<Vec<f64>>,
}

/// `-log(exp(S(z, z')) / (exp(S(z, z')) + sum_k exp(S(z, z*_k))))`, i.e. a
/// `(1 + negatives)`-way classification of the positive pair.
pub fn info_nce_loss(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], temperature: f64) -> Result<f64> {
    Ok(info_nce_with_grad(anchor, positive, negatives, temperature)?.loss)
}

pub fn info_nce_with_grad(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[Vec<f64>],
    temperature: f64,
) -> Result<InfoNce> {
    let (s_pos, ga_pos, gp) = score_with_grad(anchor, positive, temperature)?;
    let mut scores = vec![s_pos];
    let mut grads = Vec::with_capacity(negatives.len());
    for n in negatives {
        let (s, ga, gn) = score_with_grad(anchor, n, temperature)?;
        scores.push(s);
        grads.push((ga, gn));
    }
    let lse = log_sum_exp(&scores);
    let loss = lse - s_pos;
    // d loss / d s_0 = p_0 - 1, d loss / d s_k = p_k
    let p: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
    let w0 = p[0] - 1.0;
    let mut grad_anchor: Vec<f64> = ga_pos.iter().map(|g| w0 * g).collect();
    let grad_positive = gp.iter().map(|g| w0 * g).collect();
    let mut grad_negatives = Vec::with_capacity(negatives.len());
    for ((ga, gn), pk) in grads.into_iter().zip(&p[1..]) {
        for (acc, g) in grad_anchor.iter_mut().zip(&ga) {
            *acc += pk * g;
        }
        grad_negatives.push(gn.iter().map(|g| pk * g).collect());
    }
    Ok(InfoNce {
        loss: loss.max(0.0),
        grad_anchor,
        grad_positive,
        grad_negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check_fn;
    use crate::Error;
    use proptest::prelude::*;

    #[test]
    fn no_negatives_is_zero() {
        assert_eq!(info_nce_loss(&[1.0, 2.0], &[-0.3, 0.5], &[], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn tied_negative_is_log_two() {
        let l = info_nce_loss(&[1.0, 0.0], &[1.0, 1.0], &[vec![1.0, -1.0]], 1.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.69315).abs() < 1e-5);
    }

    #[test]
    fn opposite_negative_closed_form() {
        let l = info_nce_loss(&[1.0, 0.0], &[2.0, 0.0], &[vec![-1.0, 0.0]], 1.0).unwrap();
        assert!((l - (1.0 + (-2f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.12693).abs() < 1e-5);
    }

    #[test]
    fn zero_vector_errors() {
        assert!(matches!(
            info_nce_loss(&[0.0, 0.0], &[1.0, 0.0], &[], 1.0),
            Err(Error::DegenerateRepresentation)
        ));
        assert!(info_nce_loss(&[1.0, 0.0], &[1.0, 0.0], &[vec![0.0, 0.0]], 1.0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let a = vec![0.3, -0.8, 1.2];
        let p = vec![0.5, 0.1, 0.9];
        let negs = vec![vec![-0.4, 0.7, 0.2], vec![1.0, 1.0, -1.0], vec![0.2, -0.3, -0.6]];
        let g = info_nce_with_grad(&a, &p, &negs, 0.5).unwrap();
        let ea = grad_check_fn(&a, |v| info_nce_loss(v, &p, &negs, 0.5), &g.grad_anchor, 1e-5).unwrap();
        let ep = grad_check_fn(&p, |v| info_nce_loss(&a, v, &negs, 0.5), &g.grad_positive, 1e-5).unwrap();
        let en = grad_check_fn(
            &negs[1],
            |v| {
                let mut n = negs.clone();
                n[1] = v.to_vec();
                info_nce_loss(&a, &p, &n, 0.5)
            },
            &g.grad_negatives[1],
            1e-5,
        )
        .unwrap();
        assert!(ea < 1e-6 && ep < 1e-6 && en < 1e-6, "{ea} {ep} {en}");
    }

    fn vec3() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0f64..2.0, 3).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 0.05))
    }

    proptest! {
        #[test]
        fn loss_is_positive_with_negatives(a in vec3(), p in vec3(), negs in proptest::collection::vec(vec3(), 1..6)) {
            let l = info_nce_loss(&a, &p, &negs, 1.0).unwrap();
            prop_assert!(l > 0.0);
        }

        #[test]
        fn loss_decreases_as_positive_score_rises(a in vec3(), negs in proptest::collection::vec(vec3(), 1..6), t in 0.05f64..0.95) {
            // positives rotating towards the anchor raise S(z, z')
            let far: Vec<f64> = a.iter().map(|x| -x).collect();
            let mix = |w: f64| -> Vec<f64> { a.iter().zip(&far).map(|(x, y)| w * x + (1.0 - w) * y + 1e-3).collect() };
            let lo = info_nce_loss(&a, &mix(t), &negs, 1.0).unwrap();
            let hi = info_nce_loss(&a, &mix((t + 0.04).min(1.0)), &negs, 1.0).unwrap();
            let s_lo = crate::taskenc::score(&a, &mix(t), 1.0).unwrap();
            let s_hi = crate::taskenc::score(&a, &mix((t + 0.04).min(1.0)), 1.0).unwrap();
            if s_hi > s_lo {
                prop_assert!(hi < lo);
            }
        }
    }
}
