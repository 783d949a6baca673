//! Adam parameter updates over named parameter sets.

use ndarray::ArrayD;

use crate::autodiff::{ParamSet, Real};

/// First and second moment estimates, keyed like the parameter set they
/// track.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments<F: Real> {
    pub m: ParamSet<F>,
    pub v: ParamSet<F>,
}

impl<F: Real> AdamMoments<F> {
    pub fn new_like(params: &ParamSet<F>) -> Self {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (name, value) in params.iter() {
            m.insert(name.clone(), ArrayD::from_elem(value.raw_dim(), F::ZERO));
            v.insert(name.clone(), ArrayD::from_elem(value.raw_dim(), F::ZERO));
        }
        Self { m, v }
    }
}

/// L2 norm of every gradient in the given sets, for global-norm clipping.
pub fn global_grad_norm<F: Real>(grad_sets: &[&ParamSet<F>]) -> f64 {
    let mut acc = 0.0f64;
    for set in grad_sets {
        for (_, g) in set.iter() {
            for &v in g.iter() {
                let x = v.to_f64();
                acc += x * x;
            }
        }
    }
    acc.sqrt()
}

/// One bias-corrected Adam step on a parameter set.
///
/// `t` is the 1-based step count of the owning optimizer; `clip_scale`
/// pre-multiplies gradients (1.0 when clipping is off).
#[allow(clippy::too_many_arguments)]
pub fn adam_update<F: Real>(
    params: &mut ParamSet<F>,
    grads: &ParamSet<F>,
    moments: &mut AdamMoments<F>,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    clip_scale: f64,
) {
    let b1 = F::from_f64(beta1);
    let b2 = F::from_f64(beta2);
    let one_m_b1 = F::from_f64(1.0 - beta1);
    let one_m_b2 = F::from_f64(1.0 - beta2);
    let corr1 = F::from_f64(1.0 / (1.0 - beta1.powi(t as i32)));
    let corr2 = F::from_f64(1.0 / (1.0 - beta2.powi(t as i32)));
    let lr_f = F::from_f64(lr);
    let eps_f = F::from_f64(eps);
    let clip = F::from_f64(clip_scale);

    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let g = grads.get(&name).unwrap_or_else(|| panic!("missing gradient for '{name}'"));
        let m = moments.m.get_mut(&name).expect("moment m");
        let v = moments.v.get_mut(&name).expect("moment v");
        let p = params.get_mut(&name).expect("param");
        ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g0| {
            let g = g0 * clip;
            *m = b1 * *m + one_m_b1 * g;
            *v = b2 * *v + one_m_b2 * g * g;
            let m_hat = *m * corr1;
            let v_hat = *v * corr2;
            // sqrt via f64 keeps the Real trait small
            let denom = F::from_f64(v_hat.to_f64().sqrt()) + eps_f;
            *p = *p - lr_f * m_hat / denom;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (x - 3)^2 elementwise
        let mut params = ParamSet::<f64>::new();
        params.insert("x", ArrayD::from_elem(IxDyn(&[4]), 10.0));
        let mut moments = AdamMoments::new_like(&params);
        for t in 1..=2000 {
            let x = params.get("x").unwrap().clone();
            let mut grads = ParamSet::new();
            grads.insert("x", x.mapv(|v| 2.0 * (v - 3.0)));
            adam_update(&mut params, &grads, &mut moments, t, 0.05, 0.9, 0.999, 1e-8, 1.0);
        }
        for &v in params.get("x").unwrap().iter() {
            assert!((v - 3.0).abs() < 1e-3, "converged to {v}");
        }
    }

    #[test]
    fn grad_norm_accumulates_across_sets() {
        let mut a = ParamSet::<f64>::new();
        a.insert("p", ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let mut b = ParamSet::<f64>::new();
        b.insert("q", ArrayD::from_elem(IxDyn(&[1]), 4.0));
        // sqrt(9 + 9 + 16) = sqrt(34)
        let norm = global_grad_norm(&[&a, &b]);
        assert!((norm - 34.0f64.sqrt()).abs() < 1e-12);
    }
}
