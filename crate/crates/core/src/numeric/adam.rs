use super::{GradBuffer, NumericError, ParamSet, Real};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Bias-corrected Adam moments for every parameter of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, t)| vec![T::zero(); t.numel()])
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// One Adam update with learning rate `lr`.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &GradBuffer<T>,
        lr: f64,
    ) -> Result<(), NumericError> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(NumericError::MissingGrad(format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for id in 0..params.len() {
            if grads.get(id).len() != params.get(id).numel() {
                return Err(NumericError::MissingGrad(params.name(id).to_string()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let (lr_t, bc1_t, bc2_t) = (T::of(lr), T::of(bc1), T::of(bc2));
        for id in 0..params.len() {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1_t;
                let v_hat = v[i] / bc2_t;
                p[i] = p[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
