//! Collaborative distillation from the teacher's item embeddings into the
//! tokenizer (assignment agreement) and the recommender (contrastive
//! alignment of item representations).

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ensure_finite};
use crate::tokenizer::RqTokenizer;

/// Probability floor inside the KL logarithms.
pub const KL_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillationConfig {
    pub lambda_cd_tokenizer: f64,
    pub lambda_cd_recommender: f64,
    pub tau_prime: f64,
}

impl Default for DistillationConfig {
    fn default() -> Self {
        Self {
            lambda_cd_tokenizer: 0.1,
            lambda_cd_recommender: 0.1,
            tau_prime: 0.07,
        }
    }
}

impl DistillationConfig {
    pub fn disabled() -> Self {
        Self {
            lambda_cd_tokenizer: 0.0,
            lambda_cd_recommender: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cd_tokenizer >= 0.0 && self.lambda_cd_recommender >= 0.0) {
            return Err(Error::Config("distillation weights must be >= 0".into()));
        }
        if !(self.tau_prime > 0.0) {
            return Err(Error::Config(format!("tau_prime must be positive, got {}", self.tau_prime)));
        }
        Ok(())
    }
}

/// Mean of encoder states over unmasked positions: (B, S, D), (B, S) -> (B, D).
pub fn pool_encoder(states: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let m = mask.unsqueeze(D::Minus1)?;
    let sum = states.broadcast_mul(&m)?.sum(1)?;
    let count = mask.sum_keepdim(1)?;
    Ok(sum.broadcast_div(&count)?)
}

/// State at the first decoder position: (B, T, D) -> (B, D).
pub fn pool_decoder(hidden: &Tensor) -> Result<Tensor> {
    Ok(hidden.narrow(1, 0, 1)?.squeeze(1)?)
}

/// `sum_l mean_b [KL(p||q) + KL(q||p)]` over per-level (B, K)
/// distributions, with probabilities floored at [`KL_FLOOR`].
pub fn symmetric_kl(p: &[Tensor], q: &[Tensor]) -> Result<Tensor> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::Shape(format!("{} vs {} levels", p.len(), q.len())));
    }
    let mut total: Option<Tensor> = None;
    for (a, b) in p.iter().zip(q) {
        ensure_finite(a, "student distribution")?;
        ensure_finite(b, "teacher distribution")?;
        let la = a.maximum(KL_FLOOR)?.log()?;
        let lb = b.maximum(KL_FLOOR)?.log()?;
        let diff = (&la - &lb)?;
        // p(log p - log q) + q(log q - log p) = (p - q)(log p - log q)
        let level = (a - b)?.mul(&diff)?.sum(D::Minus1)?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + level)?,
            None => level,
        });
    }
    Ok(total.unwrap())
}

/// Symmetric KL between the tokenizer's soft assignments of the projected
/// sequence representation and of the projected teacher representation.
/// The teacher side is detached.
pub fn tokenizer_distill_loss(
    tokenizer: &RqTokenizer,
    student: &Tensor,
    teacher: &Tensor,
    tau: f64,
) -> Result<Tensor> {
    let p_student = tokenizer.soft_distributions(student, tau)?;
    let p_teacher: Vec<Tensor> = tokenizer
        .soft_distributions(&teacher.detach(), tau)?
        .into_iter()
        .map(|t| t.detach())
        .collect();
    symmetric_kl(&p_student, &p_teacher)
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(1e-12)?;
    Ok(x.broadcast_div(&norm)?)
}

/// In-batch InfoNCE with cosine similarity; row `i` of `keys` is the
/// positive for row `i` of `queries`. Mean over the batch.
pub fn infonce(queries: &Tensor, keys: &Tensor, tau_prime: f64) -> Result<Tensor> {
    let (n, _) = queries.dims2()?;
    if keys.dims2()?.0 != n || n == 0 {
        return Err(Error::Shape(format!("{:?} queries vs {:?} keys", queries.dims(), keys.dims())));
    }
    let sim = (l2_normalize(queries)?.matmul(&l2_normalize(keys)?.t()?)? / tau_prime)?;
    let logp = nn::log_softmax_last(&sim)?;
    let eye = Tensor::eye(n, logp.dtype(), logp.device())?;
    Ok(((logp * eye)?.sum_all()? / -(n as f64))?)
}

/// `infonce(dec, tea) + infonce(tea, dec)` with the teacher side detached.
pub fn recommender_distill_loss(decoder: &Tensor, teacher: &Tensor, tau_prime: f64) -> Result<Tensor> {
    let tea = teacher.detach();
    Ok((infonce(decoder, &tea, tau_prime)? + infonce(&tea, decoder, tau_prime)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{device, Init, Linear, ParamStore};
    use crate::testing::{central_difference, grad_of, rel_err};
    use crate::tokenizer::TokenizerConfig;
    use candle_core::Var;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (rows, cols), &device()).unwrap()
    }

    fn value(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    #[test]
    fn encoder_pooling_is_masked_mean() {
        let states = random(2 * 4, 3, 1).reshape((2, 4, 3)).unwrap();
        let mask = Tensor::new(&[[0.0, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 1.0]], &device()).unwrap();
        let pooled: Vec<Vec<f64>> = pool_encoder(&states, &mask).unwrap().to_vec2().unwrap();
        let s: Vec<Vec<Vec<f64>>> = states.to_vec3().unwrap();
        for j in 0..3 {
            let want = (s[0][1][j] + s[0][2][j] + s[0][3][j]) / 3.0;
            assert!((pooled[0][j] - want).abs() < 1e-14);
            assert_eq!(pooled[1][j], s[1][3][j]);
        }
    }

    #[test]
    fn decoder_pooling_takes_first_position() {
        let hidden = random(2 * 3, 4, 2).reshape((2, 3, 4)).unwrap();
        let pooled: Vec<Vec<f64>> = pool_decoder(&hidden).unwrap().to_vec2().unwrap();
        let h: Vec<Vec<Vec<f64>>> = hidden.to_vec3().unwrap();
        assert_eq!(pooled, vec![h[0][0].clone(), h[1][0].clone()]);
    }

    #[test]
    fn projector_jacobian_is_its_weight() {
        let mut store = ParamStore::new();
        let proj = Linear::new(&mut store, &mut Init::new(0), "p", 3, 2, true).unwrap();
        let x = Var::from_tensor(&random(1, 3, 5)).unwrap();
        let w: Vec<Vec<f64>> = proj.weight().as_tensor().to_vec2().unwrap();
        for out in 0..2 {
            for i in 0..3 {
                let numeric = central_difference(&x, i, 1e-6, || {
                    proj.forward(x.as_tensor()).unwrap().to_vec2::<f64>().unwrap()[0][out]
                });
                assert!((numeric - w[out][i]).abs() < 1e-8);
            }
        }
    }

    fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
        let kl = |a: &[f64], b: &[f64]| -> f64 {
            a.iter()
                .zip(b)
                .map(|(&x, &y)| x.max(KL_FLOOR) * (x.max(KL_FLOOR) / y.max(KL_FLOOR)).ln())
                .sum()
        };
        kl(p, q) + kl(q, p)
    }

    #[test]
    fn symmetric_kl_matches_direct_sums() {
        let p = [0.7, 0.2, 0.1, 0.0];
        let q = [0.25, 0.25, 0.4, 0.1];
        let pt = Tensor::new(&[p], &device()).unwrap();
        let qt = Tensor::new(&[q], &device()).unwrap();
        let got = value(&symmetric_kl(&[pt.clone()], &[qt.clone()]).unwrap());
        // the floored zero entry contributes on both sides
        assert!((got - kl_oracle(&p, &q)).abs() < 1e-6, "{got} vs {}", kl_oracle(&p, &q));
        assert_eq!(value(&symmetric_kl(&[pt.clone()], &[pt]).unwrap()), 0.0);
    }

    #[test]
    fn tokenizer_distillation_vanishes_for_identical_inputs_and_is_nonnegative() {
        let tok = RqTokenizer::new(
            TokenizerConfig {
                encoder_dims: vec![8],
                levels: 2,
                codebook_size: 4,
                code_dim: 3,
                ..TokenizerConfig::desk(6)
            },
            1,
        )
        .unwrap();
        let x = random(5, 6, 3);
        assert_eq!(value(&tokenizer_distill_loss(&tok, &x, &x, 0.5).unwrap()), 0.0);
        for seed in 0..5 {
            let y = random(5, 6, 10 + seed);
            assert!(value(&tokenizer_distill_loss(&tok, &x, &y, 0.5).unwrap()) >= 0.0);
        }
    }

    #[test]
    fn infonce_single_row_is_zero() {
        let a = random(1, 4, 1);
        let b = random(1, 4, 2);
        assert_eq!(value(&infonce(&a, &b, 0.07).unwrap()), 0.0);
    }

    #[test]
    fn infonce_orthogonal_closed_form() {
        let a = Tensor::new(&[[1.0, 0.0], [0.0, 1.0]], &device()).unwrap();
        let got = value(&infonce(&a, &a, 0.07).unwrap());
        let e = (1.0f64 / 0.07).exp();
        let want = -(e / (e + 1.0)).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn aligned_recommender_distillation_closed_form() {
        for n in [2usize, 3, 5] {
            let eye = Tensor::eye(n, candle_core::DType::F64, &device()).unwrap();
            let got = value(&recommender_distill_loss(&eye, &eye, 0.07).unwrap());
            let e = (1.0f64 / 0.07).exp();
            let want = 2.0 * -(e / (e + (n as f64 - 1.0))).ln();
            assert!((got - want).abs() < 1e-8);
            let sum = value(&infonce(&eye, &eye, 0.07).unwrap()) * 2.0;
            assert!((got - sum).abs() < 1e-15);
        }
    }

    #[test]
    fn infonce_is_scale_invariant() {
        let a = random(4, 5, 1);
        let b = random(4, 5, 2);
        let base = value(&infonce(&a, &b, 0.07).unwrap());
        let scale = Tensor::new(&[[3.0], [0.5], [1.0], [7.0]], &device()).unwrap();
        let scaled = value(&infonce(&a.broadcast_mul(&scale).unwrap(), &b, 0.07).unwrap());
        assert!((base - scaled).abs() < 1e-10);
    }

    #[test]
    fn infonce_gradient_matches_finite_differences() {
        let q = Var::from_tensor(&random(3, 4, 7)).unwrap();
        let k = random(3, 4, 8);
        let grads = infonce(q.as_tensor(), &k, 0.5).unwrap().backward().unwrap();
        let analytic = grad_of(&grads, &q);
        for i in 0..12 {
            let numeric = central_difference(&q, i, 1e-6, || value(&infonce(q.as_tensor(), &k, 0.5).unwrap()));
            assert!(rel_err(analytic[i], numeric, 1e-6) < 1e-3, "entry {i}: {} vs {numeric}", analytic[i]);
        }
    }

    #[test]
    fn teacher_side_receives_no_gradient() {
        let dec = Var::from_tensor(&random(3, 4, 1)).unwrap();
        let tea = Var::from_tensor(&random(3, 4, 2)).unwrap();
        let grads = recommender_distill_loss(dec.as_tensor(), tea.as_tensor(), 0.07)
            .unwrap()
            .backward()
            .unwrap();
        assert!(grads.get(tea.as_tensor()).is_none());
        assert!(grad_of(&grads, &dec).iter().any(|g| *g != 0.0));
    }
}
