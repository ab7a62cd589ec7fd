//! Adversarial objective pieces as graph operations.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Keeps the square root of a zero gradient differentiable.
const NORM_EPS: f64 = 1e-12;

/// Wasserstein critic and generator losses with gradient penalty:
/// `d = mean(fake) - mean(real) + lambda * mean(gp)`, `g = -mean(fake)`.
pub fn wgan_gp_loss(real: &[f64], fake: &[f64], gp: &[f64], lambda: f64) -> (f64, f64) {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let g_loss = -mean(fake);
    (mean(fake) - mean(real) + lambda * mean(gp), g_loss)
}

/// Graph form of the critic loss; every argument is a `[N]` vector.
pub fn critic_loss(g: &mut Graph, real: Var, fake: Var, gp: Var, lambda: f64) -> Result<Var> {
    let r = g.mean_all(real)?;
    let f = g.mean_all(fake)?;
    let p = g.mean_all(gp)?;
    let w = g.sub(f, r)?;
    let p = g.scale(p, lambda);
    g.add(w, p)
}

/// Per-example penalties `(||d critic / d x||_2 - 1)^2` at
/// `x = eps * real + (1 - eps) * fake`, with one `eps` per example.
///
/// `real` and `fake` are `[N, ...]` values; `critic` maps a `[N, ...]`
/// variable to `[N]` scores without mixing examples. Returns the penalties
/// `[N]` and the gradient norms `[N]`, both differentiable with respect to
/// whatever the critic reads besides its input.
pub fn gradient_penalty<F>(
    g: &mut Graph,
    critic: F,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
) -> Result<(Var, Var)>
where
    F: FnOnce(&mut Graph, Var) -> Result<Var>,
{
    if real.shape() != fake.shape() || real.shape().first() != Some(&eps.len()) {
        return Err(Error::shape(
            "gradient_penalty",
            format!(
                "real {:?}, fake {:?}, {} interpolation weights",
                real.shape(),
                fake.shape(),
                eps.len()
            ),
        ));
    }
    let n = eps.len();
    let per = real.len() / n.max(1);
    let mixed = Tensor::from_fn(real.shape(), |i| {
        let e = eps[i / per];
        e * real.data()[i] + (1.0 - e) * fake.data()[i]
    });
    let x = g.input(mixed);
    let scores = critic(g, x)?;
    let total = g.sum_all(scores)?;
    let dx = g.grad(total, &[x])?[0];
    if !g.value(dx).all_finite() {
        return Err(Error::NonFinite("critic gradient at interpolates".into()));
    }
    let sq = g.square(dx);
    let sq = g.reshape(sq, &[n, per])?;
    let sq = g.reduce_sum(sq, &[1])?;
    let sq = g.add_scalar(sq, NORM_EPS);
    let norm = g.sqrt(sq);
    let norm = g.reshape(norm, &[n])?;
    let dev = g.add_scalar(norm, -1.0);
    Ok((g.square(dev), norm))
}

/// Best-of-K displacement loss.
///
/// `samples: [N, K, T, 2]`, `gt: [N, T, 2]`. For each example the sample
/// with the smallest mean point distance is selected and its distance
/// averaged over the batch; other samples get exactly zero gradient.
pub fn variety_l2(g: &mut Graph, samples: Var, gt: Var) -> Result<Var> {
    let s = g.shape(samples).to_vec();
    let gs = g.shape(gt).to_vec();
    if s.len() != 4 || gs.len() != 3 || s[0] != gs[0] || s[2..] != gs[1..] || s[3] != 2 {
        return Err(Error::shape(
            "variety_l2",
            format!("samples {s:?} vs ground truth {gs:?}"),
        ));
    }
    let (n, k, t) = (s[0], s[1], s[2]);
    let gt4 = g.reshape(gt, &[n, 1, t, 2])?;
    let gt4 = g.broadcast(gt4, &s)?;
    let d = g.sub(samples, gt4)?;
    let d = g.square(d);
    let d = g.reduce_sum(d, &[3])?;
    let d = g.add_scalar(d, NORM_EPS);
    let d = g.sqrt(d);
    let d = g.reduce_sum(d, &[2])?;
    let d = g.scale(d, 1.0 / t as f64);
    let d = g.reshape(d, &[n, k])?;
    let neg = g.neg(d);
    let best = g.select_max(d, neg, 1)?;
    g.mean_all(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_arithmetic() {
        let (d, gl) = wgan_gp_loss(&[1.0, 3.0], &[1.0, 3.0], &[0.0, 0.0], 10.0);
        assert_eq!((d, gl), (0.0, -2.0));
        let (d, _) = wgan_gp_loss(&[2.0, 2.0], &[1.0, 1.0], &[0.25, 0.25], 10.0);
        assert_eq!(d, 1.5);
        let (d0, _) = wgan_gp_loss(&[2.0], &[1.0], &[7.0], 0.0);
        assert_eq!(d0, -1.0);
    }

    #[test]
    fn unit_slope_linear_critic_has_no_penalty() {
        let mut g = Graph::new();
        let real = Tensor::from_fn(&[3, 4, 2], |i| i as f64 * 0.3);
        let fake = Tensor::from_fn(&[3, 4, 2], |i| -(i as f64));
        // score = <w, x> with ||w|| = 1
        let w = Tensor::from_fn(&[8], |i| if i < 2 { 0.6 + 0.2 * i as f64 } else { 0.0 });
        let (gp, norm) = gradient_penalty(
            &mut g,
            |g, x| {
                let flat = g.reshape(x, &[3, 8])?;
                let wv = g.constant(w.reshape(&[8, 1]).unwrap());
                let s = g.matmul(flat, wv, false, false)?;
                g.reshape(s, &[3])
            },
            &real,
            &fake,
            &[0.1, 0.5, 1.0],
        )
        .unwrap();
        for v in g.value(gp).data() {
            assert!(v.abs() < 1e-20);
        }
        assert!(g.value(norm).data().iter().all(|n| (n - 1.0).abs() < 1e-12));
    }

    #[test]
    fn variety_picks_the_closest_sample() {
        let gt = Tensor::zeros(&[1, 8, 2]);
        let samples = Tensor::from_fn(&[1, 3, 8, 2], |i| {
            let k = i / 16;
            if i % 2 == 1 {
                (k + 1) as f64
            } else {
                0.0
            }
        });
        let mut g = Graph::new();
        let s = g.input(samples);
        let t = g.input(gt);
        let l = variety_l2(&mut g, s, t).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-9);
        let ds = g.grad(l, &[s]).unwrap()[0];
        let d = g.value(ds).data();
        assert!(d[..16].iter().any(|v| *v != 0.0));
        assert!(d[16..].iter().all(|v| *v == 0.0));
    }
}
