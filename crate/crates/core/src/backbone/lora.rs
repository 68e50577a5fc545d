//! Low-rank adapters on frozen projections.

use crate::error::Result;
use crate::numerics::{Graph, Var};

/// Graph handles of one adapter: `a` is `r × d_in`, `b` is `d_out × r`.
#[derive(Clone, Copy, Debug)]
pub struct LoraVars {
    pub a: Var,
    pub b: Var,
    /// `α / r`
    pub scale: f64,
}

/// `x·Wᵀ + (α/r)·(x·Aᵀ)·Bᵀ` with `W` stored `d_out × d_in`.
///
/// Whether `W` receives a gradient is decided by how it was bound; the
/// backbone binds it without one.
pub fn lora_apply(g: &mut Graph, x: Var, w_frozen: Var, adapter: Option<&LoraVars>) -> Result<Var> {
    let base = g.matmul_nt(x, w_frozen)?;
    let Some(l) = adapter else { return Ok(base) };
    let down = g.matmul_nt(x, l.a)?;
    let up = g.matmul_nt(down, l.b)?;
    let up = g.scale(up, l.scale);
    g.add(base, up)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{normal_tensor, stream};
    use crate::numerics::Tensor;

    #[test]
    fn zero_b_is_exact_frozen_projection() {
        let mut r = stream(1, "lora", &[]);
        let mut g = Graph::new();
        let x = g.constant(normal_tensor(&mut r, &[5, 4], 1.0));
        let w = g.constant(normal_tensor(&mut r, &[3, 4], 1.0));
        let a = g.constant(normal_tensor(&mut r, &[2, 4], 1.0));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let plain = lora_apply(&mut g, x, w, None).unwrap();
        let adapted = lora_apply(&mut g, x, w, Some(&LoraVars { a, b, scale: 4.0 })).unwrap();
        assert_eq!(g.value(plain), g.value(adapted));
    }

    #[test]
    fn full_rank_factorisation_reproduces_update() {
        // ΔW = (α/r)·B·A with A = I and B = ΔW·r/α is an exact factorisation.
        let (d_in, d_out, alpha) = (4, 3, 8.0);
        let rank = d_in;
        let mut r = stream(2, "lora", &[]);
        let x = normal_tensor(&mut r, &[6, d_in], 1.0);
        let w = normal_tensor(&mut r, &[d_out, d_in], 1.0);
        let delta = normal_tensor(&mut r, &[d_out, d_in], 1.0);
        let scale = alpha / rank as f64;
        let mut eye = Tensor::zeros(&[rank, d_in]);
        for i in 0..rank {
            eye.data_mut()[i * d_in + i] = 1.0;
        }
        let b_mat = delta.map(|v| v / scale);

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let av = g.constant(eye);
        let bv = g.constant(b_mat);
        let out = lora_apply(&mut g, xv, wv, Some(&LoraVars { a: av, b: bv, scale })).unwrap();

        let full: Vec<f64> = w.data().iter().zip(delta.data()).map(|(a, b)| a + b).collect();
        let fv = g.constant(Tensor::new(&[d_out, d_in], full).unwrap());
        let direct = g.matmul_nt(xv, fv).unwrap();
        assert!(g.value(out).max_abs_diff(g.value(direct)) < 1e-10);
    }

    #[test]
    fn gradients_reach_adapter_not_frozen_weight() {
        let mut r = stream(3, "lora", &[]);
        let mut g = Graph::new();
        let x = g.constant(normal_tensor(&mut r, &[2, 4], 1.0));
        let w = g.leaf(normal_tensor(&mut r, &[4, 4], 1.0), false);
        let a = g.leaf(normal_tensor(&mut r, &[2, 4], 0.02), true);
        let b = g.leaf(Tensor::zeros(&[4, 2]), true);
        let y = lora_apply(&mut g, x, w, Some(&LoraVars { a, b, scale: 4.0 })).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(w).is_none());
        assert!(g.grad(a).is_some() && g.grad(b).is_some());
        // B is zero so A's gradient vanishes while B's does not.
        assert!(g.grad(a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(g.grad(b).unwrap().data().iter().any(|&v| v != 0.0));
    }
}
