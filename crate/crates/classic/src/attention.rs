//! Task-based self-attention over the per-task views.
//!
//! For every sample independently, the t task representations attend to
//! each other: similarity through two learned feature maps, softmax over
//! the task axis, a value/query transform pair, and a learnable scalar gate
//! `gamma` (initialized to zero) on the attention output. With the gate
//! closed the output is just the sum of the task views, so training starts
//! from the current task's own signal and opens up to other tasks as the
//! gate learns.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// One persistent set of attention parameters, trained during every task
/// and never mask-protected.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_f: Tensor,
    pub w_g: Tensor,
    pub w_v: Tensor,
    pub w_q: Tensor,
    /// Scalar gate, starts at exactly zero.
    pub gamma: Tensor,
}

impl AttentionParams {
    pub fn init(d_model: usize, rng: &mut Rng) -> Self {
        let mat = |rng: &mut Rng| {
            let scale = (1.0 / d_model as f64).sqrt();
            Tensor::new(
                vec![d_model, d_model],
                (0..d_model * d_model).map(|_| rng.gauss() * scale).collect(),
            )
            .unwrap()
        };
        AttentionParams {
            w_f: mat(rng),
            w_g: mat(rng),
            w_v: mat(rng),
            w_q: mat(rng),
            gamma: Tensor::scalar(0.0),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundAttention {
        BoundAttention {
            w_f: tape.leaf(self.w_f.clone()),
            w_g: tape.leaf(self.w_g.clone()),
            w_v: tape.leaf(self.w_v.clone()),
            w_q: tape.leaf(self.w_q.clone()),
            gamma: tape.leaf(self.gamma.clone()),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("attention.w_f", &self.w_f),
            ("attention.w_g", &self.w_g),
            ("attention.w_v", &self.w_v),
            ("attention.w_q", &self.w_q),
            ("attention.gamma", &self.gamma),
        ]
    }
}

/// Attention parameters registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundAttention {
    pub w_f: Var,
    pub w_g: Var,
    pub w_v: Var,
    pub w_q: Var,
    pub gamma: Var,
}

/// The knowledge-sharing view plus, per target task j, the attention
/// weights over source tasks as an [n, t] tensor (for diagnostics).
pub struct CksView {
    pub h: Var,
    pub alpha: Vec<Tensor>,
}

/// Build the knowledge-sharing view from per-task representations, each
/// [n, d]. The last view is the current task and carries gradient; all
/// earlier views are treated as constants.
pub fn cks_view(tape: &mut Tape, views: &[Var], att: &BoundAttention) -> Result<CksView> {
    if views.is_empty() {
        return Err(Error::InvalidArg("cks_view needs at least one task view".into()));
    }
    let shape = tape.shape(views[0]).to_vec();
    if shape.len() != 2 {
        return Err(Error::InvalidArg(format!("task views must be rank 2, got {shape:?}")));
    }
    for &v in views {
        if tape.shape(v) != shape {
            return Err(Error::ShapeMismatch {
                op: "cks_view",
                lhs: shape.clone(),
                rhs: tape.shape(v).to_vec(),
            });
        }
    }
    let (n, _d) = (shape[0], shape[1]);
    let t = views.len();

    // previous-task views come from protected parameters; keep them out of
    // the gradient entirely
    let views: Vec<Var> = views
        .iter()
        .enumerate()
        .map(|(i, &v)| if i + 1 == t { v } else { tape.detach(v) })
        .collect();

    let f: Vec<Var> = views.iter().map(|&v| tape.matmul(v, att.w_f)).collect::<Result<_>>()?;
    let g: Vec<Var> = views.iter().map(|&v| tape.matmul(v, att.w_g)).collect::<Result<_>>()?;
    let q: Vec<Var> = views.iter().map(|&v| tape.matmul(v, att.w_q)).collect::<Result<_>>()?;

    let mut out: Option<Var> = None;
    let mut alphas = Vec::with_capacity(t);
    for j in 0..t {
        // per-sample similarity of every source task i to target j
        let mut cols = Vec::with_capacity(t);
        for fi in f.iter().take(t) {
            let prod = tape.mul(*fi, g[j])?;
            let s_ij = tape.sum_last(prod)?;
            cols.push(tape.reshape(s_ij, vec![n, 1])?);
        }
        let scores = tape.concat(&cols, 1)?;
        let alpha = tape.softmax(scores)?; // [n, t], normalized over i
        alphas.push(tape.value(alpha).clone());

        let mut mixed: Option<Var> = None;
        for (i, qi) in q.iter().enumerate() {
            let mut pick = vec![0.0; t];
            pick[i] = 1.0;
            let rows: Vec<f64> = std::iter::repeat_n(pick, n).flatten().collect();
            let one_hot = tape.constant(Tensor::new(vec![n, t], rows)?);
            let coeff_m = tape.mul(alpha, one_hot)?;
            let coeff = tape.sum_last(coeff_m)?; // [n] = alpha[:, i]
            let weighted = tape.scale_rows(*qi, coeff)?;
            mixed = Some(match mixed {
                Some(acc) => tape.add(acc, weighted)?,
                None => weighted,
            });
        }
        let o_j = tape.matmul(mixed.unwrap(), att.w_v)?;
        let gated = tape.scalar_mul(att.gamma, o_j)?;
        let term = tape.add(gated, views[j])?;
        out = Some(match out {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(CksView { h: out.unwrap(), alpha: alphas })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_difference_check;

    fn random_views(rng: &mut Rng, t: usize, n: usize, d: usize) -> Vec<Tensor> {
        (0..t)
            .map(|_| {
                Tensor::new(vec![n, d], (0..n * d).map(|_| rng.range(-1.5, 1.5)).collect()).unwrap()
            })
            .collect()
    }

    /// Independent per-sample evaluation of the attention equations.
    fn brute_force(views: &[Vec<f64>], n: usize, d: usize, p: &AttentionParams) -> Vec<f64> {
        let t = views.len();
        let gamma = p.gamma.item();
        let matvec = |w: &Tensor, x: &[f64]| -> Vec<f64> {
            // row-vector times matrix [d, d]
            let mut out = vec![0.0; d];
            for (r, &xv) in x.iter().enumerate() {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += xv * w.data()[r * d + c];
                }
            }
            out
        };
        let mut out = vec![0.0; n * d];
        for s in 0..n {
            let h: Vec<&[f64]> = views.iter().map(|v| &v[s * d..(s + 1) * d]).collect();
            for j in 0..t {
                let gj = matvec(&p.w_g, h[j]);
                let scores: Vec<f64> = (0..t)
                    .map(|i| {
                        let fi = matvec(&p.w_f, h[i]);
                        fi.iter().zip(&gj).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|&v| (v - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut mix = vec![0.0; d];
                for (i, &e) in exps.iter().enumerate() {
                    let qi = matvec(&p.w_q, h[i]);
                    for (m, q) in mix.iter_mut().zip(&qi) {
                        *m += e / z * q;
                    }
                }
                let oj = matvec(&p.w_v, &mix);
                for (c, &o) in oj.iter().enumerate() {
                    out[s * d + c] += gamma * o + h[j][c];
                }
            }
        }
        out
    }

    #[test]
    fn single_view_zero_gate_is_identity() {
        let mut rng = Rng::new(1);
        let p = AttentionParams::init(4, &mut rng);
        let views = random_views(&mut rng, 1, 3, 4);
        let mut tape = Tape::new();
        let att = p.bind(&mut tape);
        let v = tape.constant(views[0].clone());
        let cks = cks_view(&mut tape, &[v], &att).unwrap();
        assert_eq!(tape.value(cks.h).data(), views[0].data());
    }

    #[test]
    fn zero_gate_gives_sum_of_views() {
        let mut rng = Rng::new(2);
        let p = AttentionParams::init(4, &mut rng);
        let views = random_views(&mut rng, 3, 5, 4);
        let mut tape = Tape::new();
        let att = p.bind(&mut tape);
        let vars: Vec<Var> = views.iter().map(|v| tape.constant(v.clone())).collect();
        let cks = cks_view(&mut tape, &vars, &att).unwrap();
        let expect: Vec<f64> = (0..5 * 4)
            .map(|i| views.iter().map(|v| v.data()[i]).sum::<f64>())
            .collect();
        for (a, b) in tape.value(cks.h).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn open_gate_matches_brute_force_oracle() {
        let mut rng = Rng::new(3);
        let mut p = AttentionParams::init(2, &mut rng);
        // identity feature maps, open gate: the spec's hand-checkable case
        for w in [&mut p.w_f, &mut p.w_g, &mut p.w_v, &mut p.w_q] {
            *w = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        }
        p.gamma = Tensor::scalar(1.0);
        let views = random_views(&mut rng, 2, 4, 2);
        let raw: Vec<Vec<f64>> = views.iter().map(|v| v.data().to_vec()).collect();
        let expect = brute_force(&raw, 4, 2, &p);

        let mut tape = Tape::new();
        let att = p.bind(&mut tape);
        let vars: Vec<Var> = views.iter().map(|v| tape.constant(v.clone())).collect();
        let cks = cks_view(&mut tape, &vars, &att).unwrap();
        for (a, b) in tape.value(cks.h).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10);
        }

        // and with generic random parameters
        let p2 = AttentionParams {
            gamma: Tensor::scalar(0.7),
            ..AttentionParams::init(2, &mut rng)
        };
        let expect2 = brute_force(&raw, 4, 2, &p2);
        let mut tape2 = Tape::new();
        let att2 = p2.bind(&mut tape2);
        let vars2: Vec<Var> = views.iter().map(|v| tape2.constant(v.clone())).collect();
        let cks2 = cks_view(&mut tape2, &vars2, &att2).unwrap();
        for (a, b) in tape2.value(cks2.h).data().iter().zip(&expect2) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = Rng::new(4);
        let p = AttentionParams::init(6, &mut rng);
        let views = random_views(&mut rng, 4, 3, 6);
        let mut tape = Tape::new();
        let att = p.bind(&mut tape);
        let vars: Vec<Var> = views.iter().map(|v| tape.constant(v.clone())).collect();
        let cks = cks_view(&mut tape, &vars, &att).unwrap();
        assert_eq!(cks.alpha.len(), 4);
        for a in &cks.alpha {
            for row in a.data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gate_gradient_at_zero_is_finite_and_nonzero() {
        let mut rng = Rng::new(5);
        let p = AttentionParams::init(4, &mut rng);
        let views = random_views(&mut rng, 2, 3, 4);
        let err = finite_difference_check(
            |tape, gamma_leaf| {
                let att = BoundAttention {
                    w_f: tape.constant(p.w_f.clone()),
                    w_g: tape.constant(p.w_g.clone()),
                    w_v: tape.constant(p.w_v.clone()),
                    w_q: tape.constant(p.w_q.clone()),
                    gamma: gamma_leaf,
                };
                let vars: Vec<Var> = views.iter().map(|v| tape.constant(v.clone())).collect();
                let cks = cks_view(tape, &vars, &att)?;
                let sq = tape.mul(cks.h, cks.h)?;
                tape.sum_all(sq)
            },
            &Tensor::scalar(0.0),
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "gamma gradient fd error {err}");

        // the analytic gradient itself is generally nonzero
        let mut tape = Tape::new();
        let mut p_open = p.clone();
        p_open.gamma = Tensor::scalar(0.0);
        let att = p_open.bind(&mut tape);
        let vars: Vec<Var> = views.iter().map(|v| tape.constant(v.clone())).collect();
        let cks = cks_view(&mut tape, &vars, &att).unwrap();
        let sq = tape.mul(cks.h, cks.h).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(att.gamma).unwrap()[0];
        assert!(g.is_finite() && g.abs() > 1e-12, "gamma grad {g}");
    }

    #[test]
    fn output_is_equivariant_to_sample_permutation() {
        let mut rng = Rng::new(6);
        let mut p = AttentionParams::init(4, &mut rng);
        p.gamma = Tensor::scalar(0.9);
        let views = random_views(&mut rng, 3, 4, 4);
        let perm = [2usize, 0, 3, 1];

        let eval = |vs: &[Tensor]| {
            let mut tape = Tape::new();
            let att = p.bind(&mut tape);
            let vars: Vec<Var> = vs.iter().map(|v| tape.constant(v.clone())).collect();
            let cks = cks_view(&mut tape, &vars, &att).unwrap();
            tape.value(cks.h).data().to_vec()
        };
        let base = eval(&views);
        let permuted: Vec<Tensor> = views
            .iter()
            .map(|v| {
                let mut data = vec![0.0; v.len()];
                for (r, &src) in perm.iter().enumerate() {
                    data[r * 4..(r + 1) * 4].copy_from_slice(&v.data()[src * 4..(src + 1) * 4]);
                }
                Tensor::new(vec![4, 4], data).unwrap()
            })
            .collect();
        let shuffled = eval(&permuted);
        for (r, &src) in perm.iter().enumerate() {
            for c in 0..4 {
                assert!((shuffled[r * 4 + c] - base[src * 4 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_attention_and_sum_output() {
        let mut rng = Rng::new(7);
        let p = AttentionParams {
            w_f: Tensor::zeros(vec![4, 4]),
            w_g: Tensor::zeros(vec![4, 4]),
            w_v: Tensor::zeros(vec![4, 4]),
            w_q: Tensor::zeros(vec![4, 4]),
            gamma: Tensor::scalar(2.5),
        };
        let views = random_views(&mut rng, 3, 2, 4);
        let mut tape = Tape::new();
        let att = p.bind(&mut tape);
        let vars: Vec<Var> = views.iter().map(|v| tape.constant(v.clone())).collect();
        let cks = cks_view(&mut tape, &vars, &att).unwrap();
        for a in &cks.alpha {
            for &v in a.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
        let expect: Vec<f64> = (0..2 * 4)
            .map(|i| views.iter().map(|v| v.data()[i]).sum::<f64>())
            .collect();
        for (a, b) in tape.value(cks.h).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn current_view_carries_gradient_previous_do_not() {
        let mut rng = Rng::new(8);
        let mut p = AttentionParams::init(3, &mut rng);
        p.gamma = Tensor::scalar(0.5);
        let views = random_views(&mut rng, 2, 2, 3);
        let mut tape = Tape::new();
        let att = p.bind(&mut tape);
        let prev = tape.leaf(views[0].clone());
        let cur = tape.leaf(views[1].clone());
        let cks = cks_view(&mut tape, &[prev, cur], &att).unwrap();
        let sq = tape.mul(cks.h, cks.h).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(prev).is_none(), "previous view must be detached");
        assert!(tape.grad(cur).is_some());
    }
}
