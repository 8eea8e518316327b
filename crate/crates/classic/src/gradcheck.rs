//! Central finite-difference verification of analytic gradients.
//!
//! `finite_difference_check` is the independent oracle every differentiable
//! op and loss in the crate is held against: it compares the tape gradient
//! of a scalar function with a central difference, coordinate by
//! coordinate. `run_suite` sweeps the whole op set, every training
//! objective, and the task-attention output over random instances; the
//! `grad-check` command is a thin wrapper around it.

use crate::attention::{cks_view, AttentionParams, BoundAttention};
use crate::error::{Error, Result};
use crate::losses::{ce_loss, ced_pair_loss, cks_loss, csc_loss, total_loss, LossWeights, Reduction};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const SUITE_TOLERANCE: f64 = 1e-4;

fn eval_at<F>(f: &mut F, x: &Tensor, coord: usize, value: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    let mut probe = x.clone();
    probe.data_mut()[coord] = value;
    let mut tape = Tape::new();
    tape.set_grad_enabled(false);
    let leaf = tape.leaf(probe);
    let loss = f(&mut tape, leaf)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::InvalidArg(
            "finite_difference_check needs a scalar-valued function".into(),
        ));
    }
    Ok(tape.value(loss).item())
}

/// Max over coordinates of |analytic - central| / max(1, |analytic|).
///
/// `f` builds a scalar loss from the leaf it is handed; it must be a pure
/// function of the tensor values (seed any internal randomness per call).
pub fn finite_difference_check<F>(mut f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArg(format!("step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = f(&mut tape, leaf)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::InvalidArg(
            "finite_difference_check needs a scalar-valued function".into(),
        ));
    }
    // A loss that never touches the leaf (constant function) has an all-zero
    // gradient by definition; backward would reject it.
    if tape.requires_grad(loss) {
        tape.backward(loss)?;
    }
    let analytic = tape.grad_or_zeros(leaf);

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let base = x.data()[i];
        let hi = eval_at(&mut f, x, i, base + step)?;
        let lo = eval_at(&mut f, x, i, base - step)?;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite { op: "finite_difference_check probe".into() });
        }
        let numeric = (hi - lo) / (2.0 * step);
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Result of one suite entry.
#[derive(Debug, Clone)]
pub struct SuiteItem {
    pub name: &'static str,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

fn random_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.range(lo, hi)).collect()).unwrap()
}

type TrialFn = Box<dyn FnMut(&mut Rng) -> Result<f64>>;

struct Entry {
    name: &'static str,
    run: TrialFn,
}

fn op_entries() -> Vec<Entry> {
    // each closure draws a fresh random instance and returns its fd error
    macro_rules! entry {
        ($name:literal, $f:expr) => {
            Entry { name: $name, run: Box::new($f) }
        };
    }
    vec![
        entry!("op.matmul", |rng: &mut Rng| {
            let x = random_tensor(rng, &[4, 3], -2.0, 2.0);
            let aux = random_tensor(rng, &[3, 5], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let b = t.constant(aux.clone());
                    let y = t.matmul(v, b)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.matmul_nt", |rng: &mut Rng| {
            let x = random_tensor(rng, &[4, 3], -2.0, 2.0);
            let aux = random_tensor(rng, &[5, 3], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let b = t.constant(aux.clone());
                    let y = t.matmul_nt(v, b)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.matmul_rhs", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 4], -2.0, 2.0);
            let aux = random_tensor(rng, &[5, 3], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let a = t.constant(aux.clone());
                    let y = t.matmul(a, v)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.batched_matmul", |rng: &mut Rng| {
            let x = random_tensor(rng, &[2, 3, 4], -2.0, 2.0);
            let aux = random_tensor(rng, &[2, 4, 3], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let b = t.constant(aux.clone());
                    let y = t.matmul(v, b)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.add", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 3], -2.0, 2.0);
            let aux = random_tensor(rng, &[3, 3], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let b = t.constant(aux.clone());
                    let y = t.add(v, b)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.add_bias", |rng: &mut Rng| {
            let x = random_tensor(rng, &[4], -2.0, 2.0);
            let aux = random_tensor(rng, &[6, 4], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let a = t.constant(aux.clone());
                    let y = t.add_bias(a, v)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.sub", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 3], -2.0, 2.0);
            let aux = random_tensor(rng, &[3, 3], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let b = t.constant(aux.clone());
                    let y = t.sub(b, v)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.mul", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 4], -2.0, 2.0);
            let aux = random_tensor(rng, &[3, 4], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let b = t.constant(aux.clone());
                    let y = t.mul(v, b)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.mul_row", |rng: &mut Rng| {
            let x = random_tensor(rng, &[4], -2.0, 2.0);
            let aux = random_tensor(rng, &[6, 4], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let a = t.constant(aux.clone());
                    let y = t.mul_row(a, v)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.scale_rows", |rng: &mut Rng| {
            let x = random_tensor(rng, &[5], -2.0, 2.0);
            let aux = random_tensor(rng, &[5, 4], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let a = t.constant(aux.clone());
                    let y = t.scale_rows(a, v)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.scalar_mul", |rng: &mut Rng| {
            let x = random_tensor(rng, &[1], -2.0, 2.0);
            let aux = random_tensor(rng, &[3, 4], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let a = t.constant(aux.clone());
                    let y = t.scalar_mul(v, a)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.sigmoid", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 4], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let y = t.sigmoid(v)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.relu", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 4], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let y = t.relu(v)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.exp", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 4], -2.0, 2.0);
            finite_difference_check(|t, v| {
                let y = t.exp(v)?;
                t.sum_all(y)
            }, &x, DEFAULT_STEP)
        }),
        entry!("op.log", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 4], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let c = t.constant(Tensor::full(vec![3, 4], 3.0));
                    let shifted = t.add(v, c)?;
                    let y = t.log(shifted)?;
                    t.sum_all(y)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.softmax", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 5], -2.0, 2.0);
            let aux = random_tensor(rng, &[3, 5], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let w = t.constant(aux.clone());
                    let y = t.softmax(v)?;
                    let p = t.mul(y, w)?;
                    t.sum_all(p)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.logsumexp", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 5], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let y = t.logsumexp(v)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.mean", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 4], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let sq = t.mul(v, v)?;
                    t.mean_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.sum_last", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 4], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let y = t.sum_last(v)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.scale", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 4], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let y = t.scale(v, -1.7)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.concat", |rng: &mut Rng| {
            let x = random_tensor(rng, &[2, 3], -2.0, 2.0);
            let aux = random_tensor(rng, &[2, 3], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let b = t.constant(aux.clone());
                    let y = t.concat(&[v, b, v], 1)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.reshape", |rng: &mut Rng| {
            let x = random_tensor(rng, &[2, 6], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let y = t.reshape(v, vec![3, 4])?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.layer_norm", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 6], -2.0, 2.0);
            let gamma = random_tensor(rng, &[6], -2.0, 2.0);
            let beta = random_tensor(rng, &[6], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let g = t.constant(gamma.clone());
                    let b = t.constant(beta.clone());
                    let y = t.layer_norm(v, g, b, 1e-5)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.layer_norm_params", |rng: &mut Rng| {
            let gamma = random_tensor(rng, &[6], -2.0, 2.0);
            let x = random_tensor(rng, &[3, 6], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let xc = t.constant(x.clone());
                    let b = t.constant(Tensor::zeros(vec![6]));
                    let y = t.layer_norm(xc, v, b, 1e-5)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &gamma,
                DEFAULT_STEP,
            )
        }),
        entry!("op.embedding", |rng: &mut Rng| {
            let x = random_tensor(rng, &[5, 3], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let y = t.embedding(v, &[0, 2, 4, 2])?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.l2_normalize", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 4], -2.0, 2.0);
            let aux = random_tensor(rng, &[3, 4], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let w = t.constant(aux.clone());
                    let y = t.l2_normalize(v)?;
                    let p = t.mul(y, w)?;
                    t.sum_all(p)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.dropout", |rng: &mut Rng| {
            let x = random_tensor(rng, &[4, 4], -2.0, 2.0);
            let mask_seed = rng.next_u64();
            finite_difference_check(
                |t, v| {
                    // the mask is a pure function of the fixed seed, so
                    // every probe sees the same dropout pattern
                    let mut rng = Rng::new(mask_seed);
                    let y = t.dropout(v, 0.75, true, &mut rng)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.max_many", |rng: &mut Rng| {
            let x = random_tensor(rng, &[3, 4], -2.0, 2.0);
            let aux = random_tensor(rng, &[3, 4], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let b = t.constant(aux.clone());
                    let y = t.max_many(&[v, b])?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("op.select_rows", |rng: &mut Rng| {
            let x = random_tensor(rng, &[5, 3], -2.0, 2.0);
            finite_difference_check(
                |t, v| {
                    let y = t.select_rows(v, &[0, 3, 3])?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
    ]
}

fn loss_entries() -> Vec<Entry> {
    macro_rules! entry {
        ($name:literal, $f:expr) => {
            Entry { name: $name, run: Box::new($f) }
        };
    }
    vec![
        entry!("loss.ce", |rng: &mut Rng| {
            let n = 2 + rng.below(3);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
            let x = random_tensor(rng, &[n, 3], -1.5, 1.5);
            finite_difference_check(|t, v| ce_loss(t, v, &labels), &x, DEFAULT_STEP)
        }),
        entry!("loss.csc", |rng: &mut Rng| {
            let n = 2 + rng.below(3);
            let d = 3 + rng.below(3);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            let x = random_tensor(rng, &[n, d], -1.5, 1.5);
            finite_difference_check(|t, v| csc_loss(t, v, &labels, 0.9, Reduction::Sum), &x, DEFAULT_STEP)
        }),
        entry!("loss.ced_pair", |rng: &mut Rng| {
            let n = 2 + rng.below(3);
            let teacher = random_tensor(rng, &[n, 3], -1.5, 1.5);
            let x = random_tensor(rng, &[n, 3], -1.5, 1.5);
            finite_difference_check(
                |t, v| {
                    let zt = t.constant(teacher.clone());
                    ced_pair_loss(t, zt, v, 0.9, Reduction::Sum)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("loss.ced_sum", |rng: &mut Rng| {
            // two teachers plus the student: the summed distillation loss
            let n = 2 + rng.below(2);
            let t1 = random_tensor(rng, &[n, 3], -1.5, 1.5);
            let t2 = random_tensor(rng, &[n, 3], -1.5, 1.5);
            let x = random_tensor(rng, &[n, 3], -1.5, 1.5);
            finite_difference_check(
                |t, v| {
                    let a = t.constant(t1.clone());
                    let b = t.constant(t2.clone());
                    let p1 = ced_pair_loss(t, a, v, 1.0, Reduction::Sum)?;
                    let p2 = ced_pair_loss(t, b, v, 1.0, Reduction::Sum)?;
                    t.add(p1, p2)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("loss.cks", |rng: &mut Rng| {
            let n = 2 + rng.below(3);
            let d = 3 + rng.below(3);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            let anchors = random_tensor(rng, &[n, d], -1.5, 1.5);
            let x = random_tensor(rng, &[n, d], -1.5, 1.5);
            finite_difference_check(
                |t, v| {
                    let a = t.constant(anchors.clone());
                    cks_loss(t, a, v, &labels, 0.9, Reduction::Sum)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("loss.total", |rng: &mut Rng| {
            let n = 3;
            let labels: Vec<usize> = (0..n).map(|_| rng.below(2)).collect();
            let h_extra = random_tensor(rng, &[n, 4], -1.5, 1.5);
            let teacher = random_tensor(rng, &[n, 3], -1.5, 1.5);
            // differentiate the full weighted objective with respect to
            // the logits, which enter ce and ced
            let x = random_tensor(rng, &[n, 3], -1.5, 1.5);
            let labels_c = labels.clone();
            finite_difference_check(
                move |t, v| {
                    let h = t.constant(h_extra.clone());
                    let zt = t.constant(teacher.clone());
                    let ce = ce_loss(t, v, &labels_c)?;
                    let csc = csc_loss(t, h, &labels_c, 1.0, Reduction::Sum)?;
                    let ced = ced_pair_loss(t, zt, v, 1.0, Reduction::Sum)?;
                    let cks = cks_loss(t, h, h, &labels_c, 1.0, Reduction::Sum)?;
                    let weights = LossWeights {
                        lambda_csc: 0.5,
                        lambda_ced: 0.7,
                        lambda_cks: 0.3,
                        tau: 1.0,
                    };
                    let (total, _) = total_loss(t, ce, Some(csc), Some(ced), Some(cks), &weights)?;
                    Ok(total)
                },
                &x,
                DEFAULT_STEP,
            )
        }),
        entry!("attention.cks_view", |rng: &mut Rng| {
            let n = 3;
            let d = 4;
            let params = AttentionParams {
                gamma: Tensor::scalar(rng.range(-0.5, 0.5)),
                ..AttentionParams::init(d, rng)
            };
            let prev = random_tensor(rng, &[n, d], -1.5, 1.5);
            let probe = random_tensor(rng, &[n, d], -1.5, 1.5);
            // gradient with respect to the current task's view
            finite_difference_check(
                |t, v| {
                    let att = params.bind(t);
                    let p = t.constant(prev.clone());
                    let view = cks_view(t, &[p, v], &att)?;
                    let sq = t.mul(view.h, view.h)?;
                    t.sum_all(sq)
                },
                &probe,
                DEFAULT_STEP,
            )
        }),
        entry!("attention.cks_view_params", |rng: &mut Rng| {
            let n = 2;
            let d = 3;
            let base = AttentionParams::init(d, rng);
            let views = [
                random_tensor(rng, &[n, d], -1.5, 1.5),
                random_tensor(rng, &[n, d], -1.5, 1.5),
            ];
            // gradient with respect to the first feature map
            finite_difference_check(
                |t, v| {
                    let att = BoundAttention {
                        w_f: v,
                        w_g: t.constant(base.w_g.clone()),
                        w_v: t.constant(base.w_v.clone()),
                        w_q: t.constant(base.w_q.clone()),
                        gamma: t.constant(Tensor::scalar(0.8)),
                    };
                    let vs: Vec<Var> = views.iter().map(|x| t.constant(x.clone())).collect();
                    let view = cks_view(t, &vs, &att)?;
                    let sq = t.mul(view.h, view.h)?;
                    t.sum_all(sq)
                },
                &base.w_f,
                DEFAULT_STEP,
            )
        }),
    ]
}

/// Sweep every op and loss over `trials` random instances each.
pub fn run_suite(trials: usize) -> Result<Vec<SuiteItem>> {
    let mut rng = Rng::new(0x6772_6164);
    let mut items = Vec::new();
    for mut entry in op_entries().into_iter().chain(loss_entries()) {
        let mut max_error: f64 = 0.0;
        for _ in 0..trials {
            let err = (entry.run)(&mut rng)?;
            max_error = max_error.max(err);
        }
        items.push(SuiteItem {
            name: entry.name,
            trials,
            max_error,
            tolerance: SUITE_TOLERANCE,
            pass: max_error <= SUITE_TOLERANCE,
        });
    }
    Ok(items)
}
