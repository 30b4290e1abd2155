use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Scalar, SparseRow, Tensor, Var};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / (|analytic| + eps)` over checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(tensor, element, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` builds a scalar objective from the parameter leaves it is handed. When
/// `n_samples` is at least the number of coordinates, every coordinate is
/// checked; otherwise a seeded uniform sample without replacement is used.
pub fn finite_diff_check<S, F>(
    params: &[Tensor<S>],
    eps: f64,
    n_samples: usize,
    seed: u64,
    mut f: F,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: FnMut(&mut Graph<S>, &[Var]) -> Var,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(invalid(format!("finite-difference step must be positive, got {eps}")));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars);
    if !g.value(loss).item().is_finite() {
        return Err(Error::NonFinite);
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.as_f64()).collect(),
            None => vec![0.0; p.len()],
        })
        .collect();
    drop(g);

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |e| (t, e)))
        .collect();
    let chosen: Vec<(usize, usize)> = if n_samples >= coords.len() {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, coords.len(), n_samples)
            .into_iter()
            .map(|i| coords[i])
            .collect()
    };

    let mut eval = |perturbed: &[Tensor<S>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars);
        let v = g.value(loss).item().as_f64();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite)
        }
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: chosen.len(),
        worst: None,
    };
    for (t, e) in chosen {
        let orig = work[t].data()[e];
        work[t].data_mut()[e] = orig + S::from_f64(eps);
        let plus = eval(&work)?;
        work[t].data_mut()[e] = orig - S::from_f64(eps);
        let minus = eval(&work)?;
        work[t].data_mut()[e] = orig;

        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[t][e];
        let rel = (a - numeric).abs() / (a.abs() + eps);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = Some((t, e, a, numeric));
        }
    }
    Ok(report)
}

fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// Reduces an op output to a scalar through a fixed random projection so that
// every output coordinate matters.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let shape = g.value(x).shape().to_vec();
    let w = g.constant(seeded(&shape, seed));
    let m = g.mul(x, w);
    g.sum_all(m)
}

fn sparse(e: &[(u32, f64)]) -> SparseRow {
    SparseRow { entries: e.to_vec() }
}

/// Checks every differentiable op in isolation, in double precision with
/// step 1e-3, on every coordinate.
pub fn check_all_ops() -> Result<Vec<(&'static str, GradCheckReport)>> {
    fn check(
        params: Vec<Tensor<f64>>,
        f: impl FnMut(&mut Graph<f64>, &[Var]) -> Var,
    ) -> Result<GradCheckReport> {
        finite_diff_check(&params, 1e-3, usize::MAX, 3, f)
    }
    let a = seeded(&[3, 4], 1);
    let b = seeded(&[4, 5], 2);
    let bt = seeded(&[5, 4], 3);
    let row = seeded(&[1, 4], 4);
    let pos = Tensor::new(vec![3, 4], seeded(&[3, 4], 5).data().iter().map(|v| v.abs() + 0.2).collect())?;

    Ok(vec![
        ("matmul", check(vec![a.clone(), b.clone()], |g, v| {
            let y = g.matmul(v[0], v[1]);
            project(g, y, 10)
        })?),
        ("matmul_nt", check(vec![a.clone(), bt.clone()], |g, v| {
            let y = g.matmul_nt(v[0], v[1]);
            project(g, y, 11)
        })?),
        ("matmul_tn", check(vec![seeded(&[4, 3], 6), b.clone()], |g, v| {
            let y = g.matmul_ex(v[0], v[1], true, false);
            project(g, y, 12)
        })?),
        ("matmul_self", check(vec![a.clone()], |g, v| {
            let y = g.matmul_nt(v[0], v[0]);
            project(g, y, 13)
        })?),
        ("add_sub_mul", check(vec![a.clone(), pos.clone()], |g, v| {
            let s = g.add(v[0], v[1]);
            let d = g.sub(s, v[1]);
            let m = g.mul(d, v[1]);
            project(g, m, 14)
        })?),
        ("add_row_scale", check(vec![a.clone(), row.clone()], |g, v| {
            let y = g.add_row(v[0], v[1]);
            let y = g.scale(y, -1.7);
            let y = g.add_scalar(y, 0.3);
            project(g, y, 15)
        })?),
        ("exp_ln_pow", check(vec![pos.clone()], |g, v| {
            let e = g.exp(v[0]);
            let l = g.ln(v[0]);
            let p = g.pow(v[0], 2.0);
            let s = g.add(e, l);
            let s = g.add(s, p);
            project(g, s, 16)
        })?),
        ("ln_floor", check(vec![pos.clone()], |g, v| {
            let y = g.ln_floor(v[0], 1e-8);
            project(g, y, 25)
        })?),
        ("gelu", check(vec![a.clone()], |g, v| {
            let y = g.gelu(v[0]);
            project(g, y, 17)
        })?),
        ("embedding", check(vec![seeded(&[6, 4], 7)], |g, v| {
            let y = g.embedding(v[0], &[2, 0, 2, 5]);
            project(g, y, 18)
        })?),
        ("layer_norm", check(vec![a.clone(), row.clone(), seeded(&[1, 4], 8)], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]);
            project(g, y, 19)
        })?),
        ("causal_softmax", check(vec![seeded(&[4, 4], 9)], |g, v| {
            let m = g.causal_mask(v[0]);
            let y = g.softmax(m);
            project(g, y, 20)
        })?),
        ("log_softmax", check(vec![a.clone()], |g, v| {
            let y = g.log_softmax(v[0]);
            project(g, y, 21)
        })?),
        ("slice_assemble", check(vec![a.clone()], |g, v| {
            let l = g.slice(v[0], 1, 2, 0, 3);
            let r = g.slice(v[0], 0, 3, 3, 1);
            let y = g.assemble(4, 5, &[(l, 0, 0), (r, 1, 4)]);
            project(g, y, 22)
        })?),
        ("gather_cols", check(vec![a.clone()], |g, v| {
            let y = g.gather_cols(v[0], &[0, 3, 1, 1, 2, 0]);
            project(g, y, 23)
        })?),
        ("weighted_sum", check(vec![a.clone(), pos.clone()], |g, v| {
            let y = g.weighted_sum(&[(v[0], 0.3), (v[1], -1.2), (v[0], 2.0)]);
            project(g, y, 24)
        })?),
        ("cross_entropy", check(vec![a.clone()], |g, v| g.cross_entropy(v[0], &[1, 3, 0]))?),
        ("nll", check(vec![a.clone()], |g, v| {
            let lp = g.log_softmax(v[0]);
            g.nll(lp, &[2, 0, 3], &[0.2, 0.5, 0.3])
        })?),
        ("sparse_kl", check(vec![a], |g, v| {
            let lp = g.log_softmax(v[0]);
            let rows = vec![
                sparse(&[(0, 0.25), (2, 0.75)]),
                sparse(&[(3, 1.0)]),
                sparse(&[(1, 0.5), (2, 0.3), (3, 0.2)]),
            ];
            g.sparse_kl(lp, rows, &[0.5, 0.2, 0.3])
        })?),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }


    fn check(params: Vec<Tensor<f64>>, f: impl FnMut(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
        finite_diff_check(&params, 1e-3, usize::MAX, 3, f)
            .unwrap()
            .max_rel_error
    }

    #[test]
    fn identity_is_exact() {
        let err = check(vec![t(&[1], vec![0.7])], |g, v| g.sum_all(v[0]));
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn zero_step_rejected() {
        let r = finite_diff_check(&[t(&[1], vec![1.0])], 0.0, 1, 0, |g, v| g.sum_all(v[0]));
        assert!(r.is_err());
    }

    #[test]
    fn nan_objective_reported() {
        let r = finite_diff_check(&[t(&[1], vec![-1.0])], 1e-3, 1, 0, |g, v| {
            let p = g.pow(v[0], 0.5);
            g.sum_all(p)
        });
        assert!(matches!(r, Err(Error::NonFinite)));
    }

    #[test]
    fn every_op_passes_gradient_check() {
        for (name, rep) in check_all_ops().unwrap() {
            assert!(rep.max_rel_error < 1e-3, "{name}: {rep:?}");
        }
    }
}
