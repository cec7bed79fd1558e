//! Central finite-difference verification of tape gradients at `f64`.

use super::{ParamId, ParameterStore, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng::{Rng, StreamId};

/// Denominator floor of the relative error, so that gradients that are zero
/// analytically compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Builder of a scalar loss from the parameters on a fresh tape.
pub type LossFn<'a> = dyn Fn(&mut Tape<f64>, &ParameterStore<f64>) -> Result<Var> + 'a;

fn loss_value(store: &ParameterStore<f64>, f: &LossFn<'_>) -> Result<f64> {
    let mut tape = Tape::inference();
    let l = f(&mut tape, store)?;
    Ok(tape.value(l).data()[0])
}

/// Compares analytic and numeric gradients for up to `max_per_param`
/// coordinates of every parameter (all coordinates when it is `usize::MAX`).
pub fn check(
    name: &str,
    store: &mut ParameterStore<f64>,
    f: &LossFn<'_>,
    max_per_param: usize,
) -> Result<CheckReport> {
    let mut tape = Tape::new();
    let l = f(&mut tape, store)?;
    let grads = tape.backward(l)?;
    let ids: Vec<ParamId> = store.ids().collect();
    let mut max_rel: f64 = 0.0;
    let mut checked = 0;
    let mut pick = Rng::new(0x6772_6164, StreamId(ids.len() as u64));
    for id in ids {
        let n = store.value(id).len();
        let coords: Vec<usize> = if n <= max_per_param {
            (0..n).collect()
        } else {
            (0..max_per_param).map(|_| pick.below(n)).collect()
        };
        for i in coords {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + STEP;
            let up = loss_value(store, f)?;
            store.value_mut(id).data_mut()[i] = orig - STEP;
            let down = loss_value(store, f)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads.by_param.get(&id).map_or(0.0, |g| g.data()[i]);
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(REL_FLOOR);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        max_rel_error: max_rel,
        checked,
    })
}

fn normal(seed: u64, shape: &[usize]) -> Tensor<f64> {
    crate::rng::gaussian(seed, StreamId(seed), shape)
}

/// Loss `Σ out ⊙ R` with a fixed random projection `R`, so every output
/// coordinate contributes.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(normal(seed ^ 0xABCD, tape.shape(out)));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

type Case = (&'static str, ParameterStore<f64>, Box<LossFn<'static>>);

fn store(entries: &[(&str, Tensor<f64>)]) -> ParameterStore<f64> {
    let mut s = ParameterStore::new();
    for (n, t) in entries {
        s.insert(n, t.clone()).expect("distinct names");
    }
    s
}

fn p(tape: &mut Tape<f64>, s: &ParameterStore<f64>, name: &str) -> Var {
    tape.param(s, s.id(name).expect("parameter exists"))
}

/// One case per differentiable tape primitive, plus a small composite.
pub fn primitive_cases() -> Vec<Case> {
    let mut cases: Vec<Case> = Vec::new();
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { normal(1, &[4, 3]) } else { normal(1, &[3, 4]) };
        let b = if tb { normal(2, &[5, 4]) } else { normal(2, &[4, 5]) };
        cases.push((
            match (ta, tb) {
                (false, false) => "matmul",
                (true, false) => "matmul_ta",
                (false, true) => "matmul_tb",
                (true, true) => "matmul_ta_tb",
            },
            store(&[("a", a), ("b", b)]),
            Box::new(move |t, s| {
                let (a, b) = (p(t, s, "a"), p(t, s, "b"));
                let o = t.matmul_t(a, b, ta, tb)?;
                project(t, o, 3)
            }),
        ));
    }
    let ab = || store(&[("a", normal(4, &[3, 4])), ("b", normal(5, &[3, 4]))]);
    cases.push((
        "add",
        ab(),
        Box::new(|t, s| {
            let a_ = p(t, s, "a");
            let b_ = p(t, s, "b");
            let o = t.add(a_, b_)?;
            project(t, o, 6)
        }),
    ));
    cases.push((
        "sub",
        ab(),
        Box::new(|t, s| {
            let a_ = p(t, s, "a");
            let b_ = p(t, s, "b");
            let o = t.sub(a_, b_)?;
            project(t, o, 7)
        }),
    ));
    cases.push((
        "mul",
        ab(),
        Box::new(|t, s| {
            let a_ = p(t, s, "a");
            let b_ = p(t, s, "b");
            let o = t.mul(a_, b_)?;
            project(t, o, 8)
        }),
    ));
    cases.push((
        "scale",
        ab(),
        Box::new(|t, s| {
            let a_ = p(t, s, "a");
            let o = t.scale(a_, -1.7);
            project(t, o, 9)
        }),
    ));
    cases.push((
        "add_channel",
        store(&[("x", normal(10, &[3, 2, 2])), ("v", normal(11, &[3]))]),
        Box::new(|t, s| {
            let x_ = p(t, s, "x");
            let v_ = p(t, s, "v");
            let o = t.add_channel(x_, v_)?;
            project(t, o, 12)
        }),
    ));
    cases.push((
        "conv2d",
        store(&[
            ("x", normal(13, &[2, 5, 4])),
            ("w", normal(14, &[3, 2, 3, 3])),
            ("b", normal(15, &[3])),
        ]),
        Box::new(|t, s| {
            let x_ = p(t, s, "x");
            let w_ = p(t, s, "w");
            let b_ = p(t, s, "b");
            let o = t.conv2d(x_, w_, b_)?;
            project(t, o, 16)
        }),
    ));
    cases.push((
        "group_norm",
        store(&[
            ("x", normal(17, &[4, 3, 3])),
            ("g", normal(18, &[4])),
            ("b", normal(19, &[4])),
        ]),
        Box::new(|t, s| {
            let x_ = p(t, s, "x");
            let g_ = p(t, s, "g");
            let b_ = p(t, s, "b");
            let o = t.group_norm(x_, g_, b_, 2)?;
            project(t, o, 20)
        }),
    ));
    cases.push((
        "silu",
        store(&[("x", normal(21, &[3, 5]))]),
        Box::new(|t, s| {
            let x_ = p(t, s, "x");
            let o = t.silu(x_);
            project(t, o, 22)
        }),
    ));
    cases.push((
        "upsample2",
        store(&[("x", normal(23, &[2, 2, 3]))]),
        Box::new(|t, s| {
            let x_ = p(t, s, "x");
            let o = t.upsample2(x_)?;
            project(t, o, 24)
        }),
    ));
    cases.push((
        "downsample2",
        store(&[("x", normal(25, &[2, 4, 6]))]),
        Box::new(|t, s| {
            let x_ = p(t, s, "x");
            let o = t.downsample2(x_)?;
            project(t, o, 26)
        }),
    ));
    cases.push((
        "concat_dim0",
        store(&[("a", normal(27, &[2, 2, 2])), ("b", normal(28, &[3, 2, 2]))]),
        Box::new(|t, s| {
            let a_ = p(t, s, "a");
            let b_ = p(t, s, "b");
            let o = t.concat_dim0(&[a_, b_])?;
            project(t, o, 29)
        }),
    ));
    cases.push((
        "concat_cols",
        store(&[("a", normal(30, &[3, 2])), ("b", normal(31, &[3, 4]))]),
        Box::new(|t, s| {
            let a_ = p(t, s, "a");
            let b_ = p(t, s, "b");
            let o = t.concat_cols(&[a_, b_])?;
            project(t, o, 32)
        }),
    ));
    cases.push((
        "slice_dim0",
        store(&[("x", normal(33, &[5, 3]))]),
        Box::new(|t, s| {
            let x_ = p(t, s, "x");
            let o = t.slice_dim0(x_, 1, 3)?;
            project(t, o, 34)
        }),
    ));
    cases.push((
        "slice_cols",
        store(&[("x", normal(35, &[3, 6]))]),
        Box::new(|t, s| {
            let x_ = p(t, s, "x");
            let o = t.slice_cols(x_, 2, 3)?;
            project(t, o, 36)
        }),
    ));
    cases.push((
        "reshape",
        store(&[("x", normal(37, &[2, 6]))]),
        Box::new(|t, s| {
            let x_ = p(t, s, "x");
            let o = t.reshape(x_, &[3, 2, 2])?;
            project(t, o, 38)
        }),
    ));
    cases.push((
        "softmax_rows",
        store(&[("x", normal(39, &[4, 5]))]),
        Box::new(|t, s| {
            let x_ = p(t, s, "x");
            let o = t.softmax_rows(x_)?;
            project(t, o, 40)
        }),
    ));
    cases.push((
        "gather_rows",
        store(&[("table", normal(41, &[6, 3]))]),
        Box::new(|t, s| {
            let table_ = p(t, s, "table");
            let o = t.gather_rows(table_, &[2, 0, 2, 5])?;
            project(t, o, 42)
        }),
    ));
    cases.push((
        "sum",
        store(&[("x", normal(43, &[3, 3]))]),
        Box::new(|t, s| {
            let x = p(t, s, "x");
            let sq = t.mul(x, x)?;
            Ok(t.sum(sq))
        }),
    ));
    cases.push((
        "mean",
        store(&[("x", normal(44, &[3, 3]))]),
        Box::new(|t, s| {
            let x = p(t, s, "x");
            let sq = t.mul(x, x)?;
            Ok(t.mean(sq))
        }),
    ));
    cases.push((
        "three_layer_net",
        store(&[
            ("w1", normal(45, &[6, 4])),
            ("b1", normal(46, &[6, 1])),
            ("w2", normal(47, &[5, 6])),
            ("b2", normal(48, &[5, 1])),
            ("w3", normal(49, &[3, 5])),
            ("x", normal(50, &[4, 7])),
        ]),
        Box::new(|t, s| {
            let w1_ = p(t, s, "w1");
            let x_ = p(t, s, "x");
            let h = t.matmul(w1_, x_)?;
            let b1_ = p(t, s, "b1");
            let h = t.add_channel(h, b1_)?;
            let h = t.silu(h);
            let w2_ = p(t, s, "w2");
            let h = t.matmul(w2_, h)?;
            let b2_ = p(t, s, "b2");
            let h = t.add_channel(h, b2_)?;
            let h = t.silu(h);
            let w3_ = p(t, s, "w3");
            let o = t.matmul(w3_, h)?;
            let o = t.softmax_rows(o)?;
            project(t, o, 51)
        }),
    ));
    cases
}

/// Runs every primitive case with all coordinates checked.
pub fn check_primitives() -> Result<Vec<CheckReport>> {
    primitive_cases()
        .into_iter()
        .map(|(name, mut s, f)| check(name, &mut s, f.as_ref(), usize::MAX))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        for r in check_primitives().unwrap() {
            assert!(r.max_rel_error < 1e-4, "{}: {}", r.name, r.max_rel_error);
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn a_wrong_gradient_is_detected() {
        // d/dx sum(x²) is 2x; compare against a loss whose tape value is
        // computed differently from its gradient by scaling after the fact.
        let mut s = store(&[("x", normal(60, &[2, 2]))]);
        let f: Box<LossFn<'static>> = Box::new(|t, s| {
            let x = p(t, s, "x");
            let sq = t.mul(x, x)?;
            let total = t.sum(sq);
            if t.grad_enabled() {
                Ok(t.scale(total, 1.5))
            } else {
                Ok(total)
            }
        });
        let r = check("broken", &mut s, f.as_ref(), usize::MAX).unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
