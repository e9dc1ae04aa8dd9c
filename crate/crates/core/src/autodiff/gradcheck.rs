//! Central finite-difference checks for graph-built scalar functions.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Evaluates `f` at `point` on a fresh graph, returning the scalar value and,
/// when `with_grad` is set, the analytic gradient with respect to `point`.
fn eval<F>(f: &F, point: &Tensor, with_grad: bool) -> Result<(f64, Option<Vec<f64>>)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = if with_grad { g.variable(point.clone()) } else { g.constant(point.clone()) };
    let y = f(&mut g, x)?;
    let value = g.item(y)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteFunction);
    }
    if !with_grad {
        return Ok((value, None));
    }
    let grads = g.backward(y)?;
    let grad = grads.get(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point.numel()]);
    Ok((value, Some(grad)))
}

/// `|analytic − numeric| / max(1e-8, |numeric|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Max over all coordinates of `|analytic − numeric| / max(1e-8, |numeric|)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, h, &coords)
}

/// As [`grad_check`] but restricted to the listed coordinates.
pub fn grad_check_coords<F>(f: F, point: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let (_, analytic) = eval(&f, point, true)?;
    let analytic = analytic.expect("requested gradient");
    let mut worst: f64 = 0.0;
    let mut probe = point.clone();
    for &i in coords {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let (fp, _) = eval(&f, &probe, false)?;
        probe.data[i] = orig - h;
        let (fm, _) = eval(&f, &probe, false)?;
        probe.data[i] = orig;
        worst = worst.max(relative_error(analytic[i], (fp - fm) / (2.0 * h)));
    }
    Ok(worst)
}

type Builder = Box<dyn Fn(&mut Graph, Var, &[Tensor]) -> Result<Var>>;

/// One primitive use: the checked operand shape, the shapes of the constant
/// operands, and how to wire them.
struct Case {
    name: &'static str,
    shape: Vec<usize>,
    consts: Vec<Vec<usize>>,
    /// Inputs are kept this far from any kink of the primitive.
    kinks: Vec<f64>,
    build: Builder,
}

fn case(name: &'static str, shape: &[usize], consts: &[&[usize]], kinks: &[f64], build: impl Fn(&mut Graph, Var, &[Var]) -> Result<Var> + 'static) -> Case {
    Case {
        name,
        shape: shape.to_vec(),
        consts: consts.iter().map(|c| c.to_vec()).collect(),
        kinks: kinks.to_vec(),
        build: Box::new(move |g, x, cs| {
            let cs: Vec<Var> = cs.iter().map(|t| g.constant(t.clone())).collect();
            build(g, x, &cs)
        }),
    }
}

fn cases() -> Vec<Case> {
    let gn = [2usize, 4, 3, 3];
    vec![
        case("add", &[3, 4], &[&[3, 4]], &[], |g, x, c| g.add(x, c[0])),
        case("sub (lhs)", &[3, 4], &[&[3, 4]], &[], |g, x, c| g.sub(x, c[0])),
        case("sub (rhs)", &[3, 4], &[&[3, 4]], &[], |g, x, c| g.sub(c[0], x)),
        case("mul", &[3, 4], &[&[3, 4]], &[], |g, x, c| g.mul(x, c[0])),
        case("mul (square)", &[3, 4], &[], &[], |g, x, _| g.mul(x, x)),
        case("scale", &[3, 4], &[], &[], |g, x, _| g.scale(x, -1.7)),
        case("add_scalar", &[3, 4], &[], &[], |g, x, _| g.add_scalar(x, 0.3)),
        case("matmul (lhs)", &[3, 4], &[&[4, 2]], &[], |g, x, c| g.matmul(x, c[0])),
        case("matmul (rhs)", &[4, 2], &[&[3, 4]], &[], |g, x, c| g.matmul(c[0], x)),
        case("add_bias (input)", &[2, 3, 2, 2], &[&[3]], &[], |g, x, c| g.add_bias(x, c[0])),
        case("add_bias (channel bias)", &[3], &[&[2, 3, 2, 2]], &[], |g, x, c| g.add_bias(c[0], x)),
        case("add_bias (per-item bias)", &[2, 3], &[&[2, 3, 2, 2]], &[], |g, x, c| g.add_bias(c[0], x)),
        case("conv2d (input)", &[2, 2, 5, 5], &[&[3, 2, 3, 3]], &[], |g, x, c| g.conv2d(x, c[0], 1, 1)),
        case("conv2d (kernel)", &[3, 2, 3, 3], &[&[2, 2, 5, 5]], &[], |g, x, c| g.conv2d(c[0], x, 1, 1)),
        case("conv2d stride 2 (input)", &[1, 2, 6, 6], &[&[3, 2, 3, 3]], &[], |g, x, c| g.conv2d(x, c[0], 2, 1)),
        case("conv2d stride 2 (kernel)", &[3, 2, 3, 3], &[&[1, 2, 6, 6]], &[], |g, x, c| g.conv2d(c[0], x, 2, 1)),
        case("conv2d_transpose (input)", &[1, 2, 3, 3], &[&[2, 3, 4, 4]], &[], |g, x, c| g.conv2d_transpose(x, c[0], 2, 1)),
        case("conv2d_transpose (kernel)", &[2, 3, 4, 4], &[&[1, 2, 3, 3]], &[], |g, x, c| g.conv2d_transpose(c[0], x, 2, 1)),
        case("avg_pool2d", &[1, 2, 4, 4], &[], &[], |g, x, _| g.avg_pool2d(x, 2)),
        case("upsample_nearest", &[1, 2, 3, 3], &[], &[], |g, x, _| g.upsample_nearest(x, 2)),
        case("silu", &[3, 4], &[], &[], |g, x, _| g.silu(x)),
        case("leaky_relu", &[3, 4], &[], &[0.0], |g, x, _| g.leaky_relu(x, 0.2)),
        case("sigmoid", &[3, 4], &[], &[], |g, x, _| g.sigmoid(x)),
        case("tanh", &[3, 4], &[], &[], |g, x, _| g.tanh(x)),
        case("exp", &[3, 4], &[], &[], |g, x, _| g.exp(x)),
        case("clamp", &[3, 4], &[], &[-0.5, 0.5], |g, x, _| g.clamp(x, -0.5, 0.5)),
        case("group_norm (input)", &gn, &[&[4], &[4]], &[], |g, x, c| g.group_norm(x, c[0], c[1], 2)),
        case("group_norm (gamma)", &[4], &[&gn, &[4]], &[], |g, x, c| g.group_norm(c[0], x, c[1], 2)),
        case("group_norm (beta)", &[4], &[&gn, &[4]], &[], |g, x, c| g.group_norm(c[0], c[1], x, 2)),
        case("concat", &[2, 2, 3], &[&[2, 3, 3]], &[], |g, x, c| g.concat(&[c[0], x])),
        case("reshape", &[2, 6], &[], &[], |g, x, _| g.reshape(x, &[3, 4])),
        case("sum", &[3, 4], &[], &[], |g, x, _| g.sum(x)),
        case("mean", &[3, 4], &[], &[], |g, x, _| g.mean(x)),
        case("mse", &[3, 4], &[&[3, 4]], &[], |g, x, c| g.mse(x, c[0])),
        case("bce_with_logits (logits)", &[3, 4], &[&[3, 4]], &[], |g, x, c| g.bce_with_logits(x, c[0])),
    ]
}

/// Worst relative error of one primitive over random points.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub points: usize,
    pub max_rel_error: f64,
}

/// Gradient check of every primitive at `points` random inputs. Each point
/// probes `Σ R ⊙ prim(x, consts)` with fresh constants and a fresh random
/// projection `R`, so every output coordinate contributes.
pub fn primitive_suite(points: usize, seed: u64, h: f64) -> Result<Vec<PrimitiveCheck>> {
    use crate::rng;
    let mut out = Vec::new();
    for (ci, c) in cases().into_iter().enumerate() {
        let mut worst: f64 = 0.0;
        for pt in 0..points {
            let mut r = rng::stream(seed, c.name, pt as u64);
            let n: usize = c.shape.iter().product();
            let mut x = Vec::with_capacity(n);
            while x.len() < n {
                let v = 1.2 * rng::normal(&mut r);
                if c.kinks.iter().all(|k| (v - k).abs() > 1e-3) {
                    x.push(v);
                }
            }
            let consts: Vec<Tensor> = c
                .consts
                .iter()
                .enumerate()
                .map(|(k, s)| {
                    let m: usize = s.iter().product();
                    let mut d = rng::normals(&mut r, m);
                    // bce targets live in [0, 1]; group-norm gains stay away from 0
                    if c.name.starts_with("bce") {
                        d.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
                    } else if c.name.starts_with("group_norm") && k == 0 && s.len() == 1 {
                        d.iter_mut().for_each(|v| *v += 1.5);
                    }
                    Tensor::new(s.clone(), d)
                })
                .collect::<Result<_>>()?;
            let proj_seed = rng::stream_id(seed, "projection", (ci * points + pt) as u64);
            let point = Tensor::new(c.shape.clone(), x)?;
            let build = &c.build;
            let err = grad_check(
                |g, v| {
                    let y = build(g, v, &consts)?;
                    let shape = g.shape(y).to_vec();
                    let m: usize = shape.iter().product();
                    let proj = Tensor::new(shape, rng::normals(&mut rng::stream(proj_seed, "r", 0), m))?;
                    let pr = g.constant(proj);
                    let prod = g.mul(y, pr)?;
                    g.sum(prod)
                },
                &point,
                h,
            )?;
            worst = worst.max(err);
        }
        out.push(PrimitiveCheck { name: c.name, points, max_rel_error: worst });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let p = Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.7]).unwrap();
        let err = grad_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                g.sum(sq)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn non_finite_function_is_reported() {
        let p = Tensor::new(vec![1], vec![1.0]).unwrap();
        let r = grad_check(
            |g, x| {
                let big = g.scale(x, f64::INFINITY)?;
                g.sum(big)
            },
            &p,
            1e-5,
        );
        assert!(matches!(r, Err(Error::NonFiniteFunction)));
    }
}
