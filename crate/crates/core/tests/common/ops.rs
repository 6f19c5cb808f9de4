//! Every differentiable op wrapped as a scalar function of one input.

use dietcp::tensor::{grad_check, Graph, Scalar, Tensor, Var};
use dietcp::Result;

pub type Case<T> = (&'static str, Box<dyn Fn(&mut Graph<T>, Var) -> Result<Var>>, Tensor<T>);

/// Deterministic values in (-1, 1).
pub fn noise<T: Scalar>(shape: &[usize], salt: f64) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |i| {
        let v = ((i as f64 + 1.0) * 12.9898 + salt * 78.233).sin() * 43758.5453;
        T::lit(2.0 * (v - v.floor()) - 1.0)
    })
}

/// `sum(w ⊙ y)` with fixed random `w`, so every output coordinate matters.
pub fn probe<T: Scalar>(g: &mut Graph<T>, y: Var, salt: f64) -> Result<Var> {
    let w = g.constant(noise(&g.shape(y).to_vec(), salt));
    let p = g.mul(y, w)?;
    g.sum(p)
}

pub fn cases<T: Scalar>() -> Vec<Case<T>> {
    let m34 = noise::<T>(&[3, 4], 1.0);
    let m45 = noise::<T>(&[4, 5], 2.0);
    let m54 = noise::<T>(&[5, 4], 3.0);
    let v4 = noise::<T>(&[4], 4.0);
    let (ma, mb) = (m45.clone(), m54.clone());
    let (ma2, v4b, m34b) = (m45.clone(), v4.clone(), m34.clone());
    let (gamma, beta) = (noise::<T>(&[4], 5.0), noise::<T>(&[4], 6.0));
    let (gamma2, beta2, x_ln) = (gamma.clone(), beta.clone(), noise::<T>(&[3, 4], 7.0));
    let (beta3, x_ln2) = (beta.clone(), x_ln.clone());
    let gamma3 = gamma.clone();
    let eps = T::lit(1e-5);
    let cat_other = noise::<T>(&[3, 2], 8.0);
    let cat_other2 = noise::<T>(&[2, 4], 9.0);
    vec![
        (
            "matmul lhs",
            Box::new(move |g, x| {
                let b = g.constant(ma.clone());
                let y = g.matmul(x, b)?;
                probe(g, y, 10.0)
            }),
            m34.clone(),
        ),
        (
            "matmul rhs",
            Box::new(move |g, x| {
                let a = g.constant(noise(&[3, 4], 11.0));
                let y = g.matmul(a, x)?;
                probe(g, y, 12.0)
            }),
            m45.clone(),
        ),
        (
            "matmul_nt",
            Box::new(move |g, x| {
                let b = g.constant(mb.clone());
                let y = g.matmul_nt(x, b)?;
                probe(g, y, 13.0)
            }),
            m34.clone(),
        ),
        (
            "batched matmul with transposes",
            Box::new(|g, x| {
                let b = g.constant(noise(&[2, 5, 3], 14.0));
                let y = g.matmul_ex(x, b, true, true)?;
                probe(g, y, 15.0)
            }),
            noise::<T>(&[2, 3, 4], 16.0),
        ),
        (
            "add with row broadcast",
            Box::new(move |g, x| {
                let b = g.constant(ma2.clone());
                let y = g.add(b, x)?;
                probe(g, y, 17.0)
            }),
            noise::<T>(&[5], 18.0),
        ),
        (
            "add same shape",
            Box::new(|g, x| {
                let y = g.add(x, x)?;
                probe(g, y, 19.0)
            }),
            m34.clone(),
        ),
        (
            "mul",
            Box::new(|g, x| {
                let c = g.constant(noise(&[3, 4], 20.0));
                let y = g.mul(x, c)?;
                let z = g.mul(y, x)?;
                probe(g, z, 21.0)
            }),
            m34.clone(),
        ),
        (
            "scale",
            Box::new(|g, x| {
                let y = g.scale(x, T::lit(-2.5))?;
                probe(g, y, 22.0)
            }),
            m34.clone(),
        ),
        (
            "gelu",
            Box::new(|g, x| {
                let s = g.scale(x, T::lit(3.0))?;
                let y = g.gelu(s)?;
                probe(g, y, 23.0)
            }),
            m34.clone(),
        ),
        (
            "layernorm input",
            Box::new(move |g, x| {
                let ga = g.constant(gamma.clone());
                let be = g.constant(beta.clone());
                let y = g.layernorm(x, ga, be, eps)?;
                probe(g, y, 24.0)
            }),
            x_ln.clone(),
        ),
        (
            "layernorm gain",
            Box::new(move |g, ga| {
                let x = g.constant(x_ln.clone());
                let be = g.constant(beta2.clone());
                let y = g.layernorm(x, ga, be, eps)?;
                probe(g, y, 25.0)
            }),
            gamma2,
        ),
        (
            "layernorm bias",
            Box::new(move |g, be| {
                let x = g.constant(x_ln2.clone());
                let ga = g.constant(gamma3.clone());
                let y = g.layernorm(x, ga, be, eps)?;
                probe(g, y, 26.0)
            }),
            beta3,
        ),
        (
            "softmax",
            Box::new(|g, x| {
                let y = g.softmax(x)?;
                probe(g, y, 27.0)
            }),
            m34.clone(),
        ),
        (
            "log_softmax",
            Box::new(|g, x| {
                let y = g.log_softmax(x)?;
                probe(g, y, 28.0)
            }),
            m34.clone(),
        ),
        (
            "reshape",
            Box::new(|g, x| {
                let y = g.reshape(x, &[2, 6])?;
                let z = g.mul(y, y)?;
                probe(g, z, 29.0)
            }),
            m34.clone(),
        ),
        (
            "permute",
            Box::new(|g, x| {
                let y = g.permute(x, &[2, 0, 1])?;
                let z = g.mul(y, y)?;
                probe(g, z, 30.0)
            }),
            noise::<T>(&[2, 3, 4], 31.0),
        ),
        (
            "transpose",
            Box::new(|g, x| {
                let y = g.transpose(x)?;
                let z = g.mul(y, y)?;
                probe(g, z, 32.0)
            }),
            m34.clone(),
        ),
        (
            "slice",
            Box::new(|g, x| {
                let y = g.slice(x, 1, 1, 2)?;
                let z = g.mul(y, y)?;
                probe(g, z, 33.0)
            }),
            m34.clone(),
        ),
        (
            "concat columns",
            Box::new(move |g, x| {
                let o = g.constant(cat_other.clone());
                let y = g.concat(&[o, x, x], 1)?;
                let z = g.mul(y, y)?;
                probe(g, z, 34.0)
            }),
            m34b,
        ),
        (
            "concat rows",
            Box::new(move |g, x| {
                let o = g.constant(cat_other2.clone());
                let y = g.concat(&[x, o], 0)?;
                let z = g.mul(y, y)?;
                probe(g, z, 35.0)
            }),
            m34.clone(),
        ),
        (
            "sum",
            Box::new(|g, x| {
                let y = g.mul(x, x)?;
                g.sum(y)
            }),
            v4b,
        ),
        (
            "mean",
            Box::new(|g, x| {
                let y = g.mul(x, x)?;
                g.mean(y)
            }),
            m34.clone(),
        ),
        (
            "mean_axis",
            Box::new(|g, x| {
                let y = g.mean_axis(x, 1)?;
                let z = g.mul(y, y)?;
                probe(g, z, 36.0)
            }),
            noise::<T>(&[2, 3, 4], 37.0),
        ),
        (
            "gather_rows with repeats",
            Box::new(|g, x| {
                let y = g.gather_rows(x, &[4, 0, 4, 2])?;
                let z = g.mul(y, y)?;
                probe(g, z, 38.0)
            }),
            m54.clone(),
        ),
    ]
}

/// Worst grad_check error over all op cases, with the op it came from.
pub fn worst_op_error<T: Scalar>(h: f64) -> Result<(f64, &'static str)> {
    let mut worst = (0.0, "");
    for (name, f, x) in cases::<T>() {
        let err = grad_check(f, &x, T::lit(h))?.to_f64().unwrap_or(f64::INFINITY);
        if !(err <= worst.0) {
            worst = (err, name);
        }
    }
    Ok(worst)
}
